#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "dnspot/attn_mask.hpp"
#include "dnspot/autodiff.hpp"
#include "dnspot/dn_queries.hpp"
#include "dnspot/geometry.hpp"
#include "dnspot/losses.hpp"

namespace dnspot {

struct DecoderConfig {
  int layers = 2;
  int dim = 64;
  int heads = 4;
  int T = 25;
  int alphabet_size = 37;
  int ffn_dim = 128;
  int num_queries = 16;       ///< matching-part query count K
  int feature_channels = 0;   ///< raw channels of the feature map, set from the scene
  double cross_sigma = 0.1;   ///< width of the spatial prior in the first layer's cross-attention (normalized units)
  double refined_sigma = 0.05;  ///< prior width in later layers, which look around refined points
  bool refine = true;         ///< later layers use the previous layer's center points as reference
  double dropout = 0.0;

  void validate() const;
};

/// Dense stand-in for the encoder output: one row of raw channels per grid cell.
struct FeatureMap {
  int height = 0;
  int width = 0;
  Eigen::MatrixXd cells;  // (height*width) x channels
  Points centers;         // (height*width) x 2 cell centres

  int channels() const { return static_cast<int>(cells.cols()); }
};

/// Query-side inputs: Q queries of T positions each, stacked query-major.
struct QueryInputs {
  int queries = 0;
  Points reference;        ///< (Q*T) x 2, fixed anchor of each position
  ad::Var reference_var;   ///< same values on the tape, base of the coordinate residual
  ad::Var positional;      ///< (Q*T) x dim
  ad::Var content;         ///< (Q*T) x dim
};

struct HeadVars {
  ad::Var char_logits;   // (Q*T) x (C+1)
  ad::Var score_logits;  // Q x 1
  ad::Var center;        // (Q*T) x 2
  ad::Var top;           // (Q*T) x 2
  ad::Var bot;           // (Q*T) x 2
};

/// Sinusoidal encoding of 2-D points: dim/2 channels per axis, alternating sin/cos.
Eigen::MatrixXd positional_encoding(const Points& points, int dim);

/// Factorized text-query decoder: per layer, unmasked intra-instance self-attention over the T positions,
/// masked inter-instance self-attention over mean-pooled instance states, spatially-modulated cross-attention
/// to the feature map, and a feed-forward block. Heads predict character logits, an instance score and
/// residual offsets for center and boundary points.
class Decoder {
 public:
  Decoder(const DecoderConfig& cfg, std::uint64_t seed);

  const DecoderConfig& config() const { return cfg_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }

  /// Q_N = MLP(PE(points)).
  ad::Var embed_positional(ad::Tape& tape, const Points& points);
  /// Character embedding; index alphabet_size is background.
  ad::Var embed_content(ad::Tape& tape, const std::vector<int>& chars);

  /// Inputs for the K learned matching queries (anchor curves + learned content).
  QueryInputs matching_inputs(ad::Tape& tape);
  /// Sampled anchor curves, (K*T) x 2.
  Points anchor_points() const;
  /// Inputs for a denoising batch, ordered group-major (positive n, negative n per group).
  QueryInputs denoising_inputs(ad::Tape& tape, const DnQueryBatch& batch);
  /// Denoising part followed by the matching part.
  QueryInputs combine(ad::Tape& tape, const QueryInputs& first, const QueryInputs& second);

  ad::Var encode_features(ad::Tape& tape, const FeatureMap& features);

  /// Runs all layers; returns the head outputs of every layer, last layer last.
  std::vector<HeadVars> decode(ad::Tape& tape, const QueryInputs& queries, ad::Var features,
                               const Points& cell_centers, const AttentionMask& mask, Rng* dropout_rng = nullptr);

 private:
  void init(std::uint64_t seed);
  HeadVars heads(ad::Tape& tape, ad::Var x, ad::Var reference);
  ad::Var p(ad::Tape& tape, const std::string& name) { return tape.parameter(params_.get(name)); }

  DecoderConfig cfg_;
  ad::ParameterStore params_;
};

/// Converts head outputs to a prediction set (scores = sigmoid of clamped logits).
PredictionSet read_predictions(const ad::Tape& tape, const HeadVars& heads, int T);

/// Adds d(loss)/d(prediction) to the head outputs (the score entry is taken through the sigmoid).
void seed_gradients(ad::Tape& tape, const HeadVars& heads, const PredictionSet& grad);

/// Seeds the tape with d(loss)/d(prediction) and runs the backward sweep.
void backpropagate(ad::Tape& tape, const HeadVars& heads, const PredictionSet& grad);

/// One full forward pass for an image: optional denoising part, then the matching part.
struct ForwardPass {
  ad::Tape tape;
  std::vector<HeadVars> layer_heads;
  std::vector<PredictionSet> layer_predictions;
  HeadVars heads;            ///< last layer
  PredictionSet predictions;  ///< last layer
  int dn_queries = 0;
  int matching_queries = 0;
};

ForwardPass run_forward(Decoder& decoder, const FeatureMap& features, const DnQueryBatch* batch,
                        Rng* dropout_rng = nullptr);

}  // namespace dnspot
