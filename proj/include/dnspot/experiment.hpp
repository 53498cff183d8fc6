#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dnspot/assignment.hpp"
#include "dnspot/decoder.hpp"
#include "dnspot/dn_queries.hpp"
#include "dnspot/losses.hpp"
#include "dnspot/synth.hpp"

namespace dnspot {

/// Component toggles. bcp, mcs and bct only exist when dn is on.
struct Ablations {
  bool dn = true;
  bool bcp = true;  ///< noise on control points (off: on sampled points)
  bool mcs = true;  ///< masked character sliding (off: left-aligned transcript)
  bool bct = true;  ///< background cross-entropy on the negative part (off: text_neg weight 0)

  void validate() const;
  /// Turns denoising off together with everything that depends on it.
  static Ablations no_dn() { return {false, false, false, false}; }
};

struct TrainConfig {
  int steps = 4000;
  int snapshot_interval = 500;
  double learning_rate = 1e-3;
  double lr_drop_fraction = 0.86;  ///< learning rate x0.1 from this fraction of the run onward
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  double score_threshold = 0.4;
  double detection_threshold = 0.05;
  bool aux_loss = true;        ///< also supervise the outputs of every earlier decoder layer
  bool deterministic = false;  ///< write wall_time = 0 so reruns are byte-identical

  void validate() const;
};

struct RunConfig {
  std::uint64_t seed = 0;
  NoiseConfig noise;
  LossWeights loss;
  MatchCost match;
  DecoderConfig decoder;
  SceneSpec scene;
  TrainConfig train;
  Ablations ablations;
  int images = 100;
  int eval_images = 50;
  std::string output_dir = "run";

  /// Propagates shared values (T, alphabet size, feature channels, seeds) and validates everything.
  void finalize();
};

struct Dataset {
  static constexpr int kFormatVersion = 1;
  SceneSpec spec;
  std::vector<int> image_indices;
  std::vector<std::vector<TextInstance>> images;

  std::size_t instance_count() const;
  FeatureMap features(std::size_t image) const;
};

/// Images [first_index, first_index + count) of the scene distribution. `jobs` > 1 generates
/// images on that many threads; the result does not depend on it.
Dataset generate_dataset(const SceneSpec& spec, int count, int first_index = 0, int jobs = 1);

/// First image index of the held-out evaluation split.
inline constexpr int kEvalIndexOffset = 1000000;

// ---------------------------------------------------------------------------
// Evaluation

/// One detected (or ground-truth) text: boundary point sets plus transcript.
struct Detection {
  Points top;
  Points bot;
  std::vector<int> transcript;
};

struct EvalReport {
  int num_pred = 0;
  int num_gt = 0;
  int true_positives = 0;
  int e2e_true_positives = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double e2e_precision = 0.0;
  double e2e_recall = 0.0;
  double e2e_f1 = 0.0;

  /// Adds raw counts and recomputes the ratios.
  void accumulate(const EvalReport& other);
  void finish();
};

/// Greedy CTC decoding: per-step argmax, collapse repeats, drop blanks (last class).
std::vector<int> greedy_decode(const Eigen::MatrixXd& logits);

/// Mean over the 2T boundary points of |dx| + |dy|.
double boundary_distance(const Detection& a, const Detection& b);

/// Scores one image: one-to-one matching on boundary distance, a detection match needs distance < threshold,
/// an end-to-end match additionally needs an identical transcript.
EvalReport score_image(const std::vector<Detection>& predictions, const std::vector<Detection>& ground_truth,
                       double threshold);

std::vector<Detection> ground_truth_detections(const std::vector<TextInstance>& instances, int T);

/// Detections of the matching part with score >= score_threshold.
std::vector<Detection> detect(const PredictionSet& matching, double score_threshold);

EvalReport evaluate(Decoder& model, const Dataset& data, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Instability snapshots

/// Matching-part outputs needed to recompute assignments offline.
struct ImageSnapshot {
  Eigen::VectorXd scores;
  Points points;  // (K*T) x 2
};

struct Snapshot {
  int step = 0;
  int T = 0;
  std::vector<ImageSnapshot> images;
};

Snapshot take_snapshot(Decoder& model, const Dataset& data, int step);

std::vector<MatchAssignment> snapshot_assignments(const Snapshot& snap, const Dataset& data, const MatchCost& cost);

/// Mean per-image instability between two consecutive snapshots.
double mean_instability(const std::vector<MatchAssignment>& previous, const std::vector<MatchAssignment>& next);

struct IsRow {
  int step = 0;  ///< step of the later snapshot
  double is = 0.0;
};

std::vector<IsRow> instability_trace(const std::vector<Snapshot>& snapshots, const Dataset& data, const MatchCost& cost);

// ---------------------------------------------------------------------------
// Training

struct MetricRow {
  int step = 0;
  double wall_time = 0.0;
  std::string part;  // "dn" or "match"
  LossBreakdown terms;
};

struct EvalRow {
  int step = 0;
  EvalReport report;
};

struct TrainResult {
  std::vector<MetricRow> metrics;
  std::vector<EvalRow> evals;
  std::vector<IsRow> instability;
  std::vector<Snapshot> snapshots;
};

/// Trains from a fresh seeded model. When `output_dir` is set, writes metrics.jsonl, eval.jsonl,
/// snapshots/ and checkpoint.bin there.
TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Dataset* eval_set, Decoder& model,
                  const std::optional<std::filesystem::path>& output_dir = std::nullopt);

/// Learning rate at a given step (constant, then x0.1).
double learning_rate_at(const TrainConfig& cfg, int step);

/// Loss and gradients for one image; exposed for tests.
struct StepLoss {
  LossResult dn;
  LossResult match;
  bool has_dn = false;
};

StepLoss image_loss(Decoder& model, const RunConfig& cfg, const std::vector<TextInstance>& instances,
                    const FeatureMap& features, Rng& noise_rng, bool backward);

/// Keeps freed tape buffers in the heap instead of returning them to the kernel (glibc only, no-op elsewhere).
void tune_allocator();

}  // namespace dnspot
