#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dnspot/geometry.hpp"
#include "dnspot/random.hpp"

namespace dnspot {

struct NoiseConfig {
  double lambda_flip = 0.4;  ///< character flip probability
  double mask_prob = 0.5;    ///< per-clone probability of turning into background
  int max_instances = 100;
  int T = 25;                ///< points per curve, equal to the maximum recognition length
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// Where positional noise is injected. ControlPoints is the default; SampledPoints
/// perturbs each sampled point directly and exists for the ablation arm.
enum class NoiseTarget { ControlPoints, SampledPoints };

/// How positive content queries are initialised. Sliding is masked character sliding;
/// LeftAligned places the transcript at the front and pads with background.
enum class ContentInit { Sliding, LeftAligned };

struct DnOptions {
  NoiseTarget noise_target = NoiseTarget::ControlPoints;
  ContentInit content_init = ContentInit::Sliding;
};

/// One denoising group: n positive and n negative queries, each T points / T characters.
struct DnGroup {
  std::vector<Points> positive_points;
  std::vector<Points> negative_points;
  std::vector<std::vector<int>> positive_chars;
  std::vector<std::vector<int>> negative_chars;
  std::vector<InstanceId> source_ids;
};

struct DnQueryBatch {
  std::vector<DnGroup> groups;
  int g = 0;
  int n = 0;
  int T = 0;

  /// Total query count g * 2n.
  int query_count() const { return g * 2 * n; }
};

/// Number of denoising groups for an image with n instances: max(1, min(5, floor(100 / n))).
int dynamic_groups(int n);

/// Offsets applied to the four control points; row i is (dx_i, dy_i).
ControlPoints<double> noise_offsets(const Bezier& center, const Bezier& top, bool positive, Rng& rng);

/// Noised center-curve samples for one instance.
Points noised_positional_points(const TextInstance& instance, bool positive, int T, Rng& rng,
                                NoiseTarget target = NoiseTarget::ControlPoints);

/// Clone run lengths used by character sliding: the first T mod t characters get one extra clone.
std::vector<int> sliding_run_lengths(int t, int T);

/// Masked character sliding. Background is index `alphabet_size`.
std::vector<int> mask_character_sliding(std::span<const int> transcript, int T, double mask_prob,
                                        double lambda_flip, Rng& rng, int alphabet_size);

/// Content initialisation without sliding: transcript left-aligned, background padded, then flipped.
std::vector<int> left_aligned_characters(std::span<const int> transcript, int T, double lambda_flip, Rng& rng,
                                         int alphabet_size);

DnQueryBatch build_dn_batch(std::span<const TextInstance> instances, const NoiseConfig& cfg, Rng& rng,
                            int alphabet_size, const DnOptions& options = {});

/// Convenience overload drawing all noise from cfg.rng_seed.
DnQueryBatch build_dn_batch(std::span<const TextInstance> instances, const NoiseConfig& cfg, int alphabet_size,
                            const DnOptions& options = {});

}  // namespace dnspot
