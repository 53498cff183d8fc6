#include "dnspot/dn_queries.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace dnspot {

void NoiseConfig::validate() const {
  if (!(lambda_flip >= 0.0 && lambda_flip <= 1.0)) throw std::invalid_argument("noise.lambda_flip must lie in [0, 1]");
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw std::invalid_argument("noise.mask_prob must lie in [0, 1]");
  if (T < 2) throw std::invalid_argument("noise.T must be at least 2");
  if (max_instances < 1) throw std::invalid_argument("noise.max_instances must be at least 1");
}

int dynamic_groups(int n) {
  if (n < 1) throw std::invalid_argument("dynamic_groups: need at least one instance");
  return std::max(1, std::min(5, 100 / n));
}

namespace {

double signed_offset(double distance, bool positive, Rng& rng) {
  const double ratio = rng.uniform();
  const bool flip = rng.bernoulli(0.5);
  const double magnitude = positive ? ratio * distance : (ratio + 1.0) * distance;
  return flip ? -magnitude : magnitude;
}

int flip_character(int c, Rng& rng, int alphabet_size) {
  int r = rng.uniform_int(0, alphabet_size - 2);
  return r >= c ? r + 1 : r;
}

void apply_flips(std::vector<int>& chars, double lambda_flip, Rng& rng, int alphabet_size) {
  if (alphabet_size < 2) return;
  for (int& c : chars) {
    if (c == alphabet_size) continue;
    if (rng.bernoulli(lambda_flip)) c = flip_character(c, rng, alphabet_size);
  }
}

std::span<const int> truncated(std::span<const int> transcript, int T) {
  if (transcript.empty()) throw std::invalid_argument("character sliding: empty transcript");
  return transcript.first(std::min<std::size_t>(transcript.size(), static_cast<std::size_t>(T)));
}

}  // namespace

ControlPoints<double> noise_offsets(const Bezier& center, const Bezier& top, bool positive, Rng& rng) {
  const ControlPoints<double> d = control_point_distances(center, top);
  ControlPoints<double> offsets;
  for (int i = 0; i < 4; ++i) {
    offsets(i, 0) = signed_offset(d(i, 0), positive, rng);
    offsets(i, 1) = signed_offset(d(i, 1), positive, rng);
  }
  return offsets;
}

Points noised_positional_points(const TextInstance& instance, bool positive, int T, Rng& rng, NoiseTarget target) {
  const Bezier center = instance.center();
  if (target == NoiseTarget::ControlPoints) {
    Bezier noised(center.control + noise_offsets(center, instance.top, positive, rng));
    return sample_uniform(noised, T);
  }
  Points samples = sample_uniform(center, T);
  const Points reach = (sample_uniform(instance.top, T) - samples).cwiseAbs();
  for (int k = 0; k < T; ++k) {
    samples(k, 0) += signed_offset(reach(k, 0), positive, rng);
    samples(k, 1) += signed_offset(reach(k, 1), positive, rng);
  }
  return samples;
}

std::vector<int> sliding_run_lengths(int t, int T) {
  if (t < 1 || t > T) throw std::invalid_argument("sliding_run_lengths: need 1 <= t <= T");
  std::vector<int> runs(t, T / t);
  const int extra = T % t;
  for (int i = 0; i < extra; ++i) ++runs[i];
  return runs;
}

std::vector<int> mask_character_sliding(std::span<const int> transcript, int T, double mask_prob, double lambda_flip,
                                        Rng& rng, int alphabet_size) {
  const auto chars = truncated(transcript, T);
  const int t = static_cast<int>(chars.size());
  const auto runs = sliding_run_lengths(t, T);

  std::vector<int> out;
  out.reserve(T);
  for (int i = 0; i < t; ++i) {
    const int keep = rng.uniform_int(0, runs[i] - 1);
    for (int r = 0; r < runs[i]; ++r) {
      const bool masked = r != keep && rng.bernoulli(mask_prob);
      out.push_back(masked ? alphabet_size : chars[i]);
    }
  }
  apply_flips(out, lambda_flip, rng, alphabet_size);
  return out;
}

std::vector<int> left_aligned_characters(std::span<const int> transcript, int T, double lambda_flip, Rng& rng,
                                         int alphabet_size) {
  const auto chars = truncated(transcript, T);
  std::vector<int> out(T, alphabet_size);
  std::copy(chars.begin(), chars.end(), out.begin());
  apply_flips(out, lambda_flip, rng, alphabet_size);
  return out;
}

DnQueryBatch build_dn_batch(std::span<const TextInstance> instances, const NoiseConfig& cfg, Rng& rng,
                            int alphabet_size, const DnOptions& options) {
  cfg.validate();
  if (instances.empty()) throw std::invalid_argument("build_dn_batch: image has no text instances");
  const auto used = instances.first(std::min<std::size_t>(instances.size(), cfg.max_instances));

  DnQueryBatch batch;
  batch.n = static_cast<int>(used.size());
  batch.g = dynamic_groups(batch.n);
  batch.T = cfg.T;
  batch.groups.resize(batch.g);
  for (auto& group : batch.groups) {
    for (const auto& inst : used) {
      group.source_ids.push_back(inst.id);
      group.positive_points.push_back(noised_positional_points(inst, true, cfg.T, rng, options.noise_target));
      group.negative_points.push_back(noised_positional_points(inst, false, cfg.T, rng, options.noise_target));
      if (options.content_init == ContentInit::Sliding) {
        group.positive_chars.push_back(
            mask_character_sliding(inst.transcript, cfg.T, cfg.mask_prob, cfg.lambda_flip, rng, alphabet_size));
      } else {
        group.positive_chars.push_back(left_aligned_characters(inst.transcript, cfg.T, cfg.lambda_flip, rng,
                                                               alphabet_size));
      }
      group.negative_chars.emplace_back(cfg.T, alphabet_size);
    }
  }
  return batch;
}

DnQueryBatch build_dn_batch(std::span<const TextInstance> instances, const NoiseConfig& cfg, int alphabet_size,
                            const DnOptions& options) {
  Rng rng(cfg.rng_seed);
  return build_dn_batch(instances, cfg, rng, alphabet_size, options);
}

}  // namespace dnspot
