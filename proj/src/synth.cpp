#include "dnspot/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dnspot/random.hpp"

namespace dnspot {

void SceneSpec::validate() const {
  if (instances_per_image.lo < 1 || instances_per_image.hi < instances_per_image.lo) {
    throw std::invalid_argument("scene.instances_per_image must be a non-empty range of positive counts");
  }
  if (alphabet_size < 2) throw std::invalid_argument("scene.alphabet_size must be at least 2");
  if (transcript_len.lo < 1 || transcript_len.hi < transcript_len.lo) {
    throw std::invalid_argument("scene.transcript_len must be a non-empty range of positive lengths");
  }
  if (!(inverse_fraction >= 0.0 && inverse_fraction <= 1.0)) {
    throw std::invalid_argument("scene.inverse_fraction must lie in [0, 1]");
  }
  if (curvature.hi < curvature.lo || curvature.lo < 0.0) throw std::invalid_argument("scene.curvature must be a non-empty range");
  if (text_height.lo < kMinTextHeight || text_height.hi < text_height.lo) {
    throw std::invalid_argument("scene.text_height must be a non-empty range at or above 0.01");
  }
  if (text_width.lo <= 0.0 || text_width.hi < text_width.lo || text_width.hi > 0.9) {
    throw std::invalid_argument("scene.text_width must be a non-empty range within (0, 0.9]");
  }
  if (grid_height < 2 || grid_width < 2) throw std::invalid_argument("scene grid must be at least 2 x 2");
}

int feature_channel_count(int alphabet_size) { return alphabet_size + 22; }

namespace {

Eigen::RowVector2d normal_of(const Eigen::RowVector2d& dir) {
  const double n = dir.norm();
  if (n <= 0.0) return {0.0, 1.0};
  return Eigen::RowVector2d(-dir(1), dir(0)) / n;
}

TextInstance make_instance(Rng& rng, const SceneSpec& spec, double band_top, double band_height, InstanceId id) {
  const double height = std::min(rng.uniform(spec.text_height.lo, spec.text_height.hi),
                                 std::max(kMinTextHeight, 0.8 * band_height));
  const double width = rng.uniform(spec.text_width.lo, spec.text_width.hi);
  const double slack = std::max(0.0, band_height - height);
  const double bend = rng.uniform(spec.curvature.lo, spec.curvature.hi) * slack;
  const double b1 = bend * rng.uniform(-1.0, 1.0);
  const double b2 = bend * rng.uniform(-1.0, 1.0);
  const double room = std::max(0.0, slack - 0.75 * std::max(std::abs(b1), std::abs(b2)));
  const double max_angle = std::min(spec.max_rotation, std::asin(std::min(1.0, room / width)));
  const double angle = max_angle * rng.uniform(-1.0, 1.0);

  const double x0 = rng.uniform(0.05, std::max(0.05, 0.95 - width));
  const double yc = band_top + 0.5 * band_height;
  ControlPoints<double> local;
  local << 0.0, 0.0, width / 3.0, b1, 2.0 * width / 3.0, b2, width, 0.0;
  local.col(0).array() -= 0.5 * width;

  Eigen::Matrix2d rot;
  rot << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  ControlPoints<double> center = local * rot.transpose();
  center.col(0).array() += x0 + 0.5 * width;
  center.col(1).array() += yc;

  // Offset each control point along the local normal of the control polygon.
  ControlPoints<double> top, bottom;
  for (int i = 0; i < 4; ++i) {
    const int a = std::max(0, i - 1);
    const int b = std::min(3, i + 1);
    const Eigen::RowVector2d n = normal_of(center.row(b) - center.row(a));
    // Image y grows downward; the top edge sits on the -normal side for left-to-right text.
    top.row(i) = center.row(i) - 0.5 * height * n;
    bottom.row(i) = center.row(i) + 0.5 * height * n;
  }

  TextInstance inst;
  inst.id = id;
  inst.top = Bezier(top);
  inst.bottom = Bezier(bottom);
  const int len = rng.uniform_int(spec.transcript_len.lo, spec.transcript_len.hi);
  for (int k = 0; k < len; ++k) inst.transcript.push_back(rng.uniform_int(0, spec.alphabet_size - 1));

  if (rng.bernoulli(spec.inverse_fraction)) {
    // Inverse-like: read right to left and flipped, so the reading-order top edge is the geometric bottom.
    inst.top = Bezier(bottom.colwise().reverse());
    inst.bottom = Bezier(top.colwise().reverse());
  }
  return inst;
}

}  // namespace

std::vector<TextInstance> generate_instances(const SceneSpec& spec, int image_index) {
  spec.validate();
  Rng rng = Rng::derive(spec.seed, {0x7363656e65, static_cast<std::uint64_t>(image_index)});
  const int n = rng.uniform_int(spec.instances_per_image.lo, spec.instances_per_image.hi);
  std::vector<int> bands(n);
  std::iota(bands.begin(), bands.end(), 0);
  std::shuffle(bands.begin(), bands.end(), rng.engine());

  const double band_height = 1.0 / n;
  std::vector<TextInstance> out;
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    out.push_back(make_instance(rng, spec, bands[k] * band_height, band_height,
                                static_cast<InstanceId>(image_index) * 1000 + k));
  }
  return out;
}

Scene generate_scene(const SceneSpec& spec, int image_index) {
  Scene scene;
  scene.instances = generate_instances(spec, image_index);
  scene.features = rasterize(scene.instances, spec.grid_height, spec.grid_width, spec.alphabet_size);
  return scene;
}

FeatureMap rasterize(const std::vector<TextInstance>& instances, int grid_height, int grid_width, int alphabet_size) {
  constexpr int kCurveSamples = 64;
  const int C = alphabet_size;
  FeatureMap fm;
  fm.height = grid_height;
  fm.width = grid_width;
  fm.cells = Eigen::MatrixXd::Zero(grid_height * grid_width, feature_channel_count(C));
  fm.centers.resize(grid_height * grid_width, 2);

  struct Sampled {
    Points center, top, bot;
    Bezier curve;
  };
  std::vector<Sampled> sampled;
  for (const auto& inst : instances) {
    const Bezier c = inst.center();
    sampled.push_back({sample_uniform(c, kCurveSamples), sample_uniform(inst.top, kCurveSamples),
                       sample_uniform(inst.bottom, kCurveSamples), c});
  }

  const double margin = 0.5 / std::max(grid_height, grid_width);
  for (int r = 0; r < grid_height; ++r) {
    for (int c = 0; c < grid_width; ++c) {
      const int cell = r * grid_width + c;
      const Eigen::RowVector2d pos((c + 0.5) / grid_width, (r + 0.5) / grid_height);
      fm.centers.row(cell) = pos;
      auto f = fm.cells.row(cell);
      f(C + 20) = pos(0);
      f(C + 21) = pos(1);

      double best = std::numeric_limits<double>::infinity();
      int best_inst = -1;
      int best_sample = 0;
      for (std::size_t i = 0; i < sampled.size(); ++i) {
        Eigen::Index k = 0;
        const double dist = (sampled[i].center.rowwise() - pos).rowwise().norm().minCoeff(&k);
        const double half = 0.5 * (sampled[i].top.row(k) - sampled[i].bot.row(k)).norm();
        const double excess = dist - half;
        if (excess <= margin && excess < best) {
          best = excess;
          best_inst = static_cast<int>(i);
          best_sample = static_cast<int>(k);
        }
      }
      if (best_inst < 0) continue;

      const TextInstance& inst = instances[best_inst];
      const Sampled& s = sampled[best_inst];
      const double along = static_cast<double>(best_sample) / (kCurveSamples - 1);
      const int len = static_cast<int>(inst.transcript.size());
      const int slot = std::min(len - 1, static_cast<int>(along * len));
      f(inst.transcript[slot]) = 1.0;
      f(C) = 1.0;
      const Point2<double> dir = tangent(s.curve, along);
      f(C + 1) = dir(0);
      f(C + 2) = dir(1);
      for (int i = 0; i < 4; ++i) {
        f(C + 3 + 2 * i) = s.curve.control(i, 0) - pos(0);
        f(C + 4 + 2 * i) = s.curve.control(i, 1) - pos(1);
        f(C + 11 + 2 * i) = inst.top.control(i, 0) - s.curve.control(i, 0);
        f(C + 12 + 2 * i) = inst.top.control(i, 1) - s.curve.control(i, 1);
      }
      f(C + 19) = along;
    }
  }
  return fm;
}

}  // namespace dnspot
