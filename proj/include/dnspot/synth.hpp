#pragma once

#include <cstdint>
#include <vector>

#include "dnspot/decoder.hpp"
#include "dnspot/geometry.hpp"

namespace dnspot {

template <typename T>
struct Range {
  T lo;
  T hi;
};

struct SceneSpec {
  Range<int> instances_per_image{7, 7};
  int alphabet_size = 37;
  Range<int> transcript_len{2, 5};
  double inverse_fraction = 0.4;
  Range<double> curvature{0.0, 0.6};  ///< bend of the inner control points, as a fraction of the free band height
  Range<double> text_height{0.04, 0.07};
  Range<double> text_width{0.35, 0.6};
  double max_rotation = 0.25;         ///< radians
  int grid_height = 16;
  int grid_width = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Minimum top/bottom separation of generated instances (normalized units).
inline constexpr double kMinTextHeight = 0.01;

struct Scene {
  std::vector<TextInstance> instances;
  FeatureMap features;
};

/// Raw channel count of the rasterized feature stub for an alphabet of size C.
int feature_channel_count(int alphabet_size);

/// Deterministic scene for (spec, image_index).
Scene generate_scene(const SceneSpec& spec, int image_index);

/// Instances only (the feature stub is a pure function of them).
std::vector<TextInstance> generate_instances(const SceneSpec& spec, int image_index);

/// Rasterizes instances into a coarse grid: per-class character channels, occupancy,
/// reading direction, instance geometry relative to the cell and the cell position.
FeatureMap rasterize(const std::vector<TextInstance>& instances, int grid_height, int grid_width, int alphabet_size);

}  // namespace dnspot
