#include "doctest.h"

#include <set>

#include "dnspot/synth.hpp"

using namespace dnspot;

TEST_CASE("scenes are a pure function of spec and index") {
  SceneSpec spec;
  spec.seed = 3;
  const auto a = generate_instances(spec, 5);
  const auto b = generate_instances(spec, 5);
  const auto c = generate_instances(spec, 6);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].top.control == b[i].top.control);
    CHECK(a[i].transcript == b[i].transcript);
  }
  CHECK(a[0].top.control != c[0].top.control);
  spec.seed = 4;
  CHECK(generate_instances(spec, 5)[0].top.control != a[0].top.control);

  const Scene scene = generate_scene(SceneSpec{}, 2);
  const FeatureMap fm = rasterize(scene.instances, 16, 16, 37);
  CHECK(scene.features.cells == fm.cells);
}

TEST_CASE("generated instances respect the spec") {
  SceneSpec spec;
  spec.instances_per_image = {3, 9};
  spec.transcript_len = {1, 6};
  std::set<int> counts;
  for (int image = 0; image < 60; ++image) {
    const auto insts = generate_instances(spec, image);
    counts.insert(static_cast<int>(insts.size()));
    CHECK(insts.size() >= 3);
    CHECK(insts.size() <= 9);
    std::set<InstanceId> ids;
    for (const auto& inst : insts) {
      CHECK_NOTHROW(inst.validate(spec.alphabet_size));
      CHECK(ids.insert(inst.id).second);
      CHECK(inst.transcript.size() >= 1);
      CHECK(inst.transcript.size() <= 6);
      for (int i = 0; i < 4; ++i) {
        CHECK((inst.top.control.row(i) - inst.bottom.control.row(i)).norm() >= kMinTextHeight - 1e-12);
      }
      for (const Points& pts : {sample_uniform(inst.top, 16), sample_uniform(inst.bottom, 16)}) {
        CHECK(pts.minCoeff() >= 0.0);
        CHECK(pts.maxCoeff() <= 1.0);
      }
    }
  }
  CHECK(counts.size() > 3);
}

TEST_CASE("inverse fraction controls reading direction") {
  SceneSpec spec;
  spec.inverse_fraction = 0.0;
  for (int image = 0; image < 10; ++image) {
    for (const auto& inst : generate_instances(spec, image)) CHECK(inst.top.control(3, 0) > inst.top.control(0, 0));
  }
  spec.inverse_fraction = 1.0;
  for (int image = 0; image < 10; ++image) {
    for (const auto& inst : generate_instances(spec, image)) CHECK(inst.top.control(3, 0) < inst.top.control(0, 0));
  }
  spec.inverse_fraction = 0.4;
  int inverse = 0, total = 0;
  for (int image = 0; image < 100; ++image) {
    for (const auto& inst : generate_instances(spec, image)) {
      inverse += inst.top.control(3, 0) < inst.top.control(0, 0);
      ++total;
    }
  }
  CHECK(static_cast<double>(inverse) / total == doctest::Approx(0.4).epsilon(0.15));
}

TEST_CASE("rasterized feature stub") {
  const int C = 37;
  CHECK(feature_channel_count(C) == C + 22);
  const FeatureMap empty = rasterize({}, 4, 6, C);
  CHECK(empty.height == 4);
  CHECK(empty.width == 6);
  REQUIRE(empty.cells.rows() == 24);
  CHECK(empty.channels() == C + 22);
  CHECK(empty.cells.leftCols(C + 20).isZero());
  CHECK(empty.centers(0, 0) == doctest::Approx(1.0 / 12));
  CHECK(empty.centers(23, 1) == doctest::Approx(7.0 / 8));
  CHECK(empty.cells.col(C + 20) == empty.centers.col(0));

  const Scene scene = generate_scene(SceneSpec{}, 0);
  const auto& cells = scene.features.cells;
  int occupied = 0;
  for (Eigen::Index r = 0; r < cells.rows(); ++r) {
    const double chars = cells.row(r).leftCols(C).sum();
    if (cells(r, C) == 1.0) {
      ++occupied;
      CHECK(chars == 1.0);
      CHECK(cells.row(r).segment(C + 1, 2).norm() == doctest::Approx(1.0));
    } else {
      CHECK(chars == 0.0);
    }
  }
  CHECK(occupied > 0);
  CHECK(occupied < cells.rows());
}

TEST_CASE("scene spec validation") {
  SceneSpec spec;
  CHECK_NOTHROW(spec.validate());
  SceneSpec bad = spec;
  bad.instances_per_image = {0, 3};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.transcript_len = {4, 2};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.inverse_fraction = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.text_height = {0.001, 0.05};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.text_width = {0.3, 1.2};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.grid_width = 1;
  CHECK_THROWS_AS(generate_scene(bad, 0), std::invalid_argument);
}
