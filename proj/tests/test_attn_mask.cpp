#include "doctest.h"

#include <cmath>

#include "dnspot/attn_mask.hpp"

using namespace dnspot;

namespace {

bool predicate(int i, int j, int g, int n) {
  const int dn = g * 2 * n;
  return (j < dn && i / (2 * n) != j / (2 * n)) || (j < dn && i >= dn);
}

}  // namespace

TEST_CASE("build_mask example g=2 n=1 K=2") {
  const AttentionMask m = build_mask(2, 1, 2);
  REQUIRE(m.size == 6);
  for (int i = 4; i < 6; ++i) {
    for (int j = 0; j < 4; ++j) CHECK(m.blocked(i, j));
    for (int j = 4; j < 6; ++j) CHECK_FALSE(m.blocked(i, j));
  }
  // Group 0 = queries 0-1, group 1 = queries 2-3.
  CHECK_FALSE(m.blocked(0, 1));
  CHECK(m.blocked(0, 2));
  CHECK(m.blocked(3, 1));
  CHECK_FALSE(m.blocked(3, 2));
}

TEST_CASE("build_mask matches the predicate and its invariants") {
  for (int g = 1; g <= 5; ++g) {
    for (int n = 1; n <= 6; ++n) {
      for (int K : {0, 1, 4, 16}) {
        const AttentionMask m = build_mask(g, n, K);
        const int dn = g * 2 * n;
        REQUIRE(m.size == dn + K);
        REQUIRE(m.blocked.rows() == m.size);
        REQUIRE(m.blocked.cols() == m.size);
        for (int i = 0; i < m.size; ++i) {
          CHECK_FALSE(m.blocked(i, i));
          for (int j = 0; j < m.size; ++j) {
            CHECK(m.blocked(i, j) == predicate(i, j, g, n));
            if (i >= dn && j < dn) CHECK(m.blocked(i, j));            // leakage freedom
            if (j >= dn) CHECK_FALSE(m.blocked(i, j));                 // matching columns open
            if (i < dn && j < dn) CHECK(m.blocked(i, j) == (i / (2 * n) != j / (2 * n)));  // group isolation
          }
        }
      }
    }
  }
}

TEST_CASE("mask additive form and errors") {
  const AttentionMask m = build_mask(2, 2, 3);
  const Eigen::MatrixXd a = m.additive();
  for (int i = 0; i < m.size; ++i) {
    for (int j = 0; j < m.size; ++j) {
      if (m.blocked(i, j)) {
        CHECK(std::isinf(a(i, j)));
        CHECK(a(i, j) < 0);
      } else {
        CHECK(a(i, j) == 0.0);
      }
    }
  }
  CHECK(unmasked(4).blocked.count() == 0);
  CHECK(build_mask(1, 1, 0).size == 2);
  CHECK_THROWS_AS(build_mask(0, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_mask(1, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_mask(1, 1, -1), std::invalid_argument);
}
