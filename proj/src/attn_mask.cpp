#include "dnspot/attn_mask.hpp"

#include <limits>
#include <stdexcept>

namespace dnspot {

Eigen::MatrixXd AttentionMask::additive() const {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  return blocked.select(Eigen::MatrixXd::Constant(size, size, neg_inf), Eigen::MatrixXd::Zero(size, size));
}

AttentionMask build_mask(int g, int n, int K) {
  if (g < 1 || n < 1 || K < 0) throw std::invalid_argument("build_mask: need g >= 1, n >= 1, K >= 0");
  const int width = 2 * n;
  const int dn = g * width;
  AttentionMask mask;
  mask.size = dn + K;
  mask.blocked = BoolMatrix::Constant(mask.size, mask.size, false);
  for (int i = 0; i < mask.size; ++i) {
    for (int j = 0; j < dn; ++j) {
      mask.blocked(i, j) = i >= dn || (i / width) != (j / width);
    }
  }
  return mask;
}

AttentionMask unmasked(int K) {
  AttentionMask mask;
  mask.size = K;
  mask.blocked = BoolMatrix::Constant(K, K, false);
  return mask;
}

}  // namespace dnspot
