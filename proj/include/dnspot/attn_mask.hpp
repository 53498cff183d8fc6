#pragma once

#include <Eigen/Dense>

namespace dnspot {

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Inter-instance self-attention mask. blocked(i, j) == true means query i may not attend to query j.
/// Query order: [group 0 | ... | group g-1 | matching part], each group 2n wide (positive n, negative n).
struct AttentionMask {
  int size = 0;
  BoolMatrix blocked;

  /// Additive logit bias: -inf where blocked, 0 elsewhere.
  Eigen::MatrixXd additive() const;
};

AttentionMask build_mask(int g, int n, int K);

/// Mask for a matching-only query set (no denoising part): nothing blocked.
AttentionMask unmasked(int K);

}  // namespace dnspot
