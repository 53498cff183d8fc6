#pragma once

#include <Eigen/Dense>

#include <span>
#include <vector>

#include "dnspot/geometry.hpp"

namespace dnspot {

struct MatchCost {
  double weight_cls = 1.0;
  double weight_coord = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const;
};

/// W[n] = m when prediction n is matched to ground truth m, -1 when unmatched.
struct MatchAssignment {
  std::vector<int> W;

  int matched_count() const;
  bool operator==(const MatchAssignment&) const = default;
};

/// Minimum-cost one-to-one assignment of every ground truth (column) to a distinct
/// prediction (row). Requires rows >= cols. Ties resolve toward lower prediction index.
MatchAssignment hungarian_match(const Eigen::MatrixXd& cost);

/// Total cost of an assignment, accumulated in ground-truth order.
double assignment_cost(const Eigen::MatrixXd& cost, const MatchAssignment& assignment);

/// Focal-style classification matching cost of one instance score.
double focal_match_cost(double score, double alpha, double gamma);

/// Mean per-point L1 distance (|dx| + |dy|) between two equally long point sequences.
double mean_l1(const Points& a, const Points& b);

/// cost(n, m) = weight_cls * focal_match_cost(score_n) + weight_coord * mean_l1(points_n, center(gt_m) samples).
/// pred_points holds the T points of prediction n at rows [n*T, (n+1)*T).
Eigen::MatrixXd build_cost_matrix(const Eigen::VectorXd& pred_scores, const Points& pred_points,
                                  std::span<const TextInstance> gt, int T, const MatchCost& cfg);

/// Number of positions whose matched index changed between two snapshots.
int instability(const MatchAssignment& previous, const MatchAssignment& next);

}  // namespace dnspot
