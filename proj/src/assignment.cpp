#include "dnspot/assignment.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace dnspot {

void MatchCost::validate() const {
  if (weight_cls < 0.0 || weight_coord < 0.0) throw std::invalid_argument("match cost weights must be non-negative");
  if (weight_cls == 0.0 && weight_coord == 0.0) throw std::invalid_argument("match cost weights cannot both be zero");
}

int MatchAssignment::matched_count() const {
  int count = 0;
  for (int w : W) count += w >= 0 ? 1 : 0;
  return count;
}

MatchAssignment hungarian_match(const Eigen::MatrixXd& cost) {
  const int num_pred = static_cast<int>(cost.rows());
  const int num_gt = static_cast<int>(cost.cols());
  if (!cost.allFinite()) throw std::invalid_argument("hungarian_match: cost matrix has non-finite entries");
  if (num_pred < num_gt) throw std::invalid_argument("hungarian_match: fewer predictions than ground truths");

  MatchAssignment result;
  result.W.assign(num_pred, -1);
  if (num_gt == 0) return result;

  // Shortest augmenting path with potentials; ground truths are the rows being assigned,
  // predictions are the columns. Index 0 is a sentinel, so arrays are 1-based.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(num_gt + 1, 0.0), v(num_pred + 1, 0.0);
  std::vector<int> owner(num_pred + 1, 0), way(num_pred + 1, 0);
  for (int row = 1; row <= num_gt; ++row) {
    owner[0] = row;
    int col0 = 0;
    std::vector<double> minv(num_pred + 1, inf);
    std::vector<char> used(num_pred + 1, 0);
    do {
      used[col0] = 1;
      const int row0 = owner[col0];
      double delta = inf;
      int col1 = 0;
      for (int col = 1; col <= num_pred; ++col) {
        if (used[col]) continue;
        const double reduced = cost(col - 1, row0 - 1) - u[row0] - v[col];
        if (reduced < minv[col]) {
          minv[col] = reduced;
          way[col] = col0;
        }
        if (minv[col] < delta) {
          delta = minv[col];
          col1 = col;
        }
      }
      for (int col = 0; col <= num_pred; ++col) {
        if (used[col]) {
          u[owner[col]] += delta;
          v[col] -= delta;
        } else {
          minv[col] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const int col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  for (int col = 1; col <= num_pred; ++col) {
    if (owner[col] != 0) result.W[col - 1] = owner[col] - 1;
  }
  return result;
}

double assignment_cost(const Eigen::MatrixXd& cost, const MatchAssignment& assignment) {
  std::vector<int> pred_of(cost.cols(), -1);
  for (int n = 0; n < static_cast<int>(assignment.W.size()); ++n) {
    if (assignment.W[n] >= 0) pred_of[assignment.W[n]] = n;
  }
  double total = 0.0;
  for (int m = 0; m < static_cast<int>(pred_of.size()); ++m) {
    if (pred_of[m] >= 0) total += cost(pred_of[m], m);
  }
  return total;
}

double focal_match_cost(double score, double alpha, double gamma) {
  constexpr double eps = 1e-8;
  const double pos = alpha * std::pow(1.0 - score, gamma) * -std::log(score + eps);
  const double neg = (1.0 - alpha) * std::pow(score, gamma) * -std::log(1.0 - score + eps);
  return pos - neg;
}

double mean_l1(const Points& a, const Points& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("mean_l1: point sequences differ in length");
  if (a.rows() == 0) return 0.0;
  return (a - b).cwiseAbs().sum() / static_cast<double>(a.rows());
}

Eigen::MatrixXd build_cost_matrix(const Eigen::VectorXd& pred_scores, const Points& pred_points,
                                  std::span<const TextInstance> gt, int T, const MatchCost& cfg) {
  cfg.validate();
  const int num_pred = static_cast<int>(pred_scores.size());
  if (pred_points.rows() != static_cast<Eigen::Index>(num_pred) * T) {
    throw std::invalid_argument("build_cost_matrix: expected " + std::to_string(num_pred * T) + " points, got " +
                                std::to_string(pred_points.rows()));
  }
  std::vector<Points> gt_points;
  gt_points.reserve(gt.size());
  for (const auto& inst : gt) gt_points.push_back(sample_uniform(inst.center(), T));

  Eigen::MatrixXd cost(num_pred, static_cast<Eigen::Index>(gt.size()));
  for (int n = 0; n < num_pred; ++n) {
    const double cls = cfg.weight_cls * focal_match_cost(pred_scores(n), cfg.focal_alpha, cfg.focal_gamma);
    const Points pts = pred_points.middleRows(static_cast<Eigen::Index>(n) * T, T);
    for (int m = 0; m < static_cast<int>(gt.size()); ++m) {
      cost(n, m) = cls + cfg.weight_coord * mean_l1(pts, gt_points[m]);
    }
  }
  return cost;
}

int instability(const MatchAssignment& previous, const MatchAssignment& next) {
  if (previous.W.size() != next.W.size()) throw std::invalid_argument("instability: assignment lengths differ");
  int changed = 0;
  for (std::size_t n = 0; n < previous.W.size(); ++n) changed += previous.W[n] != next.W[n] ? 1 : 0;
  return changed;
}

}  // namespace dnspot
