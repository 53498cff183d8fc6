#pragma once

// Independent reference implementations used only by the tests.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "dnspot/geometry.hpp"
#include "dnspot/random.hpp"

namespace oracle {

/// De Casteljau evaluation of a cubic Bezier.
inline Eigen::Vector2d de_casteljau(const dnspot::Bezier& curve, double t) {
  std::vector<Eigen::Vector2d> pts;
  for (int i = 0; i < 4; ++i) pts.push_back(curve.control.row(i).transpose());
  for (int level = 3; level > 0; --level) {
    for (int i = 0; i < level; ++i) pts[i] = (1.0 - t) * pts[i] + t * pts[i + 1];
  }
  return pts[0];
}

/// Least-squares cubic fit of T points sampled at t = k / (T - 1).
inline dnspot::ControlPoints<double> fit_cubic(const dnspot::Points& samples) {
  const int T = static_cast<int>(samples.rows());
  Eigen::MatrixXd A(T, 4);
  for (int k = 0; k < T; ++k) {
    const double t = static_cast<double>(k) / (T - 1);
    const double s = 1.0 - t;
    A.row(k) << s * s * s, 3 * s * s * t, 3 * s * t * t, t * t * t;
  }
  return A.colPivHouseholderQr().solve(samples);
}

/// Minimum total cost over all injective maps from columns (ground truth) to rows (predictions).
inline double brute_force_assignment(const Eigen::MatrixXd& cost) {
  const int N = static_cast<int>(cost.rows());
  const int M = static_cast<int>(cost.cols());
  std::vector<int> rows(N);
  std::iota(rows.begin(), rows.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Enumerate ordered selections of M distinct rows via permutations of all rows, using only the prefix.
  do {
    double total = 0.0;
    for (int m = 0; m < M; ++m) total += cost(rows[m], m);
    best = std::min(best, total);
    std::reverse(rows.begin() + M, rows.end());
  } while (std::next_permutation(rows.begin(), rows.end()));
  return best;
}

/// CTC likelihood by enumerating every path of length T over C+1 symbols (blank = C).
inline double ctc_enumerate(const Eigen::MatrixXd& logits, const std::vector<int>& target) {
  const int T = static_cast<int>(logits.rows());
  const int K = static_cast<int>(logits.cols());
  const int blank = K - 1;
  Eigen::MatrixXd prob(T, K);
  for (int t = 0; t < T; ++t) {
    const Eigen::RowVectorXd e = (logits.row(t).array() - logits.row(t).maxCoeff()).exp();
    prob.row(t) = e / e.sum();
  }
  std::vector<int> path(T, 0);
  double total = 0.0;
  while (true) {
    std::vector<int> collapsed;
    int prev = -1;
    for (int s : path) {
      if (s != prev && s != blank) collapsed.push_back(s);
      prev = s;
    }
    if (collapsed == target) {
      double p = 1.0;
      for (int t = 0; t < T; ++t) p *= prob(t, path[t]);
      total += p;
    }
    int i = 0;
    while (i < T && ++path[i] == K) path[i++] = 0;
    if (i == T) break;
  }
  return -std::log(total);
}

inline Eigen::MatrixXd random_matrix(dnspot::Rng& rng, int rows, int cols, double scale = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal(0.0, scale);
  return m;
}

/// Central finite differences of f at x, step h.
inline Eigen::MatrixXd numeric_gradient(const std::function<double(const Eigen::MatrixXd&)>& f, Eigen::MatrixXd x,
                                        double h = 1e-5) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x(i);
    x(i) = keep + h;
    const double up = f(x);
    x(i) = keep - h;
    const double down = f(x);
    x(i) = keep;
    g(i) = (up - down) / (2.0 * h);
  }
  return g;
}

/// max|a - b| / max|b|, with a tiny floor for all-zero gradients.
inline double relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(1e-6, numeric.cwiseAbs().maxCoeff());
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

}  // namespace oracle
