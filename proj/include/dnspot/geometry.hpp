#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dnspot {

template <typename Scalar>
using Point2 = Eigen::Matrix<Scalar, 2, 1>;

/// Ordered point sequence, one point per row.
template <typename Scalar>
using PointSeq = Eigen::Matrix<Scalar, Eigen::Dynamic, 2>;

/// Four control points of a cubic Bezier, one per row (P0..P3 in reading order).
template <typename Scalar>
using ControlPoints = Eigen::Matrix<Scalar, 4, 2>;

template <typename Scalar>
struct BezierCurve {
  ControlPoints<Scalar> control = ControlPoints<Scalar>::Zero();

  BezierCurve() = default;
  explicit BezierCurve(const ControlPoints<Scalar>& c) : control(c) {}

  Point2<Scalar> point(int i) const { return control.row(i).transpose(); }

  bool operator==(const BezierCurve& other) const { return control == other.control; }
};

using Bezier = BezierCurve<double>;
using Points = PointSeq<double>;

using InstanceId = std::int64_t;

/// Ground-truth text instance. Transcript entries index an alphabet of size C;
/// index C is the reserved background class and never appears here.
struct TextInstance {
  Bezier top;
  Bezier bottom;
  std::vector<int> transcript;
  InstanceId id = 0;

  Bezier center() const;
  void validate(int alphabet_size) const;
};

template <typename Scalar>
BezierCurve<Scalar> center_curve(const BezierCurve<Scalar>& top, const BezierCurve<Scalar>& bottom) {
  return BezierCurve<Scalar>((top.control + bottom.control) * Scalar(0.5));
}

inline Bezier TextInstance::center() const { return center_curve(top, bottom); }

inline void TextInstance::validate(int alphabet_size) const {
  if (!top.control.allFinite() || !bottom.control.allFinite()) {
    throw std::invalid_argument("text instance " + std::to_string(id) + " has non-finite control points");
  }
  if (transcript.empty()) {
    throw std::invalid_argument("text instance " + std::to_string(id) + " has an empty transcript");
  }
  for (int c : transcript) {
    if (c < 0 || c >= alphabet_size) {
      throw std::invalid_argument("text instance " + std::to_string(id) + " has character index " +
                                  std::to_string(c) + " outside [0, " + std::to_string(alphabet_size) + ")");
    }
  }
}

/// Cubic Bernstein weights at parameter t.
template <typename Scalar>
Eigen::Matrix<Scalar, 1, 4> bernstein(Scalar t) {
  const Scalar s = Scalar(1) - t;
  Eigen::Matrix<Scalar, 1, 4> w;
  w << s * s * s, Scalar(3) * s * s * t, Scalar(3) * s * t * t, t * t * t;
  return w;
}

template <typename Scalar>
Point2<Scalar> eval_bezier(const BezierCurve<Scalar>& curve, Scalar t) {
  if (!(t >= Scalar(0) && t <= Scalar(1))) {
    throw std::domain_error("eval_bezier: parameter t must lie in [0, 1]");
  }
  return (bernstein(t) * curve.control).transpose();
}

/// T x 4 matrix whose row k holds the Bernstein weights at t = k / (T - 1).
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 4> bernstein_matrix(int T) {
  if (T < 2) throw std::invalid_argument("bernstein_matrix: need at least 2 samples");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 4> b(T, 4);
  for (int k = 0; k < T; ++k) {
    b.row(k) = bernstein(Scalar(k) / Scalar(T - 1));
  }
  return b;
}

/// Samples the curve uniformly in parameter space (not arc length).
template <typename Scalar>
PointSeq<Scalar> sample_uniform(const BezierCurve<Scalar>& curve, int T) {
  if (T < 2) throw std::invalid_argument("sample_uniform: T must be at least 2");
  return bernstein_matrix<Scalar>(T) * curve.control;
}

/// Per-axis absolute distance between corresponding control points; row i is (D_x, D_y).
template <typename Scalar>
ControlPoints<Scalar> control_point_distances(const BezierCurve<Scalar>& center, const BezierCurve<Scalar>& top) {
  return (top.control - center.control).cwiseAbs();
}

/// Unit tangent of the curve at t (falls back to +x for a degenerate curve).
template <typename Scalar>
Point2<Scalar> tangent(const BezierCurve<Scalar>& curve, Scalar t) {
  const Scalar s = Scalar(1) - t;
  Eigen::Matrix<Scalar, 1, 4> dw;
  dw << Scalar(-3) * s * s, Scalar(3) * s * s - Scalar(6) * s * t, Scalar(6) * s * t - Scalar(3) * t * t,
      Scalar(3) * t * t;
  Point2<Scalar> d = (dw * curve.control).transpose();
  const Scalar n = d.norm();
  if (n <= Scalar(0)) return Point2<Scalar>(Scalar(1), Scalar(0));
  return d / n;
}

}  // namespace dnspot
