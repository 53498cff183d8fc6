#include "dnspot/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace dnspot {

namespace {

constexpr double kLogFloor = -69.07755278982137;  // log(1e-30)
const double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

int background_class(const Eigen::MatrixXd& logits) { return static_cast<int>(logits.cols()) - 1; }

}  // namespace

void LossWeights::validate() const {
  for (double v : {cls, coord, bd, text_pos, text_neg, focal_alpha, focal_gamma}) {
    if (!(v >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
  }
}

PredictionSet PredictionSet::zeros(int queries, int T, int classes) {
  PredictionSet p;
  p.T = T;
  const Eigen::Index rows = static_cast<Eigen::Index>(queries) * T;
  p.instance_scores = Eigen::VectorXd::Zero(queries);
  p.char_logits = Eigen::MatrixXd::Zero(rows, classes);
  p.center_points = Points::Zero(rows, 2);
  p.boundary_top = Points::Zero(rows, 2);
  p.boundary_bot = Points::Zero(rows, 2);
  return p;
}

PredictionSet PredictionSet::zeros_like(const PredictionSet& other) {
  return zeros(other.query_count(), other.T, other.class_count());
}

PredictionSet PredictionSet::slice(int first, int count) const {
  PredictionSet p;
  p.T = T;
  const Eigen::Index row0 = static_cast<Eigen::Index>(first) * T;
  const Eigen::Index rows = static_cast<Eigen::Index>(count) * T;
  p.instance_scores = instance_scores.segment(first, count);
  p.char_logits = char_logits.middleRows(row0, rows);
  p.center_points = center_points.middleRows(row0, rows);
  p.boundary_top = boundary_top.middleRows(row0, rows);
  p.boundary_bot = boundary_bot.middleRows(row0, rows);
  return p;
}

void PredictionSet::assign(int first, const PredictionSet& part) {
  const int count = part.query_count();
  const Eigen::Index row0 = static_cast<Eigen::Index>(first) * T;
  const Eigen::Index rows = static_cast<Eigen::Index>(count) * T;
  instance_scores.segment(first, count) = part.instance_scores;
  char_logits.middleRows(row0, rows) = part.char_logits;
  center_points.middleRows(row0, rows) = part.center_points;
  boundary_top.middleRows(row0, rows) = part.boundary_top;
  boundary_bot.middleRows(row0, rows) = part.boundary_bot;
}

void PredictionSet::check_shapes() const {
  const Eigen::Index rows = static_cast<Eigen::Index>(query_count()) * T;
  if (char_logits.rows() != rows || center_points.rows() != rows || boundary_top.rows() != rows ||
      boundary_bot.rows() != rows) {
    throw std::invalid_argument("prediction set: per-position tensors do not match query count x T");
  }
  if (char_logits.cols() < 2) throw std::invalid_argument("prediction set: need at least one character class");
}

double focal_term(double score, bool positive, double alpha, double gamma, double* d_score) {
  if (!(score > 0.0 && score < 1.0)) {
    throw std::domain_error("focal loss: score " + std::to_string(score) + " outside (0, 1)");
  }
  if (positive) {
    const double q = 1.0 - score;
    const double mod = std::pow(q, gamma);
    if (d_score) {
      const double dmod = gamma == 0.0 ? 0.0 : -gamma * std::pow(q, gamma - 1.0);
      *d_score = -alpha * (dmod * std::log(score) + mod / score);
    }
    return -alpha * mod * std::log(score);
  }
  const double mod = std::pow(score, gamma);
  if (d_score) {
    const double dmod = gamma == 0.0 ? 0.0 : gamma * std::pow(score, gamma - 1.0);
    *d_score = -(1.0 - alpha) * (dmod * std::log1p(-score) - mod / (1.0 - score));
  }
  return -(1.0 - alpha) * mod * std::log1p(-score);
}

double focal_cls_loss(const Eigen::VectorXd& scores, const std::vector<bool>& positive, double alpha, double gamma) {
  if (static_cast<std::size_t>(scores.size()) != positive.size()) {
    throw std::invalid_argument("focal_cls_loss: scores and flags differ in length");
  }
  double total = 0.0;
  for (Eigen::Index q = 0; q < scores.size(); ++q) total += focal_term(scores(q), positive[q], alpha, gamma);
  return total;
}

Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double hi = logits.row(r).maxCoeff();
    const double lse = hi + std::log((logits.row(r).array() - hi).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

double ctc_text_loss(const Eigen::MatrixXd& logits, std::span<const int> target, Eigen::MatrixXd* d_logits) {
  const int steps = static_cast<int>(logits.rows());
  const int blank = background_class(logits);
  const int len = static_cast<int>(target.size());
  int repeats = 0;
  for (int i = 0; i < len; ++i) {
    if (target[i] < 0 || target[i] >= blank) {
      throw std::invalid_argument("ctc_text_loss: target contains blank or out-of-range symbol");
    }
    if (i > 0 && target[i] == target[i - 1]) ++repeats;
  }
  if (len + repeats > steps) {
    throw std::invalid_argument("ctc_text_loss: target of length " + std::to_string(len) +
                                " cannot be aligned to " + std::to_string(steps) + " steps");
  }

  const Eigen::MatrixXd logp = log_softmax_rows(logits).cwiseMax(kLogFloor);
  const int S = 2 * len + 1;
  auto label = [&](int s) { return (s % 2 == 0) ? blank : target[s / 2]; };
  auto can_skip = [&](int s) { return s % 2 == 1 && s >= 2 && target[s / 2] != target[s / 2 - 1]; };

  Eigen::MatrixXd alpha = Eigen::MatrixXd::Constant(steps, S, kNegInf);
  alpha(0, 0) = logp(0, blank);
  if (S > 1) alpha(0, 1) = logp(0, label(1));
  for (int t = 1; t < steps; ++t) {
    for (int s = 0; s < S; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (can_skip(s)) a = log_add(a, alpha(t - 1, s - 2));
      if (a != kNegInf) alpha(t, s) = a + logp(t, label(s));
    }
  }
  double log_p = alpha(steps - 1, S - 1);
  if (S > 1) log_p = log_add(log_p, alpha(steps - 1, S - 2));
  if (!std::isfinite(log_p)) throw std::runtime_error("ctc_text_loss: no valid alignment");

  if (d_logits) {
    // beta(t, s): log-probability of emitting the remaining suffix after step t, given state s at t.
    Eigen::MatrixXd beta = Eigen::MatrixXd::Constant(steps, S, kNegInf);
    beta(steps - 1, S - 1) = 0.0;
    if (S > 1) beta(steps - 1, S - 2) = 0.0;
    for (int t = steps - 2; t >= 0; --t) {
      for (int s = 0; s < S; ++s) {
        double b = beta(t + 1, s) + logp(t + 1, label(s));
        if (s + 1 < S) b = log_add(b, beta(t + 1, s + 1) + logp(t + 1, label(s + 1)));
        if (s + 2 < S && can_skip(s + 2)) b = log_add(b, beta(t + 1, s + 2) + logp(t + 1, label(s + 2)));
        beta(t, s) = b;
      }
    }
    Eigen::MatrixXd grad = logp.array().exp().matrix();
    for (int t = 0; t < steps; ++t) {
      for (int s = 0; s < S; ++s) {
        const double occ = alpha(t, s) + beta(t, s);
        if (occ != kNegInf) grad(t, label(s)) -= std::exp(occ - log_p);
      }
    }
    *d_logits = std::move(grad);
  }
  return -log_p;
}

double ce_background_loss(const Eigen::MatrixXd& logits, Eigen::MatrixXd* d_logits) {
  const int bg = background_class(logits);
  const Eigen::MatrixXd logp = log_softmax_rows(logits);
  const double steps = static_cast<double>(logits.rows());
  if (d_logits) {
    Eigen::MatrixXd grad = logp.array().exp().matrix();
    grad.col(bg).array() -= 1.0;
    *d_logits = grad / steps;
  }
  return -logp.col(bg).sum() / steps;
}

double coord_l1_loss(const Points& pred, const Points& gt, Points* d_pred) {
  if (pred.rows() != gt.rows()) throw std::invalid_argument("coord_l1_loss: point sequences differ in length");
  const Points diff = pred - gt;
  if (d_pred) *d_pred = diff.unaryExpr([](double v) { return double((v > 0.0) - (v < 0.0)); });
  return diff.cwiseAbs().sum();
}

double boundary_l1_loss(const Points& pred_top, const Points& pred_bot, const Points& gt_top, const Points& gt_bot,
                        Points* d_top, Points* d_bot) {
  return coord_l1_loss(pred_top, gt_top, d_top) + coord_l1_loss(pred_bot, gt_bot, d_bot);
}

namespace {

struct GtSamples {
  Points center, top, bot;
};

GtSamples sample_gt(const TextInstance& inst, int T) {
  return {sample_uniform(inst.center(), T), sample_uniform(inst.top, T), sample_uniform(inst.bottom, T)};
}

/// Accumulates the positive-query terms (cls, CTC, coord, boundary) for query q against one instance.
void add_positive_query(const PredictionSet& pred, int q, const TextInstance& inst, const GtSamples& gt,
                        const LossWeights& w, double norm, LossResult& out) {
  const int T = pred.T;
  const Eigen::Index row0 = static_cast<Eigen::Index>(q) * T;
  double d_score = 0.0;
  out.terms.cls += w.cls * focal_term(pred.instance_scores(q), true, w.focal_alpha, w.focal_gamma, &d_score) / norm;
  out.grad.instance_scores(q) += w.cls * d_score / norm;

  Eigen::MatrixXd d_logits;
  const auto transcript = std::span<const int>(inst.transcript).first(
      std::min<std::size_t>(inst.transcript.size(), static_cast<std::size_t>(T)));
  out.terms.text_pos += w.text_pos * ctc_text_loss(pred.char_logits.middleRows(row0, T), transcript, &d_logits) / norm;
  out.grad.char_logits.middleRows(row0, T) += w.text_pos * d_logits / norm;

  Points d_center, d_top, d_bot;
  out.terms.coord += w.coord * coord_l1_loss(pred.center_points.middleRows(row0, T), gt.center, &d_center) / norm;
  out.grad.center_points.middleRows(row0, T) += w.coord * d_center / norm;

  out.terms.bd += w.bd *
                  boundary_l1_loss(pred.boundary_top.middleRows(row0, T), pred.boundary_bot.middleRows(row0, T),
                                   gt.top, gt.bot, &d_top, &d_bot) /
                  norm;
  out.grad.boundary_top.middleRows(row0, T) += w.bd * d_top / norm;
  out.grad.boundary_bot.middleRows(row0, T) += w.bd * d_bot / norm;
}

void add_negative_focal(const PredictionSet& pred, int q, const LossWeights& w, double norm, LossResult& out) {
  double d_score = 0.0;
  out.terms.cls += w.cls * focal_term(pred.instance_scores(q), false, w.focal_alpha, w.focal_gamma, &d_score) / norm;
  out.grad.instance_scores(q) += w.cls * d_score / norm;
}

}  // namespace

LossResult dn_loss(const PredictionSet& predictions, const DnQueryBatch& batch, std::span<const TextInstance> gt,
                   const LossWeights& w) {
  w.validate();
  predictions.check_shapes();
  const int n = batch.n;
  if (predictions.query_count() != batch.query_count() || predictions.T != batch.T) {
    throw std::invalid_argument("dn_loss: predictions hold " + std::to_string(predictions.query_count()) +
                                " queries, batch layout needs " + std::to_string(batch.query_count()));
  }
  if (static_cast<int>(gt.size()) < n) throw std::invalid_argument("dn_loss: fewer instances than batch rows");

  std::vector<GtSamples> samples;
  samples.reserve(n);
  for (int i = 0; i < n; ++i) samples.push_back(sample_gt(gt[i], batch.T));

  LossResult out;
  out.grad = PredictionSet::zeros_like(predictions);
  const double norm = std::max(1, batch.g * n);
  const int T = batch.T;
  for (int gi = 0; gi < batch.g; ++gi) {
    const DnGroup& group = batch.groups[gi];
    if (static_cast<int>(group.source_ids.size()) != n) throw std::invalid_argument("dn_loss: malformed group");
    for (int i = 0; i < n; ++i) {
      if (group.source_ids[i] != gt[i].id) {
        throw std::invalid_argument("dn_loss: group " + std::to_string(gi) + " row " + std::to_string(i) +
                                    " does not refer to instance " + std::to_string(gt[i].id));
      }
      const int pos_q = gi * 2 * n + i;
      const int neg_q = pos_q + n;
      add_positive_query(predictions, pos_q, gt[i], samples[i], w, norm, out);

      add_negative_focal(predictions, neg_q, w, norm, out);
      const Eigen::Index row0 = static_cast<Eigen::Index>(neg_q) * T;
      Eigen::MatrixXd d_logits;
      out.terms.text_neg += w.text_neg * ce_background_loss(predictions.char_logits.middleRows(row0, T), &d_logits) / norm;
      out.grad.char_logits.middleRows(row0, T) += w.text_neg * d_logits / norm;
    }
  }
  return out;
}

LossResult matching_loss(const PredictionSet& predictions, std::span<const TextInstance> gt, const LossWeights& w,
                         const MatchCost& match_cost) {
  w.validate();
  predictions.check_shapes();
  const int T = predictions.T;
  const Eigen::MatrixXd cost =
      build_cost_matrix(predictions.instance_scores, predictions.center_points, gt, T, match_cost);

  LossResult out;
  out.grad = PredictionSet::zeros_like(predictions);
  out.assignment = hungarian_match(cost);
  const double norm = std::max<double>(1.0, static_cast<double>(gt.size()));
  for (int q = 0; q < predictions.query_count(); ++q) {
    const int m = out.assignment.W[q];
    if (m < 0) {
      add_negative_focal(predictions, q, w, norm, out);
    } else {
      add_positive_query(predictions, q, gt[m], sample_gt(gt[m], T), w, norm, out);
    }
  }
  return out;
}

}  // namespace dnspot
