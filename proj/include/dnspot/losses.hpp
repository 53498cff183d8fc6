#pragma once

#include <Eigen/Dense>

#include <span>
#include <vector>

#include "dnspot/assignment.hpp"
#include "dnspot/dn_queries.hpp"
#include "dnspot/geometry.hpp"

namespace dnspot {

struct LossWeights {
  double cls = 1.0;
  double coord = 1.0;
  double bd = 0.5;
  double text_pos = 0.5;
  double text_neg = 0.5;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const;
};

/// Decoder outputs for Q queries of T positions each. Per-position tensors are stacked
/// query-major: rows [q*T, (q+1)*T) belong to query q. Logit column C is background / CTC blank.
struct PredictionSet {
  int T = 0;
  Eigen::VectorXd instance_scores;  // Q, each in (0, 1)
  Eigen::MatrixXd char_logits;      // (Q*T) x (C+1)
  Points center_points;             // (Q*T) x 2
  Points boundary_top;              // (Q*T) x 2
  Points boundary_bot;              // (Q*T) x 2

  int query_count() const { return static_cast<int>(instance_scores.size()); }
  int class_count() const { return static_cast<int>(char_logits.cols()); }

  /// Same shapes, zero-filled. Used for gradients.
  static PredictionSet zeros_like(const PredictionSet& other);
  static PredictionSet zeros(int queries, int T, int classes);

  /// Copies queries [first, first + count).
  PredictionSet slice(int first, int count) const;
  /// Writes `part` into queries starting at `first`.
  void assign(int first, const PredictionSet& part);

  void check_shapes() const;
};

struct LossBreakdown {
  double cls = 0.0;
  double text_pos = 0.0;
  double text_neg = 0.0;
  double coord = 0.0;
  double bd = 0.0;

  double total() const { return cls + text_pos + text_neg + coord + bd; }
};

/// Loss value together with its gradient with respect to every prediction field.
struct LossResult {
  LossBreakdown terms;  // already weighted
  PredictionSet grad;   // d(total)/d(prediction); instance_scores entry is d/d(score)
  MatchAssignment assignment;
  double total() const { return terms.total(); }
};

// Scalar building blocks. Each *_grad overload also returns the derivative
// with respect to its prediction argument.

double focal_term(double score, bool positive, double alpha, double gamma, double* d_score = nullptr);

/// Sum over queries of the focal term; positive[q] selects the branch.
double focal_cls_loss(const Eigen::VectorXd& scores, const std::vector<bool>& positive, double alpha, double gamma);

/// CTC negative log-likelihood with blank = last class. logits: T x (C+1).
double ctc_text_loss(const Eigen::MatrixXd& logits, std::span<const int> target, Eigen::MatrixXd* d_logits = nullptr);

/// Mean over positions of cross-entropy against the background (last) class.
double ce_background_loss(const Eigen::MatrixXd& logits, Eigen::MatrixXd* d_logits = nullptr);

/// Sum over points of |dx| + |dy|.
double coord_l1_loss(const Points& pred, const Points& gt, Points* d_pred = nullptr);

double boundary_l1_loss(const Points& pred_top, const Points& pred_bot, const Points& gt_top, const Points& gt_bot,
                        Points* d_top = nullptr, Points* d_bot = nullptr);

/// Row-wise log-softmax.
Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& logits);

/// Denoising-part loss. Predictions must follow the batch layout: for each group,
/// n positive queries then n negative queries. `gt` is the capped instance list the batch was built from.
LossResult dn_loss(const PredictionSet& predictions, const DnQueryBatch& batch, std::span<const TextInstance> gt,
                   const LossWeights& w);

/// Matching-part loss: Hungarian assignment on the composite cost, then focal + CTC + L1 terms
/// for matched queries and the negative focal branch for the rest.
LossResult matching_loss(const PredictionSet& predictions, std::span<const TextInstance> gt, const LossWeights& w,
                         const MatchCost& match_cost = {});

}  // namespace dnspot
