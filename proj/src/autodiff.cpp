#include "dnspot/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace dnspot::ad {

Parameter& ParameterStore::add(const std::string& name, Matrix init) {
  for (const auto& p : params_) {
    if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  Parameter p;
  p.name = name;
  p.grad = Matrix::Zero(init.rows(), init.cols());
  p.adam_m = Matrix::Zero(init.rows(), init.cols());
  p.adam_v = Matrix::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

const Parameter& ParameterStore::get(const std::string& name) const {
  return const_cast<ParameterStore*>(this)->get(name);
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

double ParameterStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : params_) sq += p.grad.squaredNorm();
  return std::sqrt(sq);
}

void ParameterStore::scale_grad(double factor) {
  for (auto& p : params_) p.grad *= factor;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, nullptr});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Parameter& p) {
  nodes_.push_back(Node{p.value, Matrix(), nullptr, &p});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::push(Matrix value, std::function<void(Tape&, Var)> backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward), nullptr});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward() {
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.back) n.back(*this, Var{i});
    if (n.param) n.param->grad += n.grad;
  }
}

Var matmul(Tape& t, Var a, Var b) {
  Matrix out = t.value(a) * t.value(b);
  return t.push(std::move(out), [a, b](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    t.grad(a).noalias() += g * t.value(b).transpose();
    t.grad(b).noalias() += t.value(a).transpose() * g;
  });
}

Var add(Tape& t, Var a, Var b) {
  if (t.value(a).rows() != t.value(b).rows() || t.value(a).cols() != t.value(b).cols()) {
    throw std::invalid_argument("ad::add: shape mismatch");
  }
  Matrix out = t.value(a) + t.value(b);
  return t.push(std::move(out), [a, b](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    t.grad(a) += g;
    t.grad(b) += g;
  });
}

Var add_row(Tape& t, Var a, Var row) {
  Matrix out = t.value(a).rowwise() + t.value(row).row(0);
  return t.push(std::move(out), [a, row](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    t.grad(a) += g;
    t.grad(row) += g.colwise().sum();
  });
}

Var linear(Tape& t, Var x, Var w, Var b) { return add_row(t, matmul(t, x, w), b); }

Var linear(Tape& t, Var x, Var w) { return matmul(t, x, w); }

Var relu(Tape& t, Var a) {
  Matrix out = t.value(a).cwiseMax(0.0);
  return t.push(std::move(out), [a](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    t.grad(a) += (t.value(a).array() > 0.0).select(g, 0.0);
  });
}

Var scale(Tape& t, Var a, double factor) {
  Matrix out = t.value(a) * factor;
  return t.push(std::move(out), [a, factor](Tape& t, Var self) { t.grad(a) += t.grad(self) * factor; });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = t.value(x);
  const Eigen::Index d = xv.cols();
  auto xhat = std::make_shared<Matrix>(xv.rows(), d);
  auto inv_std = std::make_shared<Eigen::VectorXd>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    (*inv_std)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (xv.row(r).array() - mean) * (*inv_std)(r);
  }
  Matrix out = (xhat->array().rowwise() * t.value(gain).row(0).array()).rowwise() + t.value(bias).row(0).array();
  return t.push(std::move(out), [x, gain, bias, xhat, inv_std](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    t.grad(gain) += (g.array() * xhat->array()).colwise().sum().matrix();
    t.grad(bias) += g.colwise().sum();
    const Matrix dxhat = g.array().rowwise() * t.value(gain).row(0).array();
    const double d = static_cast<double>(g.cols());
    Matrix& gx = t.grad(x);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double mean_d = dxhat.row(r).mean();
      const double mean_dx = (dxhat.row(r).array() * xhat->row(r).array()).sum() / d;
      gx.row(r).array() += (*inv_std)(r) * (dxhat.row(r).array() - mean_d - xhat->row(r).array() * mean_dx);
    }
  });
}

Var embedding(Tape& t, Var table, const std::vector<int>& indices) {
  const Matrix& tv = t.value(table);
  Matrix out(static_cast<Eigen::Index>(indices.size()), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= tv.rows()) throw std::out_of_range("ad::embedding: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(indices[i]);
  }
  return t.push(std::move(out), [table, indices](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    Matrix& gt = t.grad(table);
    for (std::size_t i = 0; i < indices.size(); ++i) gt.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var concat_rows(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.cols()) throw std::invalid_argument("ad::concat_rows: column mismatch");
  Matrix out(av.rows() + bv.rows(), av.cols());
  out.topRows(av.rows()) = av;
  out.bottomRows(bv.rows()) = bv;
  const Eigen::Index split = av.rows();
  return t.push(std::move(out), [a, b, split](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    t.grad(a) += g.topRows(split);
    t.grad(b) += g.bottomRows(g.rows() - split);
  });
}

Var slice_rows(Tape& t, Var a, Eigen::Index first, Eigen::Index count) {
  Matrix out = t.value(a).middleRows(first, count);
  return t.push(std::move(out), [a, first, count](Tape& t, Var self) {
    t.grad(a).middleRows(first, count) += t.grad(self);
  });
}

Var block_mean(Tape& t, Var x, int block) {
  const Matrix& xv = t.value(x);
  if (block < 1 || xv.rows() % block != 0) throw std::invalid_argument("ad::block_mean: rows not divisible by block");
  const Eigen::Index n = xv.rows() / block;
  Matrix out(n, xv.cols());
  for (Eigen::Index i = 0; i < n; ++i) out.row(i) = xv.middleRows(i * block, block).colwise().mean();
  return t.push(std::move(out), [x, block](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(x);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      gx.middleRows(i * block, block).rowwise() += g.row(i) / static_cast<double>(block);
    }
  });
}

Var block_broadcast(Tape& t, Var x, int block) {
  const Matrix& xv = t.value(x);
  Matrix out(xv.rows() * block, xv.cols());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) out.middleRows(i * block, block).rowwise() = xv.row(i);
  return t.push(std::move(out), [x, block](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(x);
    for (Eigen::Index i = 0; i < gx.rows(); ++i) gx.row(i) += g.middleRows(i * block, block).colwise().sum();
  });
}

Var dropout(Tape& t, Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  const Matrix& xv = t.value(x);
  auto keep = std::make_shared<Matrix>(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < keep->size(); ++i) (*keep)(i) = rng.bernoulli(rate) ? 0.0 : 1.0 / (1.0 - rate);
  Matrix out = xv.cwiseProduct(*keep);
  return t.push(std::move(out), [x, keep](Tape& t, Var self) { t.grad(x) += t.grad(self).cwiseProduct(*keep); });
}

Matrix attention_weights(const Matrix& q, const Matrix& k, const Matrix* bias) {
  Matrix logits = (q * k.transpose()) / std::sqrt(static_cast<double>(q.cols()));
  if (bias) logits += *bias;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double hi = logits.row(r).maxCoeff();
    if (!std::isfinite(hi)) throw std::domain_error("attention: a query row has no attendable key");
    logits.row(r) = (logits.row(r).array() - hi).exp();
    logits.row(r) /= logits.row(r).sum();
  }
  return logits;
}

namespace {

struct HeadCache {
  std::vector<Matrix> probs;
};

/// Forward for one (row block of) attention across heads; fills out and caches probabilities.
void attend(const Matrix& q, const Matrix& k, const Matrix& v, int heads, const Matrix* bias, Eigen::Ref<Matrix> out,
            std::vector<Matrix>& probs) {
  const Eigen::Index dh = q.cols() / heads;
  for (int h = 0; h < heads; ++h) {
    Matrix p = attention_weights(q.middleCols(h * dh, dh), k.middleCols(h * dh, dh), bias);
    out.middleCols(h * dh, dh).noalias() = p * v.middleCols(h * dh, dh);
    probs.push_back(std::move(p));
  }
}

void attend_backward(const Matrix& g, const Matrix& q, const Matrix& k, const Matrix& v, int heads,
                     const Matrix* probs, Eigen::Ref<Matrix> gq, Eigen::Ref<Matrix> gk, Eigen::Ref<Matrix> gv) {
  const Eigen::Index dh = q.cols() / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const Matrix& p = probs[h];
    const auto gh = g.middleCols(h * dh, dh);
    gv.middleCols(h * dh, dh).noalias() += p.transpose() * gh;
    Matrix dp = gh * v.middleCols(h * dh, dh).transpose();
    const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
    Matrix ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix();
    gq.middleCols(h * dh, dh).noalias() += s * ds * k.middleCols(h * dh, dh);
    gk.middleCols(h * dh, dh).noalias() += s * ds.transpose() * q.middleCols(h * dh, dh);
  }
}

void check_heads(const Matrix& q, const Matrix& k, const Matrix& v, int heads) {
  if (heads < 1 || q.cols() % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
  if (q.cols() != k.cols() || k.rows() != v.rows() || v.cols() != q.cols()) {
    throw std::invalid_argument("attention: q/k/v shape mismatch");
  }
}

}  // namespace

Var attention(Tape& t, Var q, Var k, Var v, int heads, const Matrix* bias) {
  const Matrix& qv = t.value(q);
  const Matrix& kv = t.value(k);
  const Matrix& vv = t.value(v);
  check_heads(qv, kv, vv, heads);
  if (bias && (bias->rows() != qv.rows() || bias->cols() != kv.rows())) {
    throw std::invalid_argument("attention: bias shape mismatch");
  }
  auto cache = std::make_shared<HeadCache>();
  Matrix out(qv.rows(), vv.cols());
  attend(qv, kv, vv, heads, bias, out, cache->probs);
  return t.push(std::move(out), [q, k, v, heads, cache](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    attend_backward(g, t.value(q), t.value(k), t.value(v), heads, cache->probs.data(), t.grad(q), t.grad(k),
                    t.grad(v));
  });
}

Var block_attention(Tape& t, Var q, Var k, Var v, int heads, int block) {
  const Matrix& qv = t.value(q);
  const Matrix& kv = t.value(k);
  const Matrix& vv = t.value(v);
  check_heads(qv, kv, vv, heads);
  if (qv.rows() != kv.rows() || block < 1 || qv.rows() % block != 0) {
    throw std::invalid_argument("block_attention: rows must be equal and divisible by block");
  }
  const Eigen::Index blocks = qv.rows() / block;
  auto cache = std::make_shared<HeadCache>();
  cache->probs.reserve(static_cast<std::size_t>(blocks * heads));
  Matrix out(qv.rows(), vv.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) {
    const Eigen::Index r0 = b * block;
    attend(qv.middleRows(r0, block), kv.middleRows(r0, block), vv.middleRows(r0, block), heads, nullptr,
           out.middleRows(r0, block), cache->probs);
  }
  return t.push(std::move(out), [q, k, v, heads, block, cache](Tape& t, Var self) {
    const Matrix& g = t.grad(self);
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    Matrix& gq = t.grad(q);
    Matrix& gk = t.grad(k);
    Matrix& gv = t.grad(v);
    for (Eigen::Index b = 0; b < g.rows() / block; ++b) {
      const Eigen::Index r0 = b * block;
      attend_backward(g.middleRows(r0, block), qv.middleRows(r0, block), kv.middleRows(r0, block),
                      vv.middleRows(r0, block), heads, cache->probs.data() + b * heads, gq.middleRows(r0, block),
                      gk.middleRows(r0, block), gv.middleRows(r0, block));
    }
  });
}

}  // namespace dnspot::ad
