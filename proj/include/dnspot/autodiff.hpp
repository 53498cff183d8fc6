#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

#include "dnspot/random.hpp"

namespace dnspot::ad {

using Matrix = Eigen::MatrixXd;

/// A trainable tensor with its accumulated gradient and AdamW moments.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;
};

/// Owns parameters in registration order; order defines checkpoint layout.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  void zero_grad();
  double grad_norm() const;
  void scale_grad(double factor);
  std::size_t scalar_count() const;

 private:
  std::vector<Parameter> params_;
};

struct Var {
  int id = -1;
};

/// Reverse-mode tape. Nodes are appended in topological order; backward() walks them in reverse.
class Tape {
 public:
  Var constant(Matrix value);
  Var parameter(Parameter& p);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient accumulator of a node, allocated as zeros on first access.
  Matrix& grad(Var v);
  bool has_grad(Var v) const { return nodes_[v.id].grad.size() > 0; }

  /// Appends a computed node. `backward` reads grad(self) and accumulates into its inputs.
  Var push(Matrix value, std::function<void(Tape&, Var self)> backward);

  /// Propagates seeded gradients to all inputs and into Parameter::grad.
  void backward();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, Var)> back;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
};

// Differentiable operations. Shapes: rows are tokens/queries, columns are features.

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
/// a + broadcast of a 1 x d row vector.
Var add_row(Tape& t, Var a, Var row);
/// x * w + b, with b a 1 x d row.
Var linear(Tape& t, Var x, Var w, Var b);
Var linear(Tape& t, Var x, Var w);
Var relu(Tape& t, Var a);
Var scale(Tape& t, Var a, double factor);
/// Per-row layer normalisation with learned gain and bias (1 x d each).
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
/// Row gather from an embedding table.
Var embedding(Tape& t, Var table, const std::vector<int>& indices);
Var concat_rows(Tape& t, Var a, Var b);
Var slice_rows(Tape& t, Var a, Eigen::Index first, Eigen::Index count);
/// Mean over consecutive blocks of `block` rows: (n*block) x d -> n x d.
Var block_mean(Tape& t, Var x, int block);
/// Repeats each row `block` times: n x d -> (n*block) x d.
Var block_broadcast(Tape& t, Var x, int block);
/// Inverted dropout; identity when rate == 0.
Var dropout(Tape& t, Var x, double rate, Rng& rng);

/// Multi-head scaled dot-product attention. q: n x d, k, v: m x d. `bias` (n x m, may hold -inf)
/// is added to the logits before softmax; pass nullptr for none.
Var attention(Tape& t, Var q, Var k, Var v, int heads, const Matrix* bias);

/// Multi-head self-attention restricted to consecutive blocks of `block` rows, no mask.
Var block_attention(Tape& t, Var q, Var k, Var v, int heads, int block);

/// Row-softmax attention weights for one head: softmax(q k^T / sqrt(dk) + bias).
Matrix attention_weights(const Matrix& q, const Matrix& k, const Matrix* bias);

}  // namespace dnspot::ad
