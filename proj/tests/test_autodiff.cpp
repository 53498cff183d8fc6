#include "doctest.h"

#include <cmath>
#include <limits>

#include "dnspot/autodiff.hpp"
#include "oracles.hpp"

using namespace dnspot;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Checks d(sum(W .* f(inputs)))/d(inputs) against central differences; returns the worst relative error.
double gradient_error(const Builder& f, const std::vector<Matrix>& inputs, Rng& rng) {
  ad::ParameterStore store;
  for (std::size_t i = 0; i < inputs.size(); ++i) store.add("x" + std::to_string(i), inputs[i]);

  auto forward = [&](Tape& tape) {
    std::vector<Var> vars;
    for (auto& p : store.all()) vars.push_back(tape.parameter(p));
    return f(tape, vars);
  };
  Matrix weights;
  {
    Tape tape;
    const Var out = forward(tape);
    weights = oracle::random_matrix(rng, tape.value(out).rows(), tape.value(out).cols());
    tape.grad(out) = weights;
    tape.backward();
  }
  double worst = 0.0;
  for (auto& p : store.all()) {
    const Matrix analytic = p.grad;
    const Matrix keep = p.value;
    const Matrix numeric = oracle::numeric_gradient(
        [&](const Matrix& x) {
          p.value = x;
          Tape tape;
          return weights.cwiseProduct(tape.value(forward(tape))).sum();
        },
        keep);
    p.value = keep;
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
  }
  return worst;
}

}  // namespace

TEST_CASE("tape ops match finite differences") {
  Rng rng(31);
  auto m = [&](int r, int c) { return oracle::random_matrix(rng, r, c); };
  const double tol = 1e-6;

  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::matmul(t, v[0], v[1]); },
                       {m(3, 4), m(4, 2)}, rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::add(t, v[0], v[1]); },
                       {m(3, 4), m(3, 4)}, rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::add_row(t, v[0], v[1]); },
                       {m(5, 3), m(1, 3)}, rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::linear(t, v[0], v[1], v[2]); },
                       {m(4, 3), m(3, 5), m(1, 5)}, rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::relu(t, v[0]); }, {m(6, 5)}, rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::scale(t, v[0], -2.5); }, {m(2, 3)}, rng) <
        tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::layer_norm(t, v[0], v[1], v[2]); },
                       {m(4, 6), m(1, 6), m(1, 6)}, rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::embedding(t, v[0], {2, 0, 2, 3}); },
                       {m(4, 3)}, rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::concat_rows(t, v[0], v[1]); },
                       {m(2, 3), m(4, 3)}, rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::slice_rows(t, v[0], 1, 3); }, {m(5, 2)},
                       rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::block_mean(t, v[0], 3); }, {m(6, 4)},
                       rng) < tol);
  CHECK(gradient_error([](Tape& t, const std::vector<Var>& v) { return ad::block_broadcast(t, v[0], 3); }, {m(2, 4)},
                       rng) < tol);
}

TEST_CASE("attention gradients") {
  Rng rng(32);
  auto m = [&](int r, int c) { return oracle::random_matrix(rng, r, c); };
  Matrix bias = m(4, 5);
  bias(0, 1) = bias(2, 4) = bias(3, 0) = -std::numeric_limits<double>::infinity();
  for (int heads : {1, 2, 4}) {
    CHECK(gradient_error([&](Tape& t, const std::vector<Var>& v) { return ad::attention(t, v[0], v[1], v[2], heads, &bias); },
                         {m(4, 8), m(5, 8), m(5, 8)}, rng) < 1e-6);
    CHECK(gradient_error(
              [&](Tape& t, const std::vector<Var>& v) { return ad::attention(t, v[0], v[1], v[2], heads, nullptr); },
              {m(3, 8), m(3, 8), m(3, 8)}, rng) < 1e-6);
    CHECK(gradient_error(
              [&](Tape& t, const std::vector<Var>& v) { return ad::block_attention(t, v[0], v[1], v[2], heads, 3); },
              {m(6, 8), m(6, 8), m(6, 8)}, rng) < 1e-6);
  }
}

TEST_CASE("dropout gradient uses the forward mask") {
  Rng rng(33);
  const Matrix x = oracle::random_matrix(rng, 5, 6);
  const Rng seed_state = rng;
  CHECK(gradient_error(
            [&](Tape& t, const std::vector<Var>& v) {
              Rng r = seed_state;
              return ad::dropout(t, v[0], 0.3, r);
            },
            {x}, rng) < 1e-6);
  Tape t;
  Rng r(1);
  const Var id = ad::dropout(t, t.constant(x), 0.0, r);
  CHECK(t.value(id) == x);
}

TEST_CASE("attention weights are convex combinations") {
  Rng rng(34);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix q = oracle::random_matrix(rng, 4, 3, 2.0);
    const Matrix k = oracle::random_matrix(rng, 6, 3, 2.0);
    Matrix bias = Matrix::Zero(4, 6);
    for (int i = 0; i < 4; ++i) bias(i, rng.uniform_int(0, 5)) = -std::numeric_limits<double>::infinity();
    const Matrix w = ad::attention_weights(q, k, &bias);
    for (int i = 0; i < 4; ++i) {
      CHECK(w.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(w.row(i).minCoeff() >= 0.0);
      for (int j = 0; j < 6; ++j) {
        if (std::isinf(bias(i, j))) CHECK(w(i, j) == 0.0);
      }
    }
    // Outputs stay inside the per-column range of the values.
    Tape t;
    const Matrix v = oracle::random_matrix(rng, 6, 3);
    const Var out = ad::attention(t, t.constant(q), t.constant(k), t.constant(v), 1, &bias);
    for (int c = 0; c < 3; ++c) {
      CHECK(t.value(out).col(c).maxCoeff() <= v.col(c).maxCoeff() + 1e-12);
      CHECK(t.value(out).col(c).minCoeff() >= v.col(c).minCoeff() - 1e-12);
    }
  }
}

TEST_CASE("parameter store") {
  ad::ParameterStore s;
  s.add("a", Matrix::Ones(2, 2));
  s.add("b", Matrix::Ones(1, 3));
  CHECK_THROWS_AS(s.add("a", Matrix::Ones(1, 1)), std::invalid_argument);
  CHECK(s.scalar_count() == 7);
  s.get("a").grad.setConstant(2.0);
  CHECK(s.grad_norm() == doctest::Approx(4.0));
  s.scale_grad(0.5);
  CHECK(s.grad_norm() == doctest::Approx(2.0));
  s.zero_grad();
  CHECK(s.grad_norm() == 0.0);
}
