#include "doctest.h"

#include "dnspot/decoder.hpp"
#include "dnspot/synth.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dnspot;

namespace {

constexpr int kAlphabet = 4;

DecoderConfig small_config(int T = 4) {
  DecoderConfig cfg;
  cfg.layers = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.T = T;
  cfg.alphabet_size = kAlphabet;
  cfg.ffn_dim = 12;
  cfg.num_queries = 3;
  cfg.feature_channels = feature_channel_count(kAlphabet);
  return cfg;
}

struct Setup {
  std::vector<TextInstance> instances;
  FeatureMap features;
  DnQueryBatch batch;
};

Setup make_setup(std::uint64_t seed, int count, int T) {
  Rng rng(seed);
  Setup s;
  s.instances = fixture::random_instances(rng, count, kAlphabet, T);
  s.features = rasterize(s.instances, 4, 4, kAlphabet);
  NoiseConfig noise;
  noise.T = T;
  s.batch = build_dn_batch(s.instances, noise, rng, kAlphabet);
  return s;
}

/// Randomizes every parameter so that no head is trivially zero.
void scramble(Decoder& model, Rng& rng, double scale = 0.3) {
  for (auto& p : model.params().all()) p.value = oracle::random_matrix(rng, p.value.rows(), p.value.cols(), scale);
}

double max_diff(const PredictionSet& a, const PredictionSet& b) {
  double d = (a.instance_scores - b.instance_scores).cwiseAbs().maxCoeff();
  d = std::max(d, (a.char_logits - b.char_logits).cwiseAbs().maxCoeff());
  d = std::max(d, (a.center_points - b.center_points).cwiseAbs().maxCoeff());
  d = std::max(d, (a.boundary_top - b.boundary_top).cwiseAbs().maxCoeff());
  return std::max(d, (a.boundary_bot - b.boundary_bot).cwiseAbs().maxCoeff());
}

}  // namespace

TEST_CASE("positional encoding") {
  Points pts(2, 2);
  pts << 0.0, 0.0, 0.3, 0.7;
  const Eigen::MatrixXd pe = positional_encoding(pts, 8);
  REQUIRE(pe.rows() == 2);
  REQUIRE(pe.cols() == 8);
  for (int axis = 0; axis < 2; ++axis) {
    CHECK(pe(0, axis * 4) == 0.0);
    CHECK(pe(0, axis * 4 + 1) == 1.0);
  }
  CHECK(pe(1, 0) == doctest::Approx(std::sin(2.0 * std::numbers::pi * 0.3)));
  CHECK(pe(1, 5) == doctest::Approx(std::cos(2.0 * std::numbers::pi * 0.7)));
}

TEST_CASE("decoder config validation") {
  DecoderConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  DecoderConfig bad = cfg;
  bad.dim = 10;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.T = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.refined_sigma = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("forward pass shapes and layout") {
  const Setup s = make_setup(41, 3, 4);
  Decoder model(small_config(), 5);
  const ForwardPass pass = run_forward(model, s.features, &s.batch);
  const int dn = s.batch.g * 2 * s.batch.n;
  CHECK(pass.dn_queries == dn);
  CHECK(pass.matching_queries == 3);
  CHECK(pass.layer_heads.size() == 2);
  REQUIRE(pass.layer_predictions.size() == 2);
  for (const auto& p : pass.layer_predictions) {
    CHECK(p.query_count() == dn + 3);
    CHECK(p.class_count() == kAlphabet + 1);
    CHECK_NOTHROW(p.check_shapes());
  }
  CHECK(max_diff(pass.predictions, pass.layer_predictions.back()) == 0.0);

  FeatureMap wrong = s.features;
  wrong.cells.conservativeResize(Eigen::NoChange, wrong.cells.cols() - 1);
  CHECK_THROWS_AS(run_forward(model, wrong, nullptr), std::invalid_argument);
}

TEST_CASE("fresh heads reproduce the reference points") {
  const Setup s = make_setup(42, 2, 4);
  Decoder model(small_config(), 6);
  const ForwardPass pass = run_forward(model, s.features, &s.batch);
  ad::Tape tape;
  const QueryInputs dn = model.denoising_inputs(tape, s.batch);
  const Points anchors = model.anchor_points();
  for (const auto& p : pass.layer_predictions) {
    CHECK((p.center_points.topRows(dn.reference.rows()) - dn.reference).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((p.center_points.bottomRows(anchors.rows()) - anchors).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(p.boundary_top == p.center_points);
    CHECK((p.instance_scores.array() - 0.1).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("matching part cannot see the denoising part") {
  for (bool refine : {false, true}) {
    const Setup s = make_setup(43, 4, 4);
    DecoderConfig cfg = small_config();
    cfg.refine = refine;
    Decoder model(cfg, 7);
    Rng rng(8);
    scramble(model, rng);
    const ForwardPass with_dn = run_forward(model, s.features, &s.batch);
    const ForwardPass without = run_forward(model, s.features, nullptr);
    for (std::size_t l = 0; l < with_dn.layer_predictions.size(); ++l) {
      const PredictionSet a = with_dn.layer_predictions[l].slice(with_dn.dn_queries, 3);
      CHECK(max_diff(a, without.layer_predictions[l]) < 1e-12);
    }
  }
}

TEST_CASE("denoising groups are independent") {
  Setup s = make_setup(44, 3, 4);
  REQUIRE(s.batch.g >= 2);
  Decoder model(small_config(), 9);
  Rng rng(10);
  scramble(model, rng);
  const ForwardPass base = run_forward(model, s.features, &s.batch);

  DnQueryBatch changed = s.batch;
  for (auto& chars : changed.groups[1].positive_chars) std::reverse(chars.begin(), chars.end());
  for (auto& pts : changed.groups[1].negative_points) pts.array() += 0.05;
  const ForwardPass other = run_forward(model, s.features, &changed);

  const int per_group = 2 * s.batch.n;
  const PredictionSet& a = base.predictions;
  const PredictionSet& b = other.predictions;
  for (int g = 0; g < s.batch.g; ++g) {
    const double d = max_diff(a.slice(g * per_group, per_group), b.slice(g * per_group, per_group));
    if (g == 1) {
      CHECK(d > 1e-6);
    } else {
      CHECK(d < 1e-12);
    }
  }
  CHECK(max_diff(a.slice(base.dn_queries, 3), b.slice(other.dn_queries, 3)) < 1e-12);
}

TEST_CASE("decoder gradients match finite differences") {
  const Setup s = make_setup(45, 2, 3);
  DecoderConfig cfg = small_config(3);
  cfg.refine = false;
  Decoder model(cfg, 11);
  Rng rng(12);
  scramble(model, rng);

  const ForwardPass shape = run_forward(model, s.features, &s.batch);
  PredictionSet weights = PredictionSet::zeros_like(shape.predictions);
  weights.instance_scores = oracle::random_matrix(rng, weights.instance_scores.size(), 1);
  weights.char_logits = oracle::random_matrix(rng, weights.char_logits.rows(), weights.char_logits.cols());
  weights.center_points = oracle::random_matrix(rng, weights.center_points.rows(), 2);
  weights.boundary_top = oracle::random_matrix(rng, weights.boundary_top.rows(), 2);
  weights.boundary_bot = oracle::random_matrix(rng, weights.boundary_bot.rows(), 2);

  auto objective = [&]() {
    const ForwardPass pass = run_forward(model, s.features, &s.batch);
    double total = 0.0;
    for (const auto& p : pass.layer_predictions) {
      total += weights.instance_scores.dot(p.instance_scores) + weights.char_logits.cwiseProduct(p.char_logits).sum() +
               weights.center_points.cwiseProduct(p.center_points).sum() +
               weights.boundary_top.cwiseProduct(p.boundary_top).sum() +
               weights.boundary_bot.cwiseProduct(p.boundary_bot).sum();
    }
    return total;
  };

  model.params().zero_grad();
  ForwardPass pass = run_forward(model, s.features, &s.batch);
  for (const auto& h : pass.layer_heads) seed_gradients(pass.tape, h, weights);
  pass.tape.backward();

  for (const char* name : {"content.embed", "match.content", "feat.w", "pos.w2", "layer0.intra.wq", "layer0.inter.wv",
                           "layer1.cross.wk", "layer1.ffn.w1", "layer0.cross.ln.g", "head.char.w", "head.score.w",
                           "head.top.w"}) {
    auto& p = model.params().get(name);
    const Eigen::MatrixXd keep = p.value;
    const Eigen::MatrixXd numeric = oracle::numeric_gradient(
        [&](const Eigen::MatrixXd& x) {
          p.value = x;
          return objective();
        },
        keep, 1e-6);
    p.value = keep;
    INFO(name);
    CHECK(oracle::relative_error(p.grad, numeric) < 1e-5);
  }
}

TEST_CASE("refinement feeds detached centers to later layers") {
  const Setup s = make_setup(46, 2, 4);
  DecoderConfig cfg = small_config();
  Decoder refined(cfg, 13);
  cfg.refine = false;
  Decoder plain(cfg, 13);
  Rng a(14), b(14);
  scramble(refined, a);
  scramble(plain, b);
  const ForwardPass r = run_forward(refined, s.features, nullptr);
  const ForwardPass p = run_forward(plain, s.features, nullptr);
  CHECK(max_diff(r.layer_predictions[0], p.layer_predictions[0]) < 1e-12);
  CHECK(max_diff(r.layer_predictions[1], p.layer_predictions[1]) > 1e-6);

  // Layer 1 outputs carry no gradient back to the anchors.
  refined.params().zero_grad();
  ForwardPass again = run_forward(refined, s.features, nullptr);
  PredictionSet grad = PredictionSet::zeros_like(again.predictions);
  grad.center_points.setOnes();
  backpropagate(again.tape, again.layer_heads[1], grad);
  CHECK(refined.params().get("match.anchors").grad.isZero());
}

TEST_CASE("dropout changes outputs only when a generator is given") {
  const Setup s = make_setup(47, 2, 4);
  DecoderConfig cfg = small_config();
  cfg.dropout = 0.5;
  Decoder model(cfg, 15);
  Rng rng(16);
  scramble(model, rng);
  const ForwardPass a = run_forward(model, s.features, nullptr);
  const ForwardPass b = run_forward(model, s.features, nullptr);
  CHECK(max_diff(a.predictions, b.predictions) == 0.0);
  Rng drop(17);
  const ForwardPass c = run_forward(model, s.features, nullptr, &drop);
  CHECK(max_diff(a.predictions, c.predictions) > 1e-6);
}

TEST_CASE("decoder construction is seeded") {
  Decoder a(small_config(), 3), b(small_config(), 3), c(small_config(), 4);
  CHECK(a.params().get("layer0.cross.wq").value == b.params().get("layer0.cross.wq").value);
  CHECK(a.params().get("layer0.cross.wq").value != c.params().get("layer0.cross.wq").value);
}
