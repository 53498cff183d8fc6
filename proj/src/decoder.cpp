#include "dnspot/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dnspot {

using ad::Matrix;
using ad::Tape;
using ad::Var;

void DecoderConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("decoder.layers must be at least 1");
  if (dim < 4 || dim % 4 != 0) throw std::invalid_argument("decoder.dim must be a positive multiple of 4");
  if (heads < 1 || dim % heads != 0) throw std::invalid_argument("decoder.dim must be divisible by decoder.heads");
  if (T < 2) throw std::invalid_argument("decoder.T must be at least 2");
  if (alphabet_size < 1) throw std::invalid_argument("decoder.alphabet_size must be positive");
  if (ffn_dim < 1) throw std::invalid_argument("decoder.ffn_dim must be positive");
  if (num_queries < 1) throw std::invalid_argument("decoder.num_queries must be positive");
  if (feature_channels < 1) throw std::invalid_argument("decoder.feature_channels must be positive");
  if (!(cross_sigma > 0.0)) throw std::invalid_argument("decoder.cross_sigma must be positive");
  if (!(refined_sigma > 0.0)) throw std::invalid_argument("decoder.refined_sigma must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("decoder.dropout must lie in [0, 1)");
}

Eigen::MatrixXd positional_encoding(const Points& points, int dim) {
  const int per_axis = dim / 2;
  const int freqs = per_axis / 2;
  Eigen::MatrixXd pe(points.rows(), dim);
  for (int axis = 0; axis < 2; ++axis) {
    for (int f = 0; f < freqs; ++f) {
      const double rate = 2.0 * std::numbers::pi / std::pow(10000.0, 2.0 * f / per_axis);
      const Eigen::ArrayXd angle = points.col(axis).array() * rate;
      pe.col(axis * per_axis + 2 * f) = angle.sin().matrix();
      pe.col(axis * per_axis + 2 * f + 1) = angle.cos().matrix();
    }
  }
  return pe;
}

namespace {

Matrix glorot(Rng& rng, int rows, int cols) {
  const double std = std::sqrt(2.0 / (rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal(0.0, std);
  return m;
}

Matrix row(int cols, double value = 0.0) { return Matrix::Constant(1, cols, value); }

void check_finite(const Tape& tape, Var x, int layer) {
  if (!tape.value(x).allFinite()) {
    throw std::runtime_error("decoder layer " + std::to_string(layer) + " produced non-finite activations");
  }
}

}  // namespace

Decoder::Decoder(const DecoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  init(seed);
}

void Decoder::init(std::uint64_t seed) {
  Rng rng = Rng::derive(seed, {0x696e6974});
  const int d = cfg_.dim;
  const int classes = cfg_.alphabet_size + 1;
  const int K = cfg_.num_queries;

  params_.add("pos.w1", glorot(rng, d, d));
  params_.add("pos.b1", row(d));
  params_.add("pos.w2", glorot(rng, d, d));
  params_.add("pos.b2", row(d));
  params_.add("content.embed", glorot(rng, classes, d));
  params_.add("match.content", glorot(rng, cfg_.T, d));
  params_.add("match.query", glorot(rng, K, d));

  // Anchor curves: straight horizontal segments spread over a two-column grid.
  Matrix anchors(4 * K, 2);
  const int rows = (K + 1) / 2;
  for (int q = 0; q < K; ++q) {
    const double cx = (q % 2 == 0) ? 0.28 : 0.72;
    const double cy = (q / 2 + 0.5) / rows;
    for (int i = 0; i < 4; ++i) {
      anchors(4 * q + i, 0) = cx - 0.2 + 0.4 * i / 3.0;
      anchors(4 * q + i, 1) = cy;
    }
  }
  params_.add("match.anchors", anchors);

  params_.add("feat.w", glorot(rng, cfg_.feature_channels, d));
  params_.add("feat.b", row(d));

  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (const char* block : {"intra", "inter", "cross"}) {
      const std::string b = pre + block + ".";
      params_.add(b + "ln.g", row(d, 1.0));
      params_.add(b + "ln.b", row(d));
      params_.add(b + "wq", glorot(rng, d, d));
      params_.add(b + "wk", glorot(rng, d, d));
      params_.add(b + "wv", glorot(rng, d, d));
      params_.add(b + "wo", glorot(rng, d, d));
      params_.add(b + "bo", row(d));
    }
    params_.add(pre + "ffn.ln.g", row(d, 1.0));
    params_.add(pre + "ffn.ln.b", row(d));
    params_.add(pre + "ffn.w1", glorot(rng, d, cfg_.ffn_dim));
    params_.add(pre + "ffn.b1", row(cfg_.ffn_dim));
    params_.add(pre + "ffn.w2", glorot(rng, cfg_.ffn_dim, d));
    params_.add(pre + "ffn.b2", row(d));
  }

  params_.add("head.ln.g", row(d, 1.0));
  params_.add("head.ln.b", row(d));
  params_.add("head.char.w", glorot(rng, d, classes) * 0.1);
  params_.add("head.char.b", row(classes));
  params_.add("head.score.w", Matrix::Zero(d, 1));
  params_.add("head.score.b", row(1, -std::log((1.0 - 0.1) / 0.1)));
  for (const char* h : {"center", "top", "bot"}) {
    params_.add(std::string("head.") + h + ".w", Matrix::Zero(d, 2));
    params_.add(std::string("head.") + h + ".b", row(2));
  }
}

Var Decoder::embed_positional(Tape& tape, const Points& points) {
  Var pe = tape.constant(positional_encoding(points, cfg_.dim));
  Var h = ad::relu(tape, ad::linear(tape, pe, p(tape, "pos.w1"), p(tape, "pos.b1")));
  return ad::linear(tape, h, p(tape, "pos.w2"), p(tape, "pos.b2"));
}

Var Decoder::embed_content(Tape& tape, const std::vector<int>& chars) {
  return ad::embedding(tape, p(tape, "content.embed"), chars);
}

Points Decoder::anchor_points() const {
  const int K = cfg_.num_queries;
  const int T = cfg_.T;
  const auto bern = bernstein_matrix<double>(T);
  const Matrix& anchors = params_.get("match.anchors").value;
  Points out(K * T, 2);
  for (int q = 0; q < K; ++q) out.middleRows(q * T, T) = bern * anchors.middleRows(4 * q, 4);
  return out;
}

QueryInputs Decoder::matching_inputs(Tape& tape) {
  const int K = cfg_.num_queries;
  const int T = cfg_.T;
  const auto bern = bernstein_matrix<double>(T);
  Matrix sampler = Matrix::Zero(K * T, 4 * K);
  Matrix tiler(K * T, T);
  for (int q = 0; q < K; ++q) {
    sampler.block(q * T, 4 * q, T, 4) = bern;
    tiler.middleRows(q * T, T) = Matrix::Identity(T, T);
  }
  QueryInputs in;
  in.queries = K;
  in.reference_var = ad::matmul(tape, tape.constant(std::move(sampler)), p(tape, "match.anchors"));
  in.reference = tape.value(in.reference_var);
  in.positional = embed_positional(tape, in.reference);
  Var per_position = ad::matmul(tape, tape.constant(std::move(tiler)), p(tape, "match.content"));
  in.content = ad::add(tape, per_position, ad::block_broadcast(tape, p(tape, "match.query"), T));
  return in;
}

QueryInputs Decoder::denoising_inputs(Tape& tape, const DnQueryBatch& batch) {
  const int T = cfg_.T;
  if (batch.T != T) throw std::invalid_argument("denoising batch T differs from decoder T");
  QueryInputs in;
  in.queries = batch.query_count();
  in.reference.resize(static_cast<Eigen::Index>(in.queries) * T, 2);
  std::vector<int> chars;
  chars.reserve(static_cast<std::size_t>(in.queries) * T);
  int q = 0;
  for (const auto& group : batch.groups) {
    for (int part = 0; part < 2; ++part) {
      const auto& pts = part == 0 ? group.positive_points : group.negative_points;
      const auto& cs = part == 0 ? group.positive_chars : group.negative_chars;
      for (int i = 0; i < batch.n; ++i, ++q) {
        in.reference.middleRows(static_cast<Eigen::Index>(q) * T, T) = pts[i];
        chars.insert(chars.end(), cs[i].begin(), cs[i].end());
      }
    }
  }
  in.reference_var = tape.constant(in.reference);
  in.positional = embed_positional(tape, in.reference);
  in.content = embed_content(tape, chars);
  return in;
}

QueryInputs Decoder::combine(Tape& tape, const QueryInputs& first, const QueryInputs& second) {
  QueryInputs in;
  in.queries = first.queries + second.queries;
  in.reference.resize(first.reference.rows() + second.reference.rows(), 2);
  in.reference << first.reference, second.reference;
  in.reference_var = ad::concat_rows(tape, first.reference_var, second.reference_var);
  in.positional = ad::concat_rows(tape, first.positional, second.positional);
  in.content = ad::concat_rows(tape, first.content, second.content);
  return in;
}

Var Decoder::encode_features(Tape& tape, const FeatureMap& features) {
  if (features.channels() != cfg_.feature_channels) {
    throw std::invalid_argument("feature map has " + std::to_string(features.channels()) +
                                " channels, decoder expects " + std::to_string(cfg_.feature_channels));
  }
  return ad::linear(tape, tape.constant(features.cells), p(tape, "feat.w"), p(tape, "feat.b"));
}

namespace {

Matrix gaussian_prior(const Points& reference, const Points& cells, double sigma) {
  const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
  return -inv_two_var * ((reference.rowwise().squaredNorm() * Eigen::RowVectorXd::Ones(cells.rows())) +
                         (Eigen::VectorXd::Ones(reference.rows()) * cells.rowwise().squaredNorm().transpose()) -
                         2.0 * reference * cells.transpose());
}

}  // namespace

HeadVars Decoder::heads(Tape& tape, Var x, Var reference) {
  const int T = cfg_.T;
  Var h = ad::layer_norm(tape, x, p(tape, "head.ln.g"), p(tape, "head.ln.b"));
  HeadVars out;
  out.char_logits = ad::linear(tape, h, p(tape, "head.char.w"), p(tape, "head.char.b"));
  out.score_logits = ad::linear(tape, ad::block_mean(tape, h, T), p(tape, "head.score.w"), p(tape, "head.score.b"));
  out.center = ad::add(tape, reference, ad::linear(tape, h, p(tape, "head.center.w"), p(tape, "head.center.b")));
  out.top = ad::add(tape, out.center, ad::linear(tape, h, p(tape, "head.top.w"), p(tape, "head.top.b")));
  out.bot = ad::add(tape, out.center, ad::linear(tape, h, p(tape, "head.bot.w"), p(tape, "head.bot.b")));
  return out;
}

std::vector<HeadVars> Decoder::decode(Tape& tape, const QueryInputs& queries, Var features, const Points& cell_centers,
                                      const AttentionMask& mask, Rng* dropout_rng) {
  const int T = cfg_.T;
  const int heads_n = cfg_.heads;
  if (mask.size != queries.queries) {
    throw std::invalid_argument("attention mask size " + std::to_string(mask.size) + " does not match " +
                                std::to_string(queries.queries) + " queries");
  }
  if (tape.value(queries.content).rows() != static_cast<Eigen::Index>(queries.queries) * T) {
    throw std::invalid_argument("query inputs are not queries x T rows");
  }
  const Matrix inter_bias = mask.additive();
  const Var key_pos = embed_positional(tape, cell_centers);
  const Var feat_keys = ad::add(tape, features, key_pos);

  auto drop = [&](Var v) { return dropout_rng ? ad::dropout(tape, v, cfg_.dropout, *dropout_rng) : v; };

  Points reference = queries.reference;
  Var reference_var = queries.reference_var;
  Var pos = queries.positional;
  Var x = queries.content;
  std::vector<HeadVars> out;
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    auto ln = [&](const std::string& b, Var v) { return ad::layer_norm(tape, v, p(tape, b + "ln.g"), p(tape, b + "ln.b")); };
    auto proj = [&](const std::string& b, const char* w, Var v) { return ad::matmul(tape, v, p(tape, b + w)); };
    const Var pooled_pos = ad::block_mean(tape, pos, T);
    const Matrix cross_bias = gaussian_prior(reference, cell_centers, l == 0 ? cfg_.cross_sigma : cfg_.refined_sigma);

    {  // intra-instance: the T positions of each query attend to each other, no mask
      const std::string b = pre + "intra.";
      Var h = ln(b, x);
      Var qk = ad::add(tape, h, pos);
      Var att = ad::block_attention(tape, proj(b, "wq", qk), proj(b, "wk", qk), proj(b, "wv", h), heads_n, T);
      x = ad::add(tape, x, drop(ad::linear(tape, att, p(tape, b + "wo"), p(tape, b + "bo"))));
    }
    {  // inter-instance: pooled query states attend under the group mask
      const std::string b = pre + "inter.";
      Var h = ln(b, ad::block_mean(tape, x, T));
      Var qk = ad::add(tape, h, pooled_pos);
      Var att = ad::attention(tape, proj(b, "wq", qk), proj(b, "wk", qk), proj(b, "wv", h), heads_n, &inter_bias);
      Var o = ad::linear(tape, att, p(tape, b + "wo"), p(tape, b + "bo"));
      x = ad::add(tape, x, drop(ad::block_broadcast(tape, o, T)));
    }
    {  // cross-attention to the feature map with a Gaussian prior around each reference point
      const std::string b = pre + "cross.";
      Var h = ln(b, x);
      Var q = proj(b, "wq", ad::add(tape, h, pos));
      Var att = ad::attention(tape, q, proj(b, "wk", feat_keys), proj(b, "wv", features), heads_n, &cross_bias);
      x = ad::add(tape, x, drop(ad::linear(tape, att, p(tape, b + "wo"), p(tape, b + "bo"))));
    }
    {
      const std::string b = pre + "ffn.";
      Var h = ad::relu(tape, ad::linear(tape, ln(b, x), p(tape, b + "w1"), p(tape, b + "b1")));
      x = ad::add(tape, x, drop(ad::linear(tape, h, p(tape, b + "w2"), p(tape, b + "b2"))));
    }
    check_finite(tape, x, l);

    out.push_back(heads(tape, x, reference_var));
    if (cfg_.refine && l + 1 < cfg_.layers) {
      reference = tape.value(out.back().center);
      reference_var = tape.constant(reference);
      pos = embed_positional(tape, reference);
    }
  }
  return out;
}

namespace {
constexpr double kScoreLogitBound = 30.0;
}

PredictionSet read_predictions(const Tape& tape, const HeadVars& heads, int T) {
  PredictionSet pred;
  pred.T = T;
  const Matrix& logits = tape.value(heads.score_logits);
  pred.instance_scores = logits.col(0).unaryExpr([](double l) {
    return 1.0 / (1.0 + std::exp(-std::clamp(l, -kScoreLogitBound, kScoreLogitBound)));
  });
  pred.char_logits = tape.value(heads.char_logits);
  pred.center_points = tape.value(heads.center);
  pred.boundary_top = tape.value(heads.top);
  pred.boundary_bot = tape.value(heads.bot);
  return pred;
}

void seed_gradients(Tape& tape, const HeadVars& heads, const PredictionSet& grad) {
  const Matrix& logits = tape.value(heads.score_logits);
  Matrix d_logits(logits.rows(), 1);
  for (Eigen::Index q = 0; q < logits.rows(); ++q) {
    const double l = logits(q, 0);
    if (std::abs(l) >= kScoreLogitBound) {
      d_logits(q, 0) = 0.0;
    } else {
      const double s = 1.0 / (1.0 + std::exp(-l));
      d_logits(q, 0) = grad.instance_scores(q) * s * (1.0 - s);
    }
  }
  tape.grad(heads.score_logits) += d_logits;
  tape.grad(heads.char_logits) += grad.char_logits;
  tape.grad(heads.center) += grad.center_points;
  tape.grad(heads.top) += grad.boundary_top;
  tape.grad(heads.bot) += grad.boundary_bot;
}

void backpropagate(Tape& tape, const HeadVars& heads, const PredictionSet& grad) {
  seed_gradients(tape, heads, grad);
  tape.backward();
}

ForwardPass run_forward(Decoder& decoder, const FeatureMap& features, const DnQueryBatch* batch, Rng* dropout_rng) {
  ForwardPass pass;
  Tape& tape = pass.tape;
  const int K = decoder.config().num_queries;
  QueryInputs queries = decoder.matching_inputs(tape);
  AttentionMask mask = unmasked(K);
  if (batch) {
    QueryInputs dn = decoder.denoising_inputs(tape, *batch);
    pass.dn_queries = dn.queries;
    queries = decoder.combine(tape, dn, queries);
    mask = build_mask(batch->g, batch->n, K);
  }
  pass.matching_queries = K;
  Var feats = decoder.encode_features(tape, features);
  pass.layer_heads = decoder.decode(tape, queries, feats, features.centers, mask, dropout_rng);
  for (const auto& h : pass.layer_heads) pass.layer_predictions.push_back(read_predictions(tape, h, decoder.config().T));
  pass.heads = pass.layer_heads.back();
  pass.predictions = pass.layer_predictions.back();
  return pass;
}

}  // namespace dnspot
