#include "dnspot/experiment.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "dnspot/io.hpp"

namespace dnspot {

namespace fs = std::filesystem;

void Ablations::validate() const {
  if (!dn && (bcp || mcs || bct)) {
    throw std::invalid_argument("ablations: bcp, mcs and bct require dn; disable them when dn is off");
  }
}

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("train.steps must be non-negative");
  if (snapshot_interval < 1) throw std::invalid_argument("train.snapshot_interval must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be positive");
  if (!(lr_drop_fraction >= 0.0 && lr_drop_fraction <= 1.0)) {
    throw std::invalid_argument("train.lr_drop_fraction must lie in [0, 1]");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("train.weight_decay must be non-negative");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("train.grad_clip must be positive");
  if (!(score_threshold > 0.0 && score_threshold < 1.0)) {
    throw std::invalid_argument("train.score_threshold must lie in (0, 1)");
  }
  if (!(detection_threshold > 0.0)) throw std::invalid_argument("train.detection_threshold must be positive");
}

void RunConfig::finalize() {
  if (noise.T != decoder.T) {
    throw std::invalid_argument("noise.T (" + std::to_string(noise.T) + ") must equal decoder.T (" +
                                std::to_string(decoder.T) + ")");
  }
  if (decoder.alphabet_size != scene.alphabet_size) {
    throw std::invalid_argument("decoder.alphabet_size must equal scene.alphabet_size");
  }
  const int channels = feature_channel_count(scene.alphabet_size);
  if (decoder.feature_channels != 0 && decoder.feature_channels != channels) {
    throw std::invalid_argument("decoder.feature_channels must be " + std::to_string(channels) +
                                " for this alphabet (or omitted)");
  }
  decoder.feature_channels = channels;
  noise.rng_seed = seed;
  scene.seed = seed;
  if (images < 1) throw std::invalid_argument("images must be positive");
  if (eval_images < 0) throw std::invalid_argument("eval_images must be non-negative");
  if (scene.instances_per_image.hi > decoder.num_queries) {
    throw std::invalid_argument("decoder.num_queries must be at least scene.instances_per_image upper bound");
  }
  noise.validate();
  loss.validate();
  match.focal_alpha = loss.focal_alpha;
  match.focal_gamma = loss.focal_gamma;
  match.validate();
  decoder.validate();
  scene.validate();
  train.validate();
  ablations.validate();
}

std::size_t Dataset::instance_count() const {
  std::size_t n = 0;
  for (const auto& img : images) n += img.size();
  return n;
}

FeatureMap Dataset::features(std::size_t image) const {
  return rasterize(images.at(image), spec.grid_height, spec.grid_width, spec.alphabet_size);
}

Dataset generate_dataset(const SceneSpec& spec, int count, int first_index, int jobs) {
  spec.validate();
  if (count < 0) throw std::invalid_argument("generate_dataset: count must be non-negative");
  if (jobs < 1) throw std::invalid_argument("generate_dataset: jobs must be positive");
  Dataset data;
  data.spec = spec;
  data.images.resize(count);
  for (int i = 0; i < count; ++i) data.image_indices.push_back(first_index + i);
  auto work = [&](int worker) {
    for (int i = worker; i < count; i += jobs) data.images[i] = generate_instances(spec, first_index + i);
  };
  std::vector<std::thread> threads;
  for (int w = 1; w < std::min(jobs, count); ++w) threads.emplace_back(work, w);
  work(0);
  for (auto& t : threads) t.join();
  return data;
}

// ---------------------------------------------------------------------------

void EvalReport::accumulate(const EvalReport& other) {
  num_pred += other.num_pred;
  num_gt += other.num_gt;
  true_positives += other.true_positives;
  e2e_true_positives += other.e2e_true_positives;
  finish();
}

namespace {

void ratios(int tp, int num_pred, int num_gt, double& p, double& r, double& f1) {
  p = num_pred > 0 ? static_cast<double>(tp) / num_pred : 0.0;
  r = num_gt > 0 ? static_cast<double>(tp) / num_gt : 0.0;
  f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

}  // namespace

void EvalReport::finish() {
  ratios(true_positives, num_pred, num_gt, precision, recall, f1);
  ratios(e2e_true_positives, num_pred, num_gt, e2e_precision, e2e_recall, e2e_f1);
}

std::vector<int> greedy_decode(const Eigen::MatrixXd& logits) {
  const int blank = static_cast<int>(logits.cols()) - 1;
  std::vector<int> out;
  int prev = blank;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    Eigen::Index best = 0;
    logits.row(t).maxCoeff(&best);
    const int c = static_cast<int>(best);
    if (c != blank && c != prev) out.push_back(c);
    prev = c;
  }
  return out;
}

double boundary_distance(const Detection& a, const Detection& b) {
  const double rows = static_cast<double>(a.top.rows() + a.bot.rows());
  if (a.top.rows() != b.top.rows() || a.bot.rows() != b.bot.rows()) {
    throw std::invalid_argument("boundary_distance: point counts differ");
  }
  return ((a.top - b.top).cwiseAbs().sum() + (a.bot - b.bot).cwiseAbs().sum()) / rows;
}

EvalReport score_image(const std::vector<Detection>& predictions, const std::vector<Detection>& ground_truth,
                       double threshold) {
  EvalReport r;
  r.num_pred = static_cast<int>(predictions.size());
  r.num_gt = static_cast<int>(ground_truth.size());
  if (r.num_pred > 0 && r.num_gt > 0) {
    Eigen::MatrixXd cost(r.num_pred, r.num_gt);
    for (int p = 0; p < r.num_pred; ++p) {
      for (int g = 0; g < r.num_gt; ++g) cost(p, g) = boundary_distance(predictions[p], ground_truth[g]);
    }
    std::vector<std::pair<int, int>> pairs;
    if (r.num_pred >= r.num_gt) {
      const auto a = hungarian_match(cost);
      for (int p = 0; p < r.num_pred; ++p) {
        if (a.W[p] >= 0) pairs.emplace_back(p, a.W[p]);
      }
    } else {
      const auto a = hungarian_match(cost.transpose());
      for (int g = 0; g < r.num_gt; ++g) {
        if (a.W[g] >= 0) pairs.emplace_back(a.W[g], g);
      }
    }
    for (auto [p, g] : pairs) {
      if (cost(p, g) < threshold) {
        ++r.true_positives;
        if (predictions[p].transcript == ground_truth[g].transcript) ++r.e2e_true_positives;
      }
    }
  }
  r.finish();
  return r;
}

std::vector<Detection> ground_truth_detections(const std::vector<TextInstance>& instances, int T) {
  std::vector<Detection> out;
  for (const auto& inst : instances) {
    out.push_back({sample_uniform(inst.top, T), sample_uniform(inst.bottom, T), inst.transcript});
  }
  return out;
}

std::vector<Detection> detect(const PredictionSet& matching, double score_threshold) {
  std::vector<Detection> out;
  const int T = matching.T;
  for (int q = 0; q < matching.query_count(); ++q) {
    if (matching.instance_scores(q) < score_threshold) continue;
    const Eigen::Index r0 = static_cast<Eigen::Index>(q) * T;
    out.push_back({matching.boundary_top.middleRows(r0, T), matching.boundary_bot.middleRows(r0, T),
                   greedy_decode(matching.char_logits.middleRows(r0, T))});
  }
  return out;
}

namespace {

PredictionSet matching_predictions(Decoder& model, const FeatureMap& features) {
  return run_forward(model, features, nullptr).predictions;
}

}  // namespace

EvalReport evaluate(Decoder& model, const Dataset& data, const TrainConfig& cfg) {
  EvalReport total;
  const int T = model.config().T;
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const PredictionSet pred = matching_predictions(model, data.features(i));
    total.accumulate(score_image(detect(pred, cfg.score_threshold), ground_truth_detections(data.images[i], T),
                                 cfg.detection_threshold));
  }
  total.finish();
  return total;
}

// ---------------------------------------------------------------------------

Snapshot take_snapshot(Decoder& model, const Dataset& data, int step) {
  Snapshot snap;
  snap.step = step;
  snap.T = model.config().T;
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const PredictionSet pred = matching_predictions(model, data.features(i));
    snap.images.push_back({pred.instance_scores, pred.center_points});
  }
  return snap;
}

std::vector<MatchAssignment> snapshot_assignments(const Snapshot& snap, const Dataset& data, const MatchCost& cost) {
  if (snap.images.size() != data.images.size()) {
    throw std::invalid_argument("snapshot at step " + std::to_string(snap.step) + " covers " +
                                std::to_string(snap.images.size()) + " images, ground truth has " +
                                std::to_string(data.images.size()));
  }
  std::vector<MatchAssignment> out;
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const auto& img = snap.images[i];
    out.push_back(hungarian_match(build_cost_matrix(img.scores, img.points, data.images[i], snap.T, cost)));
  }
  return out;
}

double mean_instability(const std::vector<MatchAssignment>& previous, const std::vector<MatchAssignment>& next) {
  if (previous.size() != next.size() || previous.empty()) {
    throw std::invalid_argument("mean_instability: snapshots must cover the same non-empty image set");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < previous.size(); ++i) sum += instability(previous[i], next[i]);
  return sum / static_cast<double>(previous.size());
}

std::vector<IsRow> instability_trace(const std::vector<Snapshot>& snapshots, const Dataset& data,
                                     const MatchCost& cost) {
  if (snapshots.size() < 2) throw std::invalid_argument("instability needs at least two snapshots");
  std::vector<IsRow> rows;
  auto prev = snapshot_assignments(snapshots.front(), data, cost);
  for (std::size_t s = 1; s < snapshots.size(); ++s) {
    auto next = snapshot_assignments(snapshots[s], data, cost);
    rows.push_back({snapshots[s].step, mean_instability(prev, next)});
    prev = std::move(next);
  }
  return rows;
}

// ---------------------------------------------------------------------------

double learning_rate_at(const TrainConfig& cfg, int step) {
  return step < cfg.lr_drop_fraction * cfg.steps ? cfg.learning_rate : 0.1 * cfg.learning_rate;
}

StepLoss image_loss(Decoder& model, const RunConfig& cfg, const std::vector<TextInstance>& instances,
                    const FeatureMap& features, Rng& noise_rng, bool backward) {
  StepLoss out;
  const int K = model.config().num_queries;
  out.has_dn = cfg.ablations.dn && !instances.empty();

  DnQueryBatch batch;
  std::span<const TextInstance> capped(instances);
  if (out.has_dn) {
    DnOptions options;
    options.noise_target = cfg.ablations.bcp ? NoiseTarget::ControlPoints : NoiseTarget::SampledPoints;
    options.content_init = cfg.ablations.mcs ? ContentInit::Sliding : ContentInit::LeftAligned;
    batch = build_dn_batch(instances, cfg.noise, noise_rng, cfg.scene.alphabet_size, options);
    capped = capped.first(batch.n);
  }

  ForwardPass pass = run_forward(model, features, out.has_dn ? &batch : nullptr);
  LossWeights dn_weights = cfg.loss;
  if (!cfg.ablations.bct) dn_weights.text_neg = 0.0;
  const int layers = static_cast<int>(pass.layer_heads.size());
  for (int l = cfg.train.aux_loss ? 0 : layers - 1; l < layers; ++l) {
    const PredictionSet& pred = pass.layer_predictions[l];
    PredictionSet grad = PredictionSet::zeros_like(pred);
    out.match = matching_loss(pred.slice(pass.dn_queries, K), instances, cfg.loss, cfg.match);
    grad.assign(pass.dn_queries, out.match.grad);
    if (out.has_dn) {
      out.dn = dn_loss(pred.slice(0, pass.dn_queries), batch, capped, dn_weights);
      grad.assign(0, out.dn.grad);
    }
    if (backward) seed_gradients(pass.tape, pass.layer_heads[l], grad);
  }
  if (backward) pass.tape.backward();
  return out;
}

namespace {

void adamw_step(ad::ParameterStore& params, double lr, double weight_decay, int t) {
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (auto& p : params.all()) {
    p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * p.grad;
    p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * p.grad.cwiseAbs2();
    const bool decay = p.value.rows() > 1 && p.value.cols() > 1 && p.name != "match.anchors";
    if (decay) p.value *= (1.0 - lr * weight_decay);
    p.value.array() -= lr * (p.adam_m.array() / c1) / ((p.adam_v.array() / c2).sqrt() + eps);
  }
}

class LineLog {
 public:
  explicit LineLog(const std::optional<fs::path>& path) {
    if (path) {
      out_.open(*path, std::ios::binary | std::ios::trunc);
      if (!out_) throw std::runtime_error("cannot write " + path->string());
    }
  }
  void write(const std::string& line) {
    if (out_.is_open()) out_ << line << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
};

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Dataset* eval_set, Decoder& model,
                  const std::optional<fs::path>& output_dir) {
  if (train_set.images.empty()) throw std::invalid_argument("train: dataset has no images");
  TrainResult result;

  std::optional<fs::path> snap_dir;
  if (output_dir) {
    fs::create_directories(*output_dir);
    snap_dir = *output_dir / "snapshots";
    fs::create_directories(*snap_dir);
  }
  LineLog metrics(output_dir ? std::optional<fs::path>(*output_dir / "metrics.jsonl") : std::nullopt);
  LineLog evals(output_dir && eval_set ? std::optional<fs::path>(*output_dir / "eval.jsonl") : std::nullopt);

  std::vector<FeatureMap> features;
  features.reserve(train_set.images.size());
  for (std::size_t i = 0; i < train_set.images.size(); ++i) features.push_back(train_set.features(i));

  const auto start = std::chrono::steady_clock::now();
  auto wall = [&] {
    if (cfg.train.deterministic) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  std::vector<MatchAssignment> last_assignments;
  auto snapshot = [&](int step) {
    Snapshot snap = take_snapshot(model, train_set, step);
    auto assignments = snapshot_assignments(snap, train_set, cfg.match);
    if (!last_assignments.empty()) result.instability.push_back({step, mean_instability(last_assignments, assignments)});
    last_assignments = std::move(assignments);
    if (snap_dir) io::save_snapshot(snap, *snap_dir);
    result.snapshots.push_back(std::move(snap));
    if (eval_set) {
      EvalRow row{step, evaluate(model, *eval_set, cfg.train)};
      evals.write(io::eval_line(row));
      result.evals.push_back(row);
    }
  };

  if (snap_dir) io::save_snapshot_ground_truth(train_set, *snap_dir);
  if (cfg.train.steps > 0) snapshot(0);

  Rng order_rng = Rng::derive(cfg.seed, {0x6f72646572});
  std::vector<std::size_t> order(train_set.images.size());
  std::iota(order.begin(), order.end(), 0);
  for (int step = 0; step < cfg.train.steps; ++step) {
    const std::size_t pos = static_cast<std::size_t>(step) % order.size();
    if (pos == 0) std::shuffle(order.begin(), order.end(), order_rng.engine());
    const std::size_t image = order[pos];

    Rng noise_rng = Rng::derive(cfg.seed, {0x6e6f697365, static_cast<std::uint64_t>(step)});
    model.params().zero_grad();
    StepLoss loss = image_loss(model, cfg, train_set.images[image], features[image], noise_rng, true);

    const double norm = model.params().grad_norm();
    if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient at step " + std::to_string(step));
    if (norm > cfg.train.grad_clip) model.params().scale_grad(cfg.train.grad_clip / norm);
    adamw_step(model.params(), learning_rate_at(cfg.train, step), cfg.train.weight_decay, step + 1);

    const double t = wall();
    if (loss.has_dn) {
      MetricRow row{step, t, "dn", loss.dn.terms};
      metrics.write(io::metric_line(row));
      result.metrics.push_back(row);
    }
    MetricRow row{step, t, "match", loss.match.terms};
    metrics.write(io::metric_line(row));
    result.metrics.push_back(row);

    if ((step + 1) % cfg.train.snapshot_interval == 0) snapshot(step + 1);
  }

  if (output_dir) io::save_checkpoint(model, *output_dir / "checkpoint.bin");
  return result;
}

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace dnspot
