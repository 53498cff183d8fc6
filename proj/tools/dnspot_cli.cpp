// dnspot: desk-scale denoising-training experiments for a Bezier text spotter.
//
//   dnspot gen   --config run.json
//   dnspot train --config run.json [--no-dn | --no-bcp | --no-mcs | --no-bct] [--deterministic]
//   dnspot is    --snapshots run/snapshots [--config run/config.json]
//   dnspot eval  --checkpoint run/checkpoint.bin --dataset run/eval.json
//
// DNSPOT_OUTPUT_DIR and DNSPOT_SEED override output_dir and seed from the config file.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "dnspot/experiment.hpp"
#include "dnspot/io.hpp"

namespace fs = std::filesystem;
using namespace dnspot;

namespace {

struct CommonOptions {
  std::string config;
  std::string output_dir;
  std::string seed;
};

RunConfig resolve_config(const CommonOptions& opts) {
  RunConfig cfg = opts.config.empty() ? RunConfig{} : io::load_config(opts.config);
  if (const char* env = std::getenv("DNSPOT_OUTPUT_DIR"); env && *env) cfg.output_dir = env;
  if (const char* env = std::getenv("DNSPOT_SEED"); env && *env) cfg.seed = std::stoull(env);
  if (!opts.output_dir.empty()) cfg.output_dir = opts.output_dir;
  if (!opts.seed.empty()) cfg.seed = std::stoull(opts.seed);
  return cfg;
}

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("-c,--config", opts.config, "run configuration (JSON)");
  cmd->add_option("-o,--output-dir", opts.output_dir, "output directory (overrides config and DNSPOT_OUTPUT_DIR)");
  cmd->add_option("--seed", opts.seed, "run seed (overrides config and DNSPOT_SEED)");
}

int cmd_gen(const CommonOptions& opts, int images, int jobs) {
  RunConfig cfg = resolve_config(opts);
  if (images > 0) cfg.images = images;
  cfg.finalize();
  const fs::path dir = cfg.output_dir;
  const Dataset train = generate_dataset(cfg.scene, cfg.images, 0, jobs);
  io::save_dataset(train, dir / "train.json");
  std::cout << "wrote " << train.images.size() << " records, " << train.instance_count() << " instances to "
            << (dir / "train.json").string() << "\n";
  if (cfg.eval_images > 0) {
    const Dataset eval = generate_dataset(cfg.scene, cfg.eval_images, kEvalIndexOffset, jobs);
    io::save_dataset(eval, dir / "eval.json");
    std::cout << "wrote " << eval.images.size() << " records, " << eval.instance_count() << " instances to "
              << (dir / "eval.json").string() << "\n";
  }
  return 0;
}

struct TrainOptions {
  std::string dataset;
  std::string eval_dataset;
  int steps = -1;
  bool no_dn = false, no_bcp = false, no_mcs = false, no_bct = false;
  bool deterministic = false;
};

int cmd_train(const CommonOptions& opts, const TrainOptions& t) {
  RunConfig cfg = resolve_config(opts);
  if (t.steps >= 0) cfg.train.steps = t.steps;
  if (t.deterministic) cfg.train.deterministic = true;
  if (t.no_bcp) cfg.ablations.bcp = false;
  if (t.no_mcs) cfg.ablations.mcs = false;
  if (t.no_bct) cfg.ablations.bct = false;
  if (t.no_dn) cfg.ablations = Ablations::no_dn();
  cfg.finalize();

  const fs::path dir = cfg.output_dir;
  const fs::path train_path = t.dataset.empty() ? dir / "train.json" : fs::path(t.dataset);
  if (!fs::exists(train_path)) throw std::runtime_error("dataset " + train_path.string() + " does not exist");
  const Dataset train_set = io::load_dataset(train_path);
  if (train_set.spec.alphabet_size != cfg.scene.alphabet_size) {
    throw std::runtime_error("dataset alphabet size differs from the configuration");
  }

  std::optional<Dataset> eval_set;
  const fs::path eval_path = t.eval_dataset.empty() ? dir / "eval.json" : fs::path(t.eval_dataset);
  if (fs::exists(eval_path)) eval_set = io::load_dataset(eval_path);

  fs::create_directories(dir);
  {
    std::ofstream out(dir / "config.json", std::ios::binary | std::ios::trunc);
    out << io::dump_config(cfg);
  }
  Decoder model(cfg.decoder, cfg.seed);
  const TrainResult result = train(cfg, train_set, eval_set ? &*eval_set : nullptr, model, dir);
  if (!result.instability.empty()) io::write_is_trace(result.instability, dir / "is.csv");

  std::cout << "trained " << cfg.train.steps << " steps, " << result.metrics.size() << " metric rows, "
            << result.snapshots.size() << " snapshots -> " << (dir / "checkpoint.bin").string() << "\n";
  if (!result.evals.empty()) {
    const auto& last = result.evals.back().report;
    std::cout << "final eval: P=" << last.precision << " R=" << last.recall << " F1=" << last.f1
              << " E2E-F1=" << last.e2e_f1 << "\n";
  }
  return 0;
}

int cmd_is(const std::string& snapshots, const std::string& out_path, const std::string& config) {
  const auto snaps = io::load_snapshots(snapshots);
  if (snaps.size() < 2) {
    throw std::runtime_error("need at least two snapshots in " + snapshots + ", found " + std::to_string(snaps.size()));
  }
  const Dataset gt = io::load_snapshot_ground_truth(snapshots);
  RunConfig cfg = config.empty() ? RunConfig{} : io::load_config(config);
  cfg.match.focal_alpha = cfg.loss.focal_alpha;
  cfg.match.focal_gamma = cfg.loss.focal_gamma;
  cfg.match.validate();
  const MatchCost cost = cfg.match;
  const auto rows = instability_trace(snaps, gt, cost);
  const fs::path out = out_path.empty() ? fs::path(snapshots) / "is.csv" : fs::path(out_path);
  io::write_is_trace(rows, out);
  std::cout << "step,is\n";
  for (const auto& r : rows) std::cout << r.step << ',' << r.is << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& out_path,
             double score_threshold, double detection_threshold) {
  if (!fs::exists(checkpoint)) throw std::runtime_error("checkpoint " + checkpoint + " does not exist");
  if (!fs::exists(dataset)) throw std::runtime_error("dataset " + dataset + " does not exist");
  Decoder model = io::load_checkpoint(checkpoint);
  const Dataset data = io::load_dataset(dataset);
  TrainConfig cfg;
  cfg.score_threshold = score_threshold;
  cfg.detection_threshold = detection_threshold;
  cfg.validate();
  const EvalReport report = evaluate(model, data, cfg);
  const std::string text = io::report_json(report);
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << text;
  }
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"dnspot: denoising training for Bezier-curve text spotting"};
  app.require_subcommand(1);

  CommonOptions gen_opts;
  int gen_images = 0;
  int gen_jobs = 1;
  auto* gen = app.add_subcommand("gen", "generate the synthetic train/eval datasets");
  add_common(gen, gen_opts);
  gen->add_option("--images", gen_images, "number of training images (overrides config)");
  gen->add_option("-j,--jobs", gen_jobs, "generator threads; output is identical for any value")->check(CLI::PositiveNumber);

  CommonOptions train_opts;
  TrainOptions t;
  auto* tr = app.add_subcommand("train", "train the decoder, logging metrics and snapshots");
  add_common(tr, train_opts);
  tr->add_option("--dataset", t.dataset, "training dataset (default <output_dir>/train.json)");
  tr->add_option("--eval-dataset", t.eval_dataset, "held-out dataset (default <output_dir>/eval.json if present)");
  tr->add_option("--steps", t.steps, "optimizer steps (overrides config)");
  tr->add_flag("--no-dn", t.no_dn, "disable denoising training");
  tr->add_flag("--no-bcp", t.no_bcp, "noise sampled points instead of control points");
  tr->add_flag("--no-mcs", t.no_mcs, "left-aligned content instead of masked character sliding");
  tr->add_flag("--no-bct", t.no_bct, "drop the negative-part background cross-entropy");
  tr->add_flag("--deterministic", t.deterministic, "record wall_time as 0 for byte-identical logs");

  std::string snapshots, is_out, is_config;
  auto* is = app.add_subcommand("is", "instability trace from a snapshot directory");
  is->add_option("-s,--snapshots", snapshots, "snapshot directory")->required();
  is->add_option("--out", is_out, "output CSV (default <snapshots>/is.csv)");
  is->add_option("-c,--config", is_config, "run configuration supplying the matching cost weights");

  std::string checkpoint, dataset, eval_out;
  double score_threshold = TrainConfig{}.score_threshold;
  double detection_threshold = TrainConfig{}.detection_threshold;
  auto* ev = app.add_subcommand("eval", "detection and end-to-end scores of a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--dataset", dataset, "dataset file")->required();
  ev->add_option("--out", eval_out, "write the report as JSON");
  ev->add_option("--score-threshold", score_threshold, "minimum instance score of a detection");
  ev->add_option("--detection-threshold", detection_threshold, "maximum mean boundary L1 of a match");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen(gen_opts, gen_images, gen_jobs);
    if (*tr) return cmd_train(train_opts, t);
    if (*is) return cmd_is(snapshots, is_out, is_config);
    if (*ev) return cmd_eval(checkpoint, dataset, eval_out, score_threshold, detection_threshold);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
