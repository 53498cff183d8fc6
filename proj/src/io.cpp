#include "dnspot/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string_view>

#include "json.hpp"

namespace dnspot::io {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": invalid JSON (" + e.what() + ")");
  }
}

/// Reads one JSON object, checking types per field and rejecting unknown keys.
class Section {
 public:
  Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw FormatError("config field '" + path_ + "': expected an object");
  }

  void get(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      out = v->get<int>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  template <typename T>
  void get(const char* key, Range<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array() || v->size() != 2) fail(key, "a [lo, hi] pair");
      for (const auto& e : *v) {
        if (std::is_integral_v<T> ? !e.is_number_integer() : !e.is_number()) fail(key, "a [lo, hi] pair of numbers");
      }
      out = {(*v)[0].get<T>(), (*v)[1].get<T>()};
    }
  }
  const json* sub(const char* key) { return find(key); }
  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw FormatError("config field '" + path(key.c_str()) + "': unknown field");
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* expected) const {
    throw FormatError("config field '" + path(key) + "': expected " + expected);
  }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

json spec_json(const SceneSpec& s) {
  return json{{"instances_per_image", {s.instances_per_image.lo, s.instances_per_image.hi}},
              {"alphabet_size", s.alphabet_size},
              {"transcript_len", {s.transcript_len.lo, s.transcript_len.hi}},
              {"inverse_fraction", s.inverse_fraction},
              {"curvature", {s.curvature.lo, s.curvature.hi}},
              {"text_height", {s.text_height.lo, s.text_height.hi}},
              {"text_width", {s.text_width.lo, s.text_width.hi}},
              {"max_rotation", s.max_rotation},
              {"grid_height", s.grid_height},
              {"grid_width", s.grid_width},
              {"seed", s.seed}};
}

void read_spec(Section sec, SceneSpec& s) {
  sec.get("instances_per_image", s.instances_per_image);
  sec.get("alphabet_size", s.alphabet_size);
  sec.get("transcript_len", s.transcript_len);
  sec.get("inverse_fraction", s.inverse_fraction);
  sec.get("curvature", s.curvature);
  sec.get("text_height", s.text_height);
  sec.get("text_width", s.text_width);
  sec.get("max_rotation", s.max_rotation);
  sec.get("grid_height", s.grid_height);
  sec.get("grid_width", s.grid_width);
  sec.get("seed", s.seed);
  sec.finish();
}

json decoder_json(const DecoderConfig& d) {
  return json{{"layers", d.layers},   {"dim", d.dim},
              {"heads", d.heads},     {"T", d.T},
              {"alphabet_size", d.alphabet_size},
              {"ffn_dim", d.ffn_dim}, {"num_queries", d.num_queries},
              {"feature_channels", d.feature_channels},
              {"cross_sigma", d.cross_sigma},
              {"refined_sigma", d.refined_sigma},
              {"refine", d.refine},
              {"dropout", d.dropout}};
}

void read_decoder(Section sec, DecoderConfig& d) {
  sec.get("layers", d.layers);
  sec.get("dim", d.dim);
  sec.get("heads", d.heads);
  sec.get("T", d.T);
  sec.get("alphabet_size", d.alphabet_size);
  sec.get("ffn_dim", d.ffn_dim);
  sec.get("num_queries", d.num_queries);
  sec.get("feature_channels", d.feature_channels);
  sec.get("cross_sigma", d.cross_sigma);
  sec.get("refined_sigma", d.refined_sigma);
  sec.get("refine", d.refine);
  sec.get("dropout", d.dropout);
  sec.finish();
}

json curve_json(const Bezier& c) {
  json arr = json::array();
  for (int i = 0; i < 4; ++i) {
    arr.push_back(c.control(i, 0));
    arr.push_back(c.control(i, 1));
  }
  return arr;
}

Bezier curve_from(const json& arr, const std::string& where) {
  if (!arr.is_array() || arr.size() != 8) throw FormatError(where + ": expected 8 control-point coordinates");
  Bezier c;
  for (int i = 0; i < 4; ++i) {
    if (!arr[2 * i].is_number() || !arr[2 * i + 1].is_number()) throw FormatError(where + ": expected numbers");
    c.control(i, 0) = arr[2 * i].get<double>();
    c.control(i, 1) = arr[2 * i + 1].get<double>();
  }
  return c;
}

const json& require(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw FormatError(where + ": missing field '" + key + "'");
  return *it;
}

json dataset_json(const Dataset& data) {
  json images = json::array();
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    json instances = json::array();
    for (const auto& inst : data.images[i]) {
      instances.push_back(json{{"id", inst.id},
                               {"top", curve_json(inst.top)},
                               {"bottom", curve_json(inst.bottom)},
                               {"transcript", inst.transcript}});
    }
    images.push_back(json{{"index", data.image_indices[i]}, {"instances", std::move(instances)}});
  }
  return json{{"format_version", Dataset::kFormatVersion},
              {"alphabet_size", data.spec.alphabet_size},
              {"feature_grid", {data.spec.grid_height, data.spec.grid_width}},
              {"scene", spec_json(data.spec)},
              {"images", std::move(images)}};
}

Dataset dataset_from(const json& j, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + ": expected an object");
  const json& version = require(j, "format_version", where);
  if (!version.is_number_integer() || version.get<int>() != Dataset::kFormatVersion) {
    throw FormatError(where + ": unsupported format_version");
  }
  Dataset data;
  read_spec(Section(require(j, "scene", where), "scene"), data.spec);
  data.spec.validate();
  for (const auto& img : require(j, "images", where)) {
    const json& idx = require(img, "index", where);
    if (!idx.is_number_integer()) throw FormatError(where + ": image index must be an integer");
    data.image_indices.push_back(idx.get<int>());
    std::vector<TextInstance> instances;
    for (const auto& ij : require(img, "instances", where)) {
      TextInstance inst;
      const json& id = require(ij, "id", where);
      if (!id.is_number_integer()) throw FormatError(where + ": instance id must be an integer");
      inst.id = id.get<InstanceId>();
      inst.top = curve_from(require(ij, "top", where), where + " instance " + std::to_string(inst.id) + " top");
      inst.bottom = curve_from(require(ij, "bottom", where), where + " instance " + std::to_string(inst.id) + " bottom");
      for (const auto& c : require(ij, "transcript", where)) {
        if (!c.is_number_integer()) throw FormatError(where + ": transcript entries must be integers");
        inst.transcript.push_back(c.get<int>());
      }
      try {
        inst.validate(data.spec.alphabet_size);
      } catch (const std::invalid_argument& e) {
        throw FormatError(where + ": " + e.what());
      }
      instances.push_back(std::move(inst));
    }
    data.images.push_back(std::move(instances));
  }
  return data;
}

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("checkpoint: truncated file");
  return v;
}

constexpr std::array<char, 8> kMagic = {'D', 'N', 'S', 'P', 'O', 'T', 'C', 'K'};

json points_json(const Points& pts) {
  json arr = json::array();
  for (Eigen::Index r = 0; r < pts.rows(); ++r) {
    arr.push_back(pts(r, 0));
    arr.push_back(pts(r, 1));
  }
  return arr;
}

std::string snapshot_name(int step) {
  std::ostringstream ss;
  ss << "snapshot_" << std::setw(8) << std::setfill('0') << step << ".json";
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------

RunConfig parse_config(const std::string& text) {
  const json j = parse_json(text, "config");
  Section root(j, "");
  int version = -1;
  root.get("schema_version", version);
  if (version != kConfigSchemaVersion) {
    throw FormatError("config field 'schema_version': expected " + std::to_string(kConfigSchemaVersion));
  }
  RunConfig cfg;
  root.get("seed", cfg.seed);
  root.get("output_dir", cfg.output_dir);
  root.get("images", cfg.images);
  root.get("eval_images", cfg.eval_images);
  if (const json* s = root.sub("noise")) {
    Section sec(*s, "noise");
    sec.get("lambda_flip", cfg.noise.lambda_flip);
    sec.get("mask_prob", cfg.noise.mask_prob);
    sec.get("max_instances", cfg.noise.max_instances);
    sec.get("T", cfg.noise.T);
    sec.finish();
  }
  if (const json* s = root.sub("loss")) {
    Section sec(*s, "loss");
    sec.get("cls", cfg.loss.cls);
    sec.get("coord", cfg.loss.coord);
    sec.get("bd", cfg.loss.bd);
    sec.get("text_pos", cfg.loss.text_pos);
    sec.get("text_neg", cfg.loss.text_neg);
    sec.get("focal_alpha", cfg.loss.focal_alpha);
    sec.get("focal_gamma", cfg.loss.focal_gamma);
    sec.finish();
  }
  if (const json* s = root.sub("match")) {
    Section sec(*s, "match");
    sec.get("weight_cls", cfg.match.weight_cls);
    sec.get("weight_coord", cfg.match.weight_coord);
    sec.finish();
  }
  if (const json* s = root.sub("decoder")) read_decoder(Section(*s, "decoder"), cfg.decoder);
  if (const json* s = root.sub("scene")) read_spec(Section(*s, "scene"), cfg.scene);
  if (const json* s = root.sub("train")) {
    Section sec(*s, "train");
    sec.get("steps", cfg.train.steps);
    sec.get("snapshot_interval", cfg.train.snapshot_interval);
    sec.get("learning_rate", cfg.train.learning_rate);
    sec.get("lr_drop_fraction", cfg.train.lr_drop_fraction);
    sec.get("weight_decay", cfg.train.weight_decay);
    sec.get("grad_clip", cfg.train.grad_clip);
    sec.get("score_threshold", cfg.train.score_threshold);
    sec.get("detection_threshold", cfg.train.detection_threshold);
    sec.get("aux_loss", cfg.train.aux_loss);
    sec.get("deterministic", cfg.train.deterministic);
    sec.finish();
  }
  if (const json* s = root.sub("ablations")) {
    Section sec(*s, "ablations");
    sec.get("dn", cfg.ablations.dn);
    sec.get("bcp", cfg.ablations.bcp);
    sec.get("mcs", cfg.ablations.mcs);
    sec.get("bct", cfg.ablations.bct);
    sec.finish();
  }
  root.finish();
  return cfg;
}

RunConfig load_config(const fs::path& path) { return parse_config(read_file(path)); }

std::string dump_config(const RunConfig& cfg) {
  json j{{"schema_version", kConfigSchemaVersion},
         {"seed", cfg.seed},
         {"output_dir", cfg.output_dir},
         {"images", cfg.images},
         {"eval_images", cfg.eval_images},
         {"noise",
          {{"lambda_flip", cfg.noise.lambda_flip},
           {"mask_prob", cfg.noise.mask_prob},
           {"max_instances", cfg.noise.max_instances},
           {"T", cfg.noise.T}}},
         {"loss",
          {{"cls", cfg.loss.cls},
           {"coord", cfg.loss.coord},
           {"bd", cfg.loss.bd},
           {"text_pos", cfg.loss.text_pos},
           {"text_neg", cfg.loss.text_neg},
           {"focal_alpha", cfg.loss.focal_alpha},
           {"focal_gamma", cfg.loss.focal_gamma}}},
         {"match", {{"weight_cls", cfg.match.weight_cls}, {"weight_coord", cfg.match.weight_coord}}},
         {"decoder", decoder_json(cfg.decoder)},
         {"scene", spec_json(cfg.scene)},
         {"train",
          {{"steps", cfg.train.steps},
           {"snapshot_interval", cfg.train.snapshot_interval},
           {"learning_rate", cfg.train.learning_rate},
           {"lr_drop_fraction", cfg.train.lr_drop_fraction},
           {"weight_decay", cfg.train.weight_decay},
           {"grad_clip", cfg.train.grad_clip},
           {"score_threshold", cfg.train.score_threshold},
           {"detection_threshold", cfg.train.detection_threshold},
           {"aux_loss", cfg.train.aux_loss},
           {"deterministic", cfg.train.deterministic}}},
         {"ablations",
          {{"dn", cfg.ablations.dn}, {"bcp", cfg.ablations.bcp}, {"mcs", cfg.ablations.mcs}, {"bct", cfg.ablations.bct}}}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

std::string dump_dataset(const Dataset& data) { return dataset_json(data).dump() + "\n"; }

void save_dataset(const Dataset& data, const fs::path& path) { write_file(path, dump_dataset(data)); }

Dataset load_dataset(const fs::path& path) {
  return dataset_from(parse_json(read_file(path), path.string()), path.string());
}

// ---------------------------------------------------------------------------

void write_checkpoint(const Decoder& model, std::ostream& out) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = decoder_json(model.config()).dump();
  put<std::uint64_t>(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto& params = model.params().all();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.cols()));
    out.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
}

Decoder read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError("checkpoint: bad magic");
  if (take<std::uint32_t>(in) != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  std::string cfg_text(take<std::uint64_t>(in), '\0');
  in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  if (!in) throw FormatError("checkpoint: truncated config");
  DecoderConfig cfg;
  read_decoder(Section(parse_json(cfg_text, "checkpoint config"), "decoder"), cfg);
  Decoder model(cfg, 0);
  const auto count = take<std::uint32_t>(in);
  if (count != model.params().all().size()) throw FormatError("checkpoint: parameter count mismatch");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(take<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    auto& p = model.params().get(name);
    const auto rows = take<std::uint64_t>(in);
    const auto cols = take<std::uint64_t>(in);
    if (rows != static_cast<std::uint64_t>(p.value.rows()) || cols != static_cast<std::uint64_t>(p.value.cols())) {
      throw FormatError("checkpoint: shape mismatch for " + name);
    }
    in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!in) throw FormatError("checkpoint: truncated parameter " + name);
  }
  return model;
}

void save_checkpoint(const Decoder& model, const fs::path& path) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(model, out);
  write_file(path, out.str());
}

Decoder load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

// ---------------------------------------------------------------------------

void save_snapshot(const Snapshot& snap, const fs::path& dir) {
  json images = json::array();
  for (const auto& img : snap.images) {
    images.push_back(json{{"scores", std::vector<double>(img.scores.data(), img.scores.data() + img.scores.size())},
                          {"points", points_json(img.points)}});
  }
  json j{{"format_version", kSnapshotFormatVersion}, {"step", snap.step}, {"T", snap.T}, {"images", std::move(images)}};
  write_file(dir / snapshot_name(snap.step), j.dump() + "\n");
}

void save_snapshot_ground_truth(const Dataset& data, const fs::path& dir) {
  write_file(dir / "ground_truth.json", dump_dataset(data));
}

std::vector<Snapshot> load_snapshots(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("snapshot directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("snapshot_", 0) == 0 && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Snapshot> out;
  for (const auto& f : files) {
    const json j = parse_json(read_file(f), f.string());
    const std::string where = f.string();
    if (require(j, "format_version", where) != kSnapshotFormatVersion) throw FormatError(where + ": unsupported format_version");
    Snapshot snap;
    snap.step = require(j, "step", where).get<int>();
    snap.T = require(j, "T", where).get<int>();
    for (const auto& img : require(j, "images", where)) {
      ImageSnapshot s;
      const auto scores = require(img, "scores", where).get<std::vector<double>>();
      const auto pts = require(img, "points", where).get<std::vector<double>>();
      if (pts.size() != scores.size() * static_cast<std::size_t>(snap.T) * 2) {
        throw FormatError(where + ": points do not match scores x T");
      }
      s.scores = Eigen::Map<const Eigen::VectorXd>(scores.data(), static_cast<Eigen::Index>(scores.size()));
      s.points.resize(static_cast<Eigen::Index>(pts.size() / 2), 2);
      for (std::size_t r = 0; r < pts.size() / 2; ++r) {
        s.points(static_cast<Eigen::Index>(r), 0) = pts[2 * r];
        s.points(static_cast<Eigen::Index>(r), 1) = pts[2 * r + 1];
      }
      snap.images.push_back(std::move(s));
    }
    out.push_back(std::move(snap));
  }
  std::sort(out.begin(), out.end(), [](const Snapshot& a, const Snapshot& b) { return a.step < b.step; });
  return out;
}

Dataset load_snapshot_ground_truth(const fs::path& dir) { return load_dataset(dir / "ground_truth.json"); }

// ---------------------------------------------------------------------------

std::string metric_line(const MetricRow& row) {
  json j{{"step", row.step},
         {"wall_time", row.wall_time},
         {"part", row.part},
         {"loss_total", row.terms.total()},
         {"loss_cls", row.terms.cls},
         {"loss_text_pos", row.terms.text_pos},
         {"loss_text_neg", row.terms.text_neg},
         {"loss_coord", row.terms.coord},
         {"loss_bd", row.terms.bd}};
  return j.dump();
}

namespace {
json report_object(const EvalReport& r) {
  return json{{"num_pred", r.num_pred},
              {"num_gt", r.num_gt},
              {"true_positives", r.true_positives},
              {"e2e_true_positives", r.e2e_true_positives},
              {"precision", r.precision},
              {"recall", r.recall},
              {"f1", r.f1},
              {"e2e_precision", r.e2e_precision},
              {"e2e_recall", r.e2e_recall},
              {"e2e_f1", r.e2e_f1}};
}
}  // namespace

std::string eval_line(const EvalRow& row) {
  json j = report_object(row.report);
  j["step"] = row.step;
  return j.dump();
}

std::string report_json(const EvalReport& report) { return report_object(report).dump(2) + "\n"; }

void write_is_trace(const std::vector<IsRow>& rows, const fs::path& path) {
  std::ostringstream out;
  out << "step,is\n";
  for (const auto& r : rows) {
    std::array<char, 32> buf{};
    const auto end = std::to_chars(buf.data(), buf.data() + buf.size(), r.is).ptr;
    out << r.step << ',' << std::string_view(buf.data(), end - buf.data()) << '\n';
  }
  write_file(path, out.str());
}

}  // namespace dnspot::io
