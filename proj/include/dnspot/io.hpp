#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dnspot/experiment.hpp"

namespace dnspot::io {

/// Thrown for malformed input files; the message names the offending field.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kSnapshotFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Run configuration (JSON, "schema_version" = 1). Missing fields keep their defaults,
// unknown fields and type mismatches are rejected.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text);
std::string dump_config(const RunConfig& cfg);

// Dataset dump (JSON, "format_version" = 1).
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::string dump_dataset(const Dataset& data);

// Binary checkpoint: magic "DNSPOTCK", u32 version, u64 config length, decoder config JSON,
// u32 parameter count, then per parameter: u32 name length, name, u64 rows, u64 cols,
// rows*cols little-endian float64 in column-major order.
void save_checkpoint(const Decoder& model, const std::filesystem::path& path);
Decoder load_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const Decoder& model, std::ostream& out);
Decoder read_checkpoint(std::istream& in);

// Prediction snapshots for instability measurement: one JSON file per snapshot step plus
// ground_truth.json holding the dataset the snapshots were taken on.
void save_snapshot(const Snapshot& snap, const std::filesystem::path& dir);
void save_snapshot_ground_truth(const Dataset& data, const std::filesystem::path& dir);
std::vector<Snapshot> load_snapshots(const std::filesystem::path& dir);
Dataset load_snapshot_ground_truth(const std::filesystem::path& dir);

// Line-structured logs.
std::string metric_line(const MetricRow& row);
std::string eval_line(const EvalRow& row);
std::string report_json(const EvalReport& report);
void write_is_trace(const std::vector<IsRow>& rows, const std::filesystem::path& path);

}  // namespace dnspot::io
