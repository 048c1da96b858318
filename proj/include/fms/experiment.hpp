#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fms/analysis.hpp"
#include "fms/data.hpp"
#include "fms/federation.hpp"
#include "fms/model.hpp"

namespace fms {

enum class DatasetKind { synthetic, csv };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  SyntheticParams synthetic;
  std::filesystem::path csv_path;
  CsvSchema csv;
  double eval_fraction = 0.25;
  std::uint64_t split_seed = 0;
};

/// Everything one experiment needs. Defaults follow the usual desk-scale
/// setup: client lr 0.02, batch 20, momentum server (lr 1, mu 0.9), 5
/// clients per round, 9 replicas.
struct ExperimentConfig {
  DatasetConfig dataset;
  ModelSpec model;
  StageConfig stage1;
  StageConfig stage2;
  EvalConfig eval;
  std::size_t replicas = 9;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs";

  ExperimentConfig();
};

/// JSON text -> config. Unknown keys and ill-typed values throw SchemaError
/// naming the offending key; the result has passed every module precondition
/// that can be checked without loading data.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical JSON rendering with every default filled in.
std::string to_json(const ExperimentConfig& cfg);

/// 16 hex digits of FNV-1a over the canonical JSON, ignoring seed, replicas
/// and output_dir.
std::string config_hash(const ExperimentConfig& cfg);

FederatedDataset build_dataset(const ExperimentConfig& cfg);

/// "fedavg-only", "reptile-only", "personalized-fedavg", or "<a>+<b>".
std::string run_mode(const ExperimentConfig& cfg);

/// Shortest round-trip decimal form of v.
std::string format_double(double v);

struct TrainOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> replicas;
  std::optional<std::filesystem::path> out;
  bool trace = false;
  bool force = false;
  bool wallclock = false;
};

/// Trains cfg.replicas runs seeded seed, seed+1, ... into <out>/run_<seed>.
/// A run that fails still leaves its completed rounds on disk and then throws.
std::vector<std::filesystem::path> cmd_train(const ExperimentConfig& cfg, const TrainOptions& opts,
                                             std::ostream& log);

struct PersonalizeOptions {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  /// When set, also writes sweep.csv for 1..max_epochs with SGD and Adam.
  std::optional<std::size_t> sweep_max_epochs;
  bool force = false;
};

/// Writes report.csv and summary.json (and sweep.csv) into the output
/// directory, which defaults to the checkpoint's directory. Nothing is written
/// unless every output can be produced.
PersonalizationReport cmd_personalize(const ExperimentConfig& cfg, const PersonalizeOptions& opts,
                                      std::ostream& log);

struct DecomposeOptions {
  std::filesystem::path run_dir;
  /// Default: the last traced round.
  std::optional<std::size_t> round;
  bool force = false;
};

/// Residual above which cmd_decompose reports failure.
inline constexpr double kDecomposeGuard = 1e-8;

/// Prints the report and writes decompose_round_<r>.txt into the run
/// directory.
DecompositionReport cmd_decompose(const DecomposeOptions& opts, std::ostream& log);

struct ReportOptions {
  std::vector<std::filesystem::path> run_dirs;
  std::vector<double> thresholds{0.8};
  std::optional<std::filesystem::path> out;
  bool force = false;
};

/// Aligned-text table of "mean (std)" per snapshot round and
/// rounds-to-threshold rows. Also written as report.txt / report.csv when
/// an output directory is given. Runs from different configs are refused.
std::string cmd_report(const ReportOptions& opts, std::ostream& log);

struct RunMetrics {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<EvalSnapshot> snapshots;
};

RunMetrics read_metrics_csv(const std::filesystem::path& path);
void write_metrics_csv(const std::filesystem::path& path, const std::string& config_hash,
                       std::uint64_t seed, std::span<const EvalSnapshot> snapshots);

inline constexpr const char* kTraceVersion = "fms-trace/1";

/// Per-round trace file: text header (version, round, algorithm, weighting,
/// beta, clients, config_hash, seed, "end"), then for each client its id,
/// weight, delta and step gradients as little-endian binary.
void save_trace(const std::filesystem::path& path, const RoundTrace& trace,
                const std::string& config_hash, std::uint64_t seed);
RoundTrace load_trace(const std::filesystem::path& path);

}  // namespace fms
