#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fms/federation.hpp"
#include "fms/model.hpp"

namespace fms {

/// FedAvg's round update split into a FedSGD term plus FOMAML(j) terms,
/// j = 1..K-1, all built from the same recorded client trajectories.
///
/// Convention: client trajectories store raw gradients; every term here is
/// already multiplied by -beta, so g_fedavg = g_fedsgd + sum_j g_fomaml(j)
/// holds without further scaling.
struct DecompositionReport {
  std::size_t round = 0;
  std::size_t clients = 0;
  std::size_t steps = 0;  // common K
  std::vector<double> g_fedavg;
  std::vector<double> g_fedsgd;
  std::vector<std::vector<double>> g_fomaml_by_j;
  double residual_norm = 0.0;
};

/// Residual bound expected for any traced round in 64-bit arithmetic.
inline constexpr double kDecompositionTolerance = 1e-10;

/// Requires a traced round whose clients all ran the same number of steps
/// with identical weights; throws PreconditionError otherwise.
DecompositionReport decompose_round(const RoundTrace& trace);

struct GapResult {
  double gap_norm = 0.0;
  double cosine = 0.0;
  Gradient maml;
  Gradient fomaml;
};

/// Compares the finite-difference MAML gradient with the first-order one,
/// grad L(theta_K, eval_batch), for one client.
GapResult fomaml_maml_gap(const ModelSpec& spec, const ParamVector& params,
                          std::span<const Batch> task_batches, const std::optional<Batch>& eval_batch,
                          double beta, double fd_step = 1e-5);

enum class Metric { initial, personalized };

double metric_value(const EvalSnapshot& s, Metric m);

/// First snapshot round whose metric reaches the threshold; nullopt = never.
/// Throws ContractViolation when there are no snapshots.
std::optional<std::size_t> rounds_to_threshold(std::span<const EvalSnapshot> snapshots, Metric metric,
                                               double threshold);

struct ThresholdStats {
  double threshold = 0.8;
  std::vector<std::optional<std::size_t>> per_replica;
  /// Mean over replicas that reached the threshold.
  std::optional<double> mean_round;
  std::size_t reached_count = 0;
};

ThresholdStats threshold_stats(std::span<const std::optional<std::size_t>> per_replica,
                               double threshold);

/// "137.5(9)" or "Never".
std::string format_threshold(const ThresholdStats& s);

struct ReplicaStats {
  std::string metric;
  std::vector<double> values;
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t count = 0;
};

ReplicaStats replica_stats(std::string metric, std::vector<double> values);

/// "0.7879 (0.0316)"
std::string format_mean_std(double mean, double std, int decimals = 4);

struct ReplicaAggregate {
  std::vector<std::size_t> rounds;
  /// One entry per snapshot round.
  std::vector<ReplicaStats> per_snapshot;
  ReplicaStats final;
};

/// Per-snapshot mean/std of a metric across runs. Snapshot schedules must
/// match. Order of `runs` does not affect the result.
ReplicaAggregate aggregate_replicas(std::span<const std::vector<EvalSnapshot>> runs, Metric metric);

}  // namespace fms
