#include "fms/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "fms/errors.hpp"

namespace fms {

DecompositionReport decompose_round(const RoundTrace& trace) {
  if (trace.clients.empty())
    throw PreconditionError("round " + std::to_string(trace.round) +
                            " has no per-client trajectories; rerun with tracing enabled");
  const double w0 = trace.clients.front().weight;
  for (const auto& c : trace.clients)
    if (c.weight != w0)
      throw PreconditionError(
          "round " + std::to_string(trace.round) +
          " aggregates clients with different weights; the FedSGD + FOMAML decomposition of the "
          "FedAvg update assumes identical (uniform) client weights");
  if (trace.algorithm == Algorithm::fomaml)
    throw PreconditionError("round " + std::to_string(trace.round) +
                            " is a FOMAML round; client deltas are not sums of local steps");
  const std::size_t k = trace.clients.front().step_gradients.size();
  for (const auto& c : trace.clients) {
    if (c.step_gradients.empty())
      throw PreconditionError("round " + std::to_string(trace.round) + " trace is incomplete");
    if (c.step_gradients.size() != k)
      throw PreconditionError("round " + std::to_string(trace.round) +
                              ": clients ran different numbers of local steps; the decomposition "
                              "needs a common K");
  }

  DecompositionReport rep;
  rep.round = trace.round;
  rep.clients = trace.clients.size();
  rep.steps = k;

  const double inv_t = 1.0 / static_cast<double>(trace.clients.size());
  rep.g_fedavg.assign(trace.clients.front().delta.size(), 0.0);
  for (const auto& c : trace.clients) vec::axpy(inv_t, c.delta, rep.g_fedavg);

  rep.g_fedsgd = fomaml_update(trace.clients, 0);
  for (std::size_t j = 1; j < k; ++j) rep.g_fomaml_by_j.push_back(fomaml_update(trace.clients, j));

  std::vector<double> residual = vec::sub(rep.g_fedavg, rep.g_fedsgd);
  for (const auto& g : rep.g_fomaml_by_j) vec::axpy(-1.0, g, residual);
  rep.residual_norm = vec::norm(residual);
  return rep;
}

GapResult fomaml_maml_gap(const ModelSpec& spec, const ParamVector& params,
                          std::span<const Batch> task_batches, const std::optional<Batch>& eval_batch,
                          double beta, double fd_step) {
  GapResult r;
  r.maml = maml_gradient_oracle(spec, params, task_batches, eval_batch, beta, fd_step);
  const Batch eval = eval_batch ? *eval_batch : join_batches(task_batches);
  const ParamVector adapted =
      task_batches.empty() ? params : sgd_trajectory(spec, params, task_batches, beta).final_params;
  r.fomaml = gradient(spec, adapted, eval);
  r.gap_norm = vec::norm(vec::sub(r.maml.values, r.fomaml.values));
  const double denom = vec::norm(r.maml.values) * vec::norm(r.fomaml.values);
  r.cosine = denom > 0.0 ? vec::dot(r.maml.values, r.fomaml.values) / denom : 1.0;
  return r;
}

double metric_value(const EvalSnapshot& s, Metric m) {
  return m == Metric::initial ? s.mean_initial : s.mean_personalized;
}

std::optional<std::size_t> rounds_to_threshold(std::span<const EvalSnapshot> snapshots, Metric metric,
                                               double threshold) {
  if (snapshots.empty()) throw ContractViolation("rounds_to_threshold: run has no snapshots");
  for (const EvalSnapshot& s : snapshots)
    if (metric_value(s, metric) >= threshold) return s.round;
  return std::nullopt;
}

ThresholdStats threshold_stats(std::span<const std::optional<std::size_t>> per_replica,
                               double threshold) {
  ThresholdStats s;
  s.threshold = threshold;
  s.per_replica.assign(per_replica.begin(), per_replica.end());
  double sum = 0.0;
  for (const auto& r : per_replica) {
    if (!r) continue;
    sum += static_cast<double>(*r);
    ++s.reached_count;
  }
  if (s.reached_count > 0) s.mean_round = sum / static_cast<double>(s.reached_count);
  return s;
}

std::string format_threshold(const ThresholdStats& s) {
  if (!s.mean_round) return "Never";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f(%zu)", *s.mean_round, s.reached_count);
  return buf;
}

ReplicaStats replica_stats(std::string metric, std::vector<double> values) {
  if (values.empty()) throw ContractViolation("replica_stats: no values");
  ReplicaStats s;
  s.metric = std::move(metric);
  s.count = values.size();
  // Sorted summation makes the result independent of replica order.
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  for (double v : sorted) sum += v - sorted.front();
  s.mean = sorted.front() + sum / static_cast<double>(s.count);
  double var = 0.0;
  for (double v : sorted) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(s.count));
  s.values = std::move(values);
  return s;
}

std::string format_mean_std(double mean, double std, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f (%.*f)", decimals, mean, decimals, std);
  return buf;
}

ReplicaAggregate aggregate_replicas(std::span<const std::vector<EvalSnapshot>> runs, Metric metric) {
  if (runs.empty()) throw ContractViolation("aggregate_replicas: no runs");
  const auto& first = runs.front();
  if (first.empty()) throw ContractViolation("aggregate_replicas: run has no snapshots");
  for (const auto& r : runs) {
    if (r.size() != first.size())
      throw ContractViolation("aggregate_replicas: runs have different snapshot schedules");
    for (std::size_t i = 0; i < r.size(); ++i)
      if (r[i].round != first[i].round)
        throw ContractViolation("aggregate_replicas: runs have different snapshot schedules");
  }
  const std::string name = metric == Metric::initial ? "initial" : "personalized";
  ReplicaAggregate agg;
  for (std::size_t i = 0; i < first.size(); ++i) {
    std::vector<double> values;
    for (const auto& r : runs) values.push_back(metric_value(r[i], metric));
    agg.rounds.push_back(first[i].round);
    agg.per_snapshot.push_back(replica_stats(name, std::move(values)));
  }
  agg.final = agg.per_snapshot.back();
  return agg;
}

}  // namespace fms
