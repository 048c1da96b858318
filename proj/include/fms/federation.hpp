#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fms/data.hpp"
#include "fms/model.hpp"
#include "fms/optimizers.hpp"
#include "fms/personalization.hpp"

namespace fms {

class RngStream;

/// fedavg: E local epochs. reptile: K local steps. fedsgd: one step.
/// fomaml: K + 1 steps, contributing only the scaled (K+1)th gradient.
enum class Algorithm { fedavg, reptile, fedsgd, fomaml };
enum class Weighting { data_proportional, uniform };
enum class LocalMode { epochs, steps };

std::string_view to_string(Algorithm a);
std::string_view to_string(Weighting w);
Algorithm parse_algorithm(std::string_view s);
Weighting parse_weighting(std::string_view s);

struct RoundConfig {
  std::size_t clients_per_round = 5;
  Algorithm algorithm = Algorithm::fedavg;
  LocalMode local_mode = LocalMode::epochs;
  /// E for epochs mode, K for steps mode.
  std::size_t local_count = 1;
  /// K of fomaml(K).
  std::size_t fomaml_k = 0;
  ClientOptimizerConfig client;
  Weighting weighting = Weighting::data_proportional;
  /// Retain per-step gradients and iterates in the round trace.
  bool trace = false;

  void validate() const;

  static RoundConfig fedavg(std::size_t clients, std::size_t epochs, ClientOptimizerConfig client);
  static RoundConfig reptile(std::size_t clients, std::size_t steps, ClientOptimizerConfig client);
  static RoundConfig fedsgd(std::size_t clients, ClientOptimizerConfig client);
  static RoundConfig fomaml(std::size_t clients, std::size_t k, ClientOptimizerConfig client);

  bool operator==(const RoundConfig&) const = default;
};

struct ClientUpdateResult {
  ClientId client;
  /// theta_i - theta for fedavg/reptile/fedsgd; -beta * g_{K+1} for fomaml.
  std::vector<double> delta;
  double weight = 1.0;
  double beta = 0.0;
  /// Raw gradients grad L(theta_{j-1}, b_j), j = 1..steps (tracing only).
  std::vector<Gradient> step_gradients;
  /// theta_{j-1}, j = 1..steps (tracing only).
  std::vector<ParamVector> step_params;
};

struct EvalSnapshot {
  std::size_t round = 0;
  double mean_initial = 0.0;
  double std_initial = 0.0;
  double mean_personalized = 0.0;
  double std_personalized = 0.0;
  double wallclock_ms = 0.0;

  bool operator==(const EvalSnapshot&) const = default;
};

struct RoundTrace {
  /// 1-based, counted across stages.
  std::size_t round = 0;
  Algorithm algorithm = Algorithm::fedavg;
  Weighting weighting = Weighting::data_proportional;
  double beta = 0.0;
  std::vector<ClientId> sampled;
  /// Per-client results; kept only when tracing.
  std::vector<ClientUpdateResult> clients;
  /// Sum_i w_i g_i / Sum_i w_i over the sampled clients in ascending id order.
  std::vector<double> aggregate;
};

/// M distinct ids, uniformly without replacement, returned in ascending order.
std::vector<ClientId> sample_clients(std::span<const ClientId> train_client_ids, std::size_t m,
                                     RngStream& rng);

/// FedAvg ClientUpdate: SGD over `epochs` shuffled passes.
ClientUpdateResult client_update(const ModelSpec& spec, const ParamVector& params, ClientId id,
                                 const ClientDataset& client, std::size_t epochs,
                                 const ClientOptimizerConfig& cfg, RngStream& rng, bool trace,
                                 Weighting weighting = Weighting::data_proportional);

/// Reptile InnerLoop: exactly `steps` SGD steps; weight is always 1.
ClientUpdateResult inner_loop_reptile(const ModelSpec& spec, const ParamVector& params,
                                      ClientId id, const ClientDataset& client, std::size_t steps,
                                      const ClientOptimizerConfig& cfg, RngStream& rng,
                                      bool trace);

/// (1/T) Sum_i (-beta * g^i_{K+1}) over traced client trajectories.
/// k = 0 gives the FedSGD update.
std::vector<double> fomaml_update(std::span<const ClientUpdateResult> trajectories, std::size_t k);

/// Weighted mean of client deltas; clients must be in ascending id order.
std::vector<double> aggregate_updates(std::span<const ClientUpdateResult> results);

/// Stream used for client `id`'s batches in round `round`.
RngStream client_batch_stream(std::uint64_t seed, std::size_t round, ClientId id);

struct RoundResult {
  ParamVector params;
  ServerOptimizerState server;
  RoundTrace trace;
};

/// One round: sample, local updates, weighted aggregation, server step.
RoundResult run_round(const ModelSpec& spec, const ParamVector& params,
                      const FederatedDataset& ds, const RoundConfig& cfg,
                      const ServerOptimizerState& server, std::uint64_t seed, std::size_t round);

struct StageConfig {
  RoundConfig round;
  std::size_t rounds = 0;
  ServerOptimizerConfig server;

  bool operator==(const StageConfig&) const = default;
};

struct EvalConfig {
  PersonalizationConfig personalization;
  /// Snapshot cadence in rounds; 0 = final round only.
  std::size_t eval_every = 10;
  Population population = Population::eval_clients;
  /// Checkpoint cadence in rounds; 0 = none besides the final parameters.
  std::size_t checkpoint_every = 0;
  bool record_wallclock = false;
};

struct TrainingRun {
  std::uint64_t seed = 0;
  std::vector<StageConfig> stages;
  ParamVector initial_params;
  ParamVector final_params;
  std::vector<RoundTrace> rounds;
  std::vector<EvalSnapshot> snapshots;
  std::vector<std::pair<std::size_t, ParamVector>> checkpoints;
  /// Set when a round failed; everything above covers the rounds before it.
  std::optional<std::string> failure;

  std::size_t completed_rounds() const { return rounds.size(); }
  bool ok() const { return !failure.has_value(); }
};

/// Two-stage personalized FedAvg: stage1 (normally FedAvg with a momentum
/// server) then stage2 (normally Reptile with an Adam server), each with a
/// fresh server-optimizer state. Round numbers, and hence random streams,
/// continue across stages.
TrainingRun run_personalized_fedavg(const ModelSpec& spec, const FederatedDataset& ds,
                                    const StageConfig& stage1, const StageConfig& stage2,
                                    const EvalConfig& eval, std::uint64_t seed);

/// Appends one more stage to a finished run. Equal, bit for bit, to having
/// included the stage in the original call.
TrainingRun continue_with_stage(TrainingRun base, const ModelSpec& spec,
                                const FederatedDataset& ds, const StageConfig& stage,
                                const EvalConfig& eval);

ParamVector initial_params_for(const ModelSpec& spec, std::uint64_t seed);

}  // namespace fms
