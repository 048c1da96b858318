#include "fms/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "fms/errors.hpp"
#include "fms/rng.hpp"

namespace fms {

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::fedavg: return "fedavg";
    case Algorithm::reptile: return "reptile";
    case Algorithm::fedsgd: return "fedsgd";
    case Algorithm::fomaml: return "fomaml";
  }
  return "?";
}

std::string_view to_string(Weighting w) {
  return w == Weighting::uniform ? "uniform" : "data_proportional";
}

Algorithm parse_algorithm(std::string_view s) {
  if (s == "fedavg") return Algorithm::fedavg;
  if (s == "reptile") return Algorithm::reptile;
  if (s == "fedsgd") return Algorithm::fedsgd;
  if (s == "fomaml") return Algorithm::fomaml;
  throw ContractViolation("unknown algorithm '" + std::string(s) + "'");
}

Weighting parse_weighting(std::string_view s) {
  if (s == "uniform") return Weighting::uniform;
  if (s == "data_proportional") return Weighting::data_proportional;
  throw ContractViolation("unknown weighting '" + std::string(s) + "'");
}

void RoundConfig::validate() const {
  client.validate();
  if (clients_per_round == 0) throw ContractViolation("clients_per_round must be positive");
  if (local_count == 0) throw ContractViolation("local epochs/steps must be positive");
  switch (algorithm) {
    case Algorithm::fedavg:
      if (local_mode != LocalMode::epochs)
        throw ContractViolation("fedavg runs local epochs, not steps");
      break;
    case Algorithm::reptile:
      if (local_mode != LocalMode::steps) throw ContractViolation("reptile runs local steps");
      break;
    case Algorithm::fedsgd:
      if (local_mode != LocalMode::steps || local_count != 1)
        throw ContractViolation("fedsgd requires exactly one local step");
      break;
    case Algorithm::fomaml:
      if (local_mode != LocalMode::steps || local_count < fomaml_k + 1)
        throw ContractViolation("fomaml(K) requires at least K+1 local steps");
      break;
  }
}

RoundConfig RoundConfig::fedavg(std::size_t clients, std::size_t epochs,
                                ClientOptimizerConfig client) {
  RoundConfig c;
  c.clients_per_round = clients;
  c.algorithm = Algorithm::fedavg;
  c.local_mode = LocalMode::epochs;
  c.local_count = epochs;
  c.client = client;
  c.weighting = Weighting::data_proportional;
  return c;
}

RoundConfig RoundConfig::reptile(std::size_t clients, std::size_t steps,
                                 ClientOptimizerConfig client) {
  RoundConfig c;
  c.clients_per_round = clients;
  c.algorithm = Algorithm::reptile;
  c.local_mode = LocalMode::steps;
  c.local_count = steps;
  c.client = client;
  c.weighting = Weighting::uniform;
  return c;
}

RoundConfig RoundConfig::fedsgd(std::size_t clients, ClientOptimizerConfig client) {
  RoundConfig c = reptile(clients, 1, client);
  c.algorithm = Algorithm::fedsgd;
  return c;
}

RoundConfig RoundConfig::fomaml(std::size_t clients, std::size_t k, ClientOptimizerConfig client) {
  RoundConfig c = reptile(clients, k + 1, client);
  c.algorithm = Algorithm::fomaml;
  c.fomaml_k = k;
  return c;
}

std::vector<ClientId> sample_clients(std::span<const ClientId> train_client_ids, std::size_t m,
                                     RngStream& rng) {
  if (m == 0 || m > train_client_ids.size())
    throw ContractViolation("sample_clients: cannot sample " + std::to_string(m) + " of " +
                            std::to_string(train_client_ids.size()) + " training clients");
  std::vector<ClientId> pool(train_client_ids.begin(), train_client_ids.end());
  std::sort(pool.begin(), pool.end());
  // Partial Fisher-Yates: the first m slots form the sample.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  std::sort(pool.begin(), pool.end());
  return pool;
}

namespace {

ClientUpdateResult run_local_sgd(const ModelSpec& spec, const ParamVector& params, ClientId id,
                                 std::span<const Batch> batches, double beta, bool trace) {
  ClientUpdateResult r;
  r.client = id;
  r.beta = beta;
  SgdTrajectory traj;
  try {
    traj = sgd_trajectory(spec, params, batches, beta, trace);
  } catch (const DivergenceError& e) {
    throw DivergenceError(e.step(), id.value);
  }
  r.delta = vec::sub(traj.final_params.values, params.values);
  if (trace) {
    // delta must equal -beta * sum of the recorded gradients up to rounding.
    std::vector<double> replay(params.dim(), 0.0);
    for (const Gradient& g : traj.gradients) vec::axpy(-beta, g.values, replay);
    double scale = 1.0;
    for (double v : params.values) scale = std::max(scale, std::abs(v));
    for (double v : traj.final_params.values) scale = std::max(scale, std::abs(v));
    const double tol = 1e-12 * scale * static_cast<double>(batches.size() + 1);
    for (std::size_t i = 0; i < replay.size(); ++i)
      if (std::abs(replay[i] - r.delta[i]) > tol)
        throw NumericError("client " + std::to_string(id.value) +
                           ": traced delta disagrees with recorded gradients");
    r.step_gradients = std::move(traj.gradients);
    r.step_params = std::move(traj.iterates);
  }
  return r;
}

}  // namespace

ClientUpdateResult client_update(const ModelSpec& spec, const ParamVector& params, ClientId id,
                                 const ClientDataset& client, std::size_t epochs,
                                 const ClientOptimizerConfig& cfg, RngStream& rng, bool trace,
                                 Weighting weighting) {
  if (client.train.empty()) throw ContractViolation("client_update: client has no train data");
  if (epochs == 0) throw ContractViolation("client_update: epochs must be positive");
  const auto batches = make_client_batches(client, epochs, cfg, rng);
  ClientUpdateResult r = run_local_sgd(spec, params, id, batches, cfg.lr, trace);
  r.weight = weighting == Weighting::uniform ? 1.0 : static_cast<double>(client.weight());
  return r;
}

ClientUpdateResult inner_loop_reptile(const ModelSpec& spec, const ParamVector& params,
                                      ClientId id, const ClientDataset& client, std::size_t steps,
                                      const ClientOptimizerConfig& cfg, RngStream& rng,
                                      bool trace) {
  if (client.train.empty()) throw ContractViolation("inner_loop_reptile: client has no train data");
  if (steps == 0) throw ContractViolation("inner_loop_reptile: K must be at least 1");
  const auto batches = make_client_step_batches(client, steps, cfg, rng);
  ClientUpdateResult r = run_local_sgd(spec, params, id, batches, cfg.lr, trace);
  r.weight = 1.0;
  return r;
}

std::vector<double> fomaml_update(std::span<const ClientUpdateResult> trajectories, std::size_t k) {
  if (trajectories.empty()) throw ContractViolation("fomaml_update: no client trajectories");
  const std::size_t dim = trajectories.front().delta.size();
  std::vector<double> out(dim, 0.0);
  for (const ClientUpdateResult& t : trajectories) {
    if (t.step_gradients.size() < k + 1)
      throw ContractViolation("fomaml_update: client " + std::to_string(t.client.value) +
                              " recorded " + std::to_string(t.step_gradients.size()) +
                              " gradients, FOMAML(" + std::to_string(k) + ") needs " +
                              std::to_string(k + 1));
    vec::axpy(-t.beta, t.step_gradients[k].values, out);
  }
  const double inv = 1.0 / static_cast<double>(trajectories.size());
  for (double& v : out) v *= inv;
  return out;
}

std::vector<double> aggregate_updates(std::span<const ClientUpdateResult> results) {
  if (results.empty()) throw ContractViolation("aggregate_updates: no client results");
  double total = 0.0;
  for (const auto& r : results) {
    if (!(r.weight > 0.0)) throw ContractViolation("aggregate_updates: weights must be positive");
    total += r.weight;
  }
  std::vector<double> out(results.front().delta.size(), 0.0);
  for (const auto& r : results) vec::axpy(r.weight / total, r.delta, out);
  return out;
}

RngStream client_batch_stream(std::uint64_t seed, std::size_t round, ClientId id) {
  return RngStream::derive(seed, StreamPurpose::client_batches, round, id.value);
}

RoundResult run_round(const ModelSpec& spec, const ParamVector& params,
                      const FederatedDataset& ds, const RoundConfig& cfg,
                      const ServerOptimizerState& server, std::uint64_t seed, std::size_t round) {
  cfg.validate();
  if (ds.train_client_ids.size() < cfg.clients_per_round)
    throw ContractViolation("run_round: " + std::to_string(cfg.clients_per_round) +
                            " clients per round but only " +
                            std::to_string(ds.train_client_ids.size()) + " training clients");

  RngStream sampler = RngStream::derive(seed, StreamPurpose::sample_clients, round);
  RoundTrace trace;
  trace.round = round;
  trace.algorithm = cfg.algorithm;
  trace.weighting = cfg.weighting;
  trace.beta = cfg.client.lr;
  trace.sampled = sample_clients(ds.train_client_ids, cfg.clients_per_round, sampler);

  // FOMAML needs the step record to pick out the (K+1)th gradient.
  const bool keep_steps = cfg.trace || cfg.algorithm == Algorithm::fomaml;
  std::vector<ClientUpdateResult> results;
  results.reserve(trace.sampled.size());
  for (ClientId id : trace.sampled) {
    const ClientDataset& client = ds.client(id);
    RngStream rng = client_batch_stream(seed, round, id);
    ClientUpdateResult r;
    switch (cfg.algorithm) {
      case Algorithm::fedavg:
        r = client_update(spec, params, id, client, cfg.local_count, cfg.client, rng, keep_steps,
                          cfg.weighting);
        break;
      case Algorithm::reptile:
      case Algorithm::fedsgd:
      case Algorithm::fomaml: {
        const std::size_t steps =
            cfg.algorithm == Algorithm::fomaml ? cfg.fomaml_k + 1 : cfg.local_count;
        r = inner_loop_reptile(spec, params, id, client, steps, cfg.client, rng, keep_steps);
        if (cfg.weighting == Weighting::data_proportional)
          r.weight = static_cast<double>(client.weight());
        if (cfg.algorithm == Algorithm::fomaml)
          r.delta = fomaml_update(std::span(&r, 1), cfg.fomaml_k);
        break;
      }
    }
    results.push_back(std::move(r));
  }

  trace.aggregate = aggregate_updates(results);
  auto [next_params, next_server] = server_apply(server, params, trace.aggregate);
  if (cfg.trace) trace.clients = std::move(results);
  return {std::move(next_params), std::move(next_server), std::move(trace)};
}

ParamVector initial_params_for(const ModelSpec& spec, std::uint64_t seed) {
  RngStream rng = RngStream::derive(seed, StreamPurpose::init);
  return init_params(spec, rng);
}

namespace {

void run_stage(TrainingRun& run, const ModelSpec& spec, const FederatedDataset& ds,
               const StageConfig& stage, const EvalConfig& eval) {
  stage.round.validate();
  run.stages.push_back(stage);
  if (stage.rounds == 0) return;
  ServerOptimizerState server = ServerOptimizerState::fresh(stage.server, spec.param_count());
  const auto started = std::chrono::steady_clock::now();
  const std::size_t first = run.rounds.size() + 1;
  const std::size_t last = run.rounds.size() + stage.rounds;
  for (std::size_t round = first; round <= last; ++round) {
    try {
      RoundResult rr = run_round(spec, run.final_params, ds, stage.round, server, run.seed, round);
      run.final_params = std::move(rr.params);
      server = std::move(rr.server);
      run.rounds.push_back(std::move(rr.trace));
    } catch (const Error& e) {
      run.failure = "round " + std::to_string(round) + ": " + e.what();
      return;
    }
    const bool snapshot = round == last || (eval.eval_every > 0 && round % eval.eval_every == 0);
    if (snapshot) {
      const PersonalizationReport rep = eval_population(
          spec, run.final_params, ds, eval.population, eval.personalization, run.seed, round);
      EvalSnapshot s{round, rep.mean_initial, rep.std_initial, rep.mean_personalized,
                     rep.std_personalized, 0.0};
      if (eval.record_wallclock)
        s.wallclock_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - started)
                             .count();
      run.snapshots.push_back(s);
    }
    if (eval.checkpoint_every > 0 && round % eval.checkpoint_every == 0)
      run.checkpoints.emplace_back(round, run.final_params);
  }
}

}  // namespace

TrainingRun continue_with_stage(TrainingRun base, const ModelSpec& spec,
                                const FederatedDataset& ds, const StageConfig& stage,
                                const EvalConfig& eval) {
  if (!base.ok()) throw ContractViolation("continue_with_stage: base run failed");
  run_stage(base, spec, ds, stage, eval);
  return base;
}

TrainingRun run_personalized_fedavg(const ModelSpec& spec, const FederatedDataset& ds,
                                    const StageConfig& stage1, const StageConfig& stage2,
                                    const EvalConfig& eval, std::uint64_t seed) {
  spec.validate();
  ds.validate();
  if (ds.input_dim != spec.input_dim || ds.num_classes != spec.num_classes())
    throw ContractViolation("dataset shape does not match the model");
  stage1.round.validate();
  stage2.round.validate();
  eval.personalization.validate();
  TrainingRun run;
  run.seed = seed;
  run.initial_params = initial_params_for(spec, seed);
  run.final_params = run.initial_params;
  run_stage(run, spec, ds, stage1, eval);
  if (run.ok()) run_stage(run, spec, ds, stage2, eval);
  return run;
}

}  // namespace fms
