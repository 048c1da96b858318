#include "fms/optimizers.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "fms/errors.hpp"
#include "fms/rng.hpp"

namespace fms {

std::string_view to_string(ServerOptimizerKind k) {
  switch (k) {
    case ServerOptimizerKind::sgd: return "sgd";
    case ServerOptimizerKind::momentum: return "momentum";
    case ServerOptimizerKind::adam: return "adam";
  }
  return "?";
}

ServerOptimizerKind parse_server_optimizer(std::string_view s) {
  if (s == "sgd") return ServerOptimizerKind::sgd;
  if (s == "momentum") return ServerOptimizerKind::momentum;
  if (s == "adam") return ServerOptimizerKind::adam;
  throw ContractViolation("unknown server optimizer '" + std::string(s) + "'");
}

void ServerOptimizerConfig::validate() const {
  if (!(lr > 0.0)) throw ContractViolation("server.lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw ContractViolation("server.momentum must lie in [0, 1)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ContractViolation("server adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ContractViolation("server.adam_eps must be positive");
}

ServerOptimizerState ServerOptimizerState::fresh(const ServerOptimizerConfig& config,
                                                 std::size_t dim) {
  config.validate();
  ServerOptimizerState s;
  s.config = config;
  switch (config.kind) {
    case ServerOptimizerKind::sgd: break;
    case ServerOptimizerKind::momentum: s.velocity.assign(dim, 0.0); break;
    case ServerOptimizerKind::adam:
      s.first_moment.assign(dim, 0.0);
      s.second_moment.assign(dim, 0.0);
      break;
  }
  return s;
}

void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (grad.size() != params.size() || state.m.size() != params.size())
    throw ContractViolation("adam_step: dimension mismatch");
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

std::pair<ParamVector, ServerOptimizerState> server_apply(const ServerOptimizerState& state,
                                                          const ParamVector& params,
                                                          std::span<const double> delta) {
  if (delta.size() != params.dim())
    throw ContractViolation("server_apply: update dimension " + std::to_string(delta.size()) +
                            " != parameter dimension " + std::to_string(params.dim()));
  if (!vec::all_finite(delta)) throw NumericError("server_apply: non-finite aggregated update");

  ParamVector out = params;
  ServerOptimizerState next = state;
  const double lr = state.config.lr;
  switch (state.config.kind) {
    case ServerOptimizerKind::sgd:
      vec::axpy(lr, delta, out.values);
      break;
    case ServerOptimizerKind::momentum: {
      if (next.velocity.size() != delta.size())
        throw ContractViolation("server_apply: momentum buffer dimension mismatch");
      const double mu = state.config.momentum;
      for (std::size_t i = 0; i < delta.size(); ++i) {
        next.velocity[i] = mu * next.velocity[i] + delta[i];
        out.values[i] += lr * next.velocity[i];
      }
      break;
    }
    case ServerOptimizerKind::adam: {
      if (next.first_moment.size() != delta.size())
        throw ContractViolation("server_apply: adam buffer dimension mismatch");
      std::vector<double> g(delta.size());
      for (std::size_t i = 0; i < delta.size(); ++i) g[i] = -delta[i];
      AdamState adam{std::move(next.first_moment), std::move(next.second_moment), next.step_count};
      adam_step(out.values, g, adam, lr, state.config.adam_beta1, state.config.adam_beta2,
                state.config.adam_eps);
      next.first_moment = std::move(adam.m);
      next.second_moment = std::move(adam.v);
      break;
    }
  }
  ++next.step_count;
  if (!out.all_finite()) throw NumericError("server_apply: non-finite parameters");
  return {std::move(out), std::move(next)};
}

void ClientOptimizerConfig::validate() const {
  if (!(lr >= 0.0)) throw ContractViolation("client.lr must be non-negative");
  if (batch_size == 0) throw ContractViolation("client.batch_size must be positive");
}

namespace {

void append_epoch(const ClientDataset& client, std::size_t batch_size, RngStream& rng,
                  std::vector<std::size_t>& order, std::vector<Batch>& out, std::size_t limit) {
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span(order));
  for (std::size_t start = 0; start < order.size() && out.size() < limit; start += batch_size) {
    Batch b;
    const std::size_t end = std::min(order.size(), start + batch_size);
    for (std::size_t k = start; k < end; ++k) b.push_back(client.train[order[k]]);
    out.push_back(std::move(b));
  }
}

}  // namespace

std::vector<Batch> make_client_batches(const ClientDataset& client, std::size_t epochs,
                                       const ClientOptimizerConfig& cfg, RngStream& rng) {
  cfg.validate();
  if (client.train.empty()) throw ContractViolation("make_client_batches: client has no train data");
  std::vector<Batch> out;
  std::vector<std::size_t> order(client.train.size());
  for (std::size_t e = 0; e < epochs; ++e)
    append_epoch(client, cfg.batch_size, rng, order, out, static_cast<std::size_t>(-1));
  return out;
}

std::vector<Batch> make_client_step_batches(const ClientDataset& client, std::size_t steps,
                                            const ClientOptimizerConfig& cfg, RngStream& rng) {
  cfg.validate();
  if (client.train.empty()) throw ContractViolation("make_client_step_batches: client has no train data");
  std::vector<Batch> out;
  std::vector<std::size_t> order(client.train.size());
  while (out.size() < steps) append_epoch(client, cfg.batch_size, rng, order, out, steps);
  return out;
}

}  // namespace fms
