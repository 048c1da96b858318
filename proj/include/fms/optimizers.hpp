#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "fms/data.hpp"
#include "fms/model.hpp"

namespace fms {

class RngStream;

enum class ServerOptimizerKind { sgd, momentum, adam };

std::string_view to_string(ServerOptimizerKind k);
ServerOptimizerKind parse_server_optimizer(std::string_view s);

struct ServerOptimizerConfig {
  ServerOptimizerKind kind = ServerOptimizerKind::sgd;
  double lr = 1.0;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  bool operator==(const ServerOptimizerConfig&) const = default;
};

/// Server optimizer buffers. The aggregated client delta is treated as a
/// pseudo-gradient pointing downhill; Adam consumes its negation.
struct ServerOptimizerState {
  ServerOptimizerConfig config;
  std::vector<double> velocity;  // momentum
  std::vector<double> first_moment;  // adam m
  std::vector<double> second_moment;  // adam v
  std::uint64_t step_count = 0;

  static ServerOptimizerState fresh(const ServerOptimizerConfig& config, std::size_t dim);
  bool operator==(const ServerOptimizerState&) const = default;
};

/// sgd:      theta' = theta + lr * delta
/// momentum: v' = mu * v + delta; theta' = theta + lr * v'   (heavy ball)
/// adam:     bias-corrected Adam step on g = -delta with step size lr
std::pair<ParamVector, ServerOptimizerState> server_apply(const ServerOptimizerState& state,
                                                          const ParamVector& params,
                                                          std::span<const double> delta);

struct ClientOptimizerConfig {
  double lr = 0.02;
  std::size_t batch_size = 20;

  void validate() const;
  bool operator==(const ClientOptimizerConfig&) const = default;
};

/// `epochs` shuffled passes over client.train, each chunked at batch_size
/// with the short tail kept.
std::vector<Batch> make_client_batches(const ClientDataset& client, std::size_t epochs,
                                       const ClientOptimizerConfig& cfg, RngStream& rng);

/// First `steps` batches of the same epoch-by-epoch sequence that
/// make_client_batches draws from an identical stream.
std::vector<Batch> make_client_step_batches(const ClientDataset& client, std::size_t steps,
                                            const ClientOptimizerConfig& cfg, RngStream& rng);

/// Plain Adam for local (client-side) use.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state,
               double lr, double beta1, double beta2, double eps);

}  // namespace fms
