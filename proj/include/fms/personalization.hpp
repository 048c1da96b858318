#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fms/data.hpp"
#include "fms/model.hpp"

namespace fms {

class RngStream;

enum class PersonalizationOptimizer { sgd, adam };

std::string_view to_string(PersonalizationOptimizer o);
PersonalizationOptimizer parse_personalization_optimizer(std::string_view s);

struct PersonalizationConfig {
  PersonalizationOptimizer optimizer = PersonalizationOptimizer::sgd;
  double lr = 0.02;
  std::size_t epochs = 1;
  std::size_t batch_size = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Adam with its usual defaults (lr 1e-3).
  static PersonalizationConfig adam_defaults(std::size_t epochs, std::size_t batch_size = 100);

  void validate() const;
  bool operator==(const PersonalizationConfig&) const = default;
};

struct ClientOutcome {
  ClientId client;
  double initial_acc = 0.0;
  double personalized_acc = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  bool diverged = false;
};

/// Aggregates are unweighted over clients, population standard deviation.
struct PersonalizationReport {
  std::vector<ClientOutcome> outcomes;
  double mean_initial = 0.0;
  double std_initial = 0.0;
  double mean_personalized = 0.0;
  double std_personalized = 0.0;
  /// Fraction of clients whose personalized accuracy is below the initial one.
  double negative_fraction = 0.0;
  std::size_t diverged_count = 0;
};

/// Builds the aggregates. Sums run in client-id order so the result does not
/// depend on the order of `outcomes`.
PersonalizationReport make_report(std::vector<ClientOutcome> outcomes);

/// Index of the largest output; ties go to the lowest class index.
std::uint32_t predict_class(const ModelSpec& spec, const ParamVector& params,
                            std::span<const double> features);

double evaluate_accuracy(const ModelSpec& spec, const ParamVector& params,
                         std::span<const Example> examples);

struct PersonalizedModel {
  ParamVector params;
  /// True if an update produced non-finite values; params then hold the last
  /// finite iterate.
  bool diverged = false;
};

/// cfg.epochs epochs of the configured optimizer on client.train, shuffled
/// per epoch from `rng` and chunked at cfg.batch_size.
PersonalizedModel personalize(const ModelSpec& spec, const ParamVector& params,
                              const ClientDataset& client, const PersonalizationConfig& cfg,
                              RngStream& rng);

/// Personalizes every client of `which` and scores initial and personalized
/// models on the client's test split. Client c uses the stream
/// (seed, personalize, stream_tag, c).
PersonalizationReport eval_population(const ModelSpec& spec, const ParamVector& params,
                                      const FederatedDataset& ds, Population which,
                                      const PersonalizationConfig& cfg, std::uint64_t seed,
                                      std::uint64_t stream_tag = 0);

struct NamedPersonalizer {
  std::string name;
  PersonalizationConfig config;  // epochs is ignored by epochs_sweep
};

struct SweepRow {
  std::string optimizer;
  std::size_t epochs = 0;
  double mean_personalized = 0.0;
  double std_personalized = 0.0;
};

/// Mean personalized accuracy after 1..max_epochs epochs for each optimizer
/// (rows for 0 epochs prepended when include_zero). Row k of an optimizer is
/// identical to eval_population with epochs = k and the same seed and tag.
std::vector<SweepRow> epochs_sweep(const ModelSpec& spec, const ParamVector& params,
                                   const FederatedDataset& ds, Population which,
                                   std::span<const NamedPersonalizer> optimizers,
                                   std::size_t max_epochs, std::uint64_t seed,
                                   std::uint64_t stream_tag = 0, bool include_zero = false);

}  // namespace fms
