#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <vector>

#include "fms/model.hpp"

namespace fms {

struct ClientId {
  std::uint32_t value = 0;
  auto operator<=>(const ClientId&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, ClientId id) { return os << id.value; }

struct ClientDataset {
  std::vector<Example> train;
  std::vector<Example> test;

  /// Aggregation weight under data-proportional weighting: |train|.
  std::size_t weight() const { return train.size(); }
  bool operator==(const ClientDataset&) const = default;
};

enum class Population { train_clients, eval_clients };

struct FederatedDataset {
  std::map<ClientId, ClientDataset> clients;
  std::vector<ClientId> train_client_ids;
  std::vector<ClientId> eval_client_ids;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;

  const ClientDataset& client(ClientId id) const;
  const std::vector<ClientId>& ids(Population p) const {
    return p == Population::train_clients ? train_client_ids : eval_client_ids;
  }
  /// Throws ContractViolation if any structural invariant is broken.
  void validate() const;
  bool operator==(const FederatedDataset&) const = default;
};

struct SyntheticParams {
  std::uint64_t seed = 0;
  std::size_t num_clients = 20;
  std::size_t classes_per_client = 10;
  std::size_t examples_per_client = 100;
  std::size_t input_dim = 16;
  std::size_t num_classes = 10;
  /// 0 = i.i.d.-like clients, 1 = maximal label skew and style shift.
  double heterogeneity = 0.5;

  // Shape of the generator; the defaults are what the bundled configs use.
  double class_separation = 1.0;
  double noise_scale = 1.0;
  double style_scale = 1.0;
};

/// Per-client label mix from a Dirichlet over a random subset of
/// classes_per_client classes (concentration (1 - h) * 10 + 0.05 per class),
/// Gaussian class-conditional features shared across clients, and a
/// per-client affine style x -> (I + h * S_i) x + h * b_i. Every client is a
/// training client; use split_train_eval to hold some out.
FederatedDataset generate_synthetic(const SyntheticParams& params);

struct CsvSchema {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;
  bool has_header = false;
};

/// Rows are client_id,label,feature_0..feature_{d-1}. Blank lines and lines
/// starting with '#' are skipped.
FederatedDataset load_csv_dataset(const std::filesystem::path& path, const CsvSchema& schema);

/// Moves floor(eval_fraction * N) clients, chosen by a seeded shuffle, into
/// eval_client_ids. Both id lists come back sorted.
FederatedDataset split_train_eval(FederatedDataset ds, double eval_fraction, std::uint64_t seed);

/// Test examples held out of n examples of one client.
std::size_t test_count_for(std::size_t n);

struct DatasetSummary {
  std::size_t num_clients = 0;
  std::size_t train_clients = 0;
  std::size_t eval_clients = 0;
  std::size_t train_examples = 0;
  std::size_t test_examples = 0;
  std::vector<std::size_t> class_histogram;
};

DatasetSummary summarize(const FederatedDataset& ds);

/// Total-variation distance between the empirical label distributions of
/// two example sets.
double label_total_variation(std::span<const Example> a, std::span<const Example> b,
                             std::size_t num_classes);

}  // namespace fms
