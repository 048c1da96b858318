#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fms/data.hpp"
#include "fms/model.hpp"
#include "fms/rng.hpp"

namespace testing {

inline std::vector<fms::Example> random_examples(std::size_t d, std::size_t classes, std::size_t n,
                                                 std::uint64_t seed) {
  fms::RngStream rng(fms::mix64(seed ^ 0x5eedULL));
  std::vector<fms::Example> out(n);
  for (auto& e : out) {
    e.features.resize(d);
    for (double& v : e.features) v = rng.normal();
    e.label = static_cast<std::uint32_t>(rng.below(classes));
  }
  return out;
}

inline fms::ParamVector random_params(const fms::ModelSpec& spec, std::uint64_t seed,
                                      double scale = 0.5) {
  fms::RngStream rng(fms::mix64(seed ^ 0xbeefULL));
  fms::ParamVector p = fms::ParamVector::zeros(spec.param_count());
  for (double& v : p.values) v = scale * rng.normal();
  return p;
}

/// N clients with `per_client` examples each; all are training clients.
inline fms::FederatedDataset small_dataset(std::size_t clients, std::size_t per_client,
                                           std::size_t d, std::size_t classes, std::uint64_t seed) {
  fms::SyntheticParams p;
  p.seed = seed;
  p.num_clients = clients;
  p.classes_per_client = classes;
  p.examples_per_client = per_client;
  p.input_dim = d;
  p.num_classes = classes;
  p.heterogeneity = 0.5;
  return fms::generate_synthetic(p);
}

/// Fresh, empty directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::current_path() / "test_scratch" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
