#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace fms {

/// Purpose tags for stream derivation. Values are part of the reproducibility
/// contract; never renumber.
enum class StreamPurpose : std::uint64_t {
  init = 1,
  sample_clients = 2,
  client_batches = 3,
  personalize = 4,
  synthetic_data = 5,
  train_eval_split = 6,
  csv_split = 7,
};

/// Counter-based random stream. Each stream is a key; the n-th draw is
/// mix(key + n * golden_gamma) (SplitMix64). Streams for different
/// (purpose, round, client) keys are independent of evaluation order, so
/// clients can be simulated in any order or in parallel.
///
/// Distributions are implemented here rather than with <random> because the
/// standard distributions are implementation-defined and golden files must
/// not depend on the standard library in use.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : key_(key) {}

  static RngStream derive(std::uint64_t root, StreamPurpose purpose, std::uint64_t a = 0,
                          std::uint64_t b = 0);

  std::uint64_t key() const { return key_; }
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Gamma(shape, 1). shape must be positive.
  double gamma(double shape);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      using std::swap;
      swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace fms
