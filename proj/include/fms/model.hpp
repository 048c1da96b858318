#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fms {

class RngStream;

enum class Activation { identity, relu, tanh };
enum class Loss { softmax_cross_entropy, quadratic };

std::string_view to_string(Activation a);
std::string_view to_string(Loss l);
Activation parse_activation(std::string_view s);
Loss parse_loss(std::string_view s);

/// Fully connected network. layer_dims lists the output width of every
/// layer; the last entry is the class count. The activation is applied to
/// hidden layers only, the last layer emits logits (or raw outputs for the
/// quadratic loss).
///
/// Parameter layout, per layer in order: weights as fan_out rows of fan_in
/// entries, then fan_out biases.
struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> layer_dims;
  Activation activation = Activation::tanh;
  Loss loss = Loss::softmax_cross_entropy;

  std::size_t num_classes() const { return layer_dims.empty() ? 0 : layer_dims.back(); }
  std::size_t param_count() const;
  /// Throws ContractViolation when the spec is unusable.
  void validate() const;

  bool operator==(const ModelSpec&) const = default;
};

struct Example {
  std::vector<double> features;
  std::uint32_t label = 0;

  bool operator==(const Example&) const = default;
};

/// Non-owning view of a list of examples. Examples must outlive the batch.
class Batch {
 public:
  Batch() = default;
  explicit Batch(std::span<const Example> examples);
  explicit Batch(std::vector<std::reference_wrapper<const Example>> examples)
      : examples_(std::move(examples)) {}

  std::size_t size() const { return examples_.size(); }
  bool empty() const { return examples_.empty(); }
  const Example& operator[](std::size_t i) const { return examples_[i].get(); }
  void push_back(const Example& e) { examples_.emplace_back(e); }

 private:
  std::vector<std::reference_wrapper<const Example>> examples_;
};

/// Concatenation of batches, in order.
Batch join_batches(std::span<const Batch> batches);

struct ParamVector {
  std::vector<double> values;

  ParamVector() = default;
  explicit ParamVector(std::vector<double> v) : values(std::move(v)) {}
  static ParamVector zeros(std::size_t dim) { return ParamVector(std::vector<double>(dim, 0.0)); }

  std::size_t dim() const { return values.size(); }
  bool all_finite() const;
  bool operator==(const ParamVector&) const = default;
};

/// Raw loss gradient, never pre-scaled by a learning rate.
struct Gradient {
  std::vector<double> values;

  Gradient() = default;
  explicit Gradient(std::vector<double> v) : values(std::move(v)) {}

  std::size_t dim() const { return values.size(); }
  bool operator==(const Gradient&) const = default;
};

namespace vec {
double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
std::vector<double> sub(std::span<const double> a, std::span<const double> b);
bool all_finite(std::span<const double> a);
}  // namespace vec

/// Mean loss over the batch.
double forward_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

/// Exact gradient of forward_loss by backpropagation.
Gradient gradient(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

/// Loss and gradient from a single pass.
struct LossAndGradient {
  double loss;
  Gradient grad;
};
LossAndGradient loss_and_gradient(const ModelSpec& spec, const ParamVector& params,
                                  const Batch& batch);

/// Network outputs for one feature vector (logits for softmax models).
std::vector<double> predict(const ModelSpec& spec, const ParamVector& params,
                            std::span<const double> features);

/// Result of plain SGD over a fixed batch sequence. gradients[j] is the raw
/// gradient at iterates[j] on batch j. Iterates are only retained on request.
struct SgdTrajectory {
  ParamVector final_params;
  std::vector<Gradient> gradients;
  std::vector<ParamVector> iterates;
};

/// theta_j = theta_{j-1} - beta * grad L(theta_{j-1}, batch_j) for every batch.
/// Throws DivergenceError with the 1-based step index on non-finite iterates.
SgdTrajectory sgd_trajectory(const ModelSpec& spec, const ParamVector& params,
                             std::span<const Batch> batches, double beta,
                             bool keep_iterates = false);

inline constexpr std::size_t kMamlOracleMaxDim = 2000;

/// Central finite-difference gradient of theta -> L(U_K(theta), eval_batch),
/// where U_K replays sgd_trajectory over `batches`. One coordinate perturbed
/// at a time. When eval_batch is absent the union of the inner batches is
/// used. Throws CapacityError above kMamlOracleMaxDim parameters.
Gradient maml_gradient_oracle(const ModelSpec& spec, const ParamVector& params,
                              std::span<const Batch> batches,
                              const std::optional<Batch>& eval_batch, double beta,
                              double fd_step);

/// Glorot-uniform weights, zero biases.
ParamVector init_params(const ModelSpec& spec, RngStream& rng);

}  // namespace fms
