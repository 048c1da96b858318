#include "fms/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fms/errors.hpp"
#include "fms/rng.hpp"

namespace fms {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

std::string_view to_string(Loss l) {
  switch (l) {
    case Loss::softmax_cross_entropy: return "softmax_cross_entropy";
    case Loss::quadratic: return "quadratic";
  }
  return "?";
}

Activation parse_activation(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ContractViolation("unknown activation '" + std::string(s) + "'");
}

Loss parse_loss(std::string_view s) {
  if (s == "softmax_cross_entropy") return Loss::softmax_cross_entropy;
  if (s == "quadratic") return Loss::quadratic;
  throw ContractViolation("unknown loss '" + std::string(s) + "'");
}

std::size_t ModelSpec::param_count() const {
  std::size_t count = 0;
  std::size_t fan_in = input_dim;
  for (std::size_t fan_out : layer_dims) {
    count += (fan_in + 1) * fan_out;
    fan_in = fan_out;
  }
  return count;
}

void ModelSpec::validate() const {
  if (input_dim == 0) throw ContractViolation("model: input_dim must be positive");
  if (layer_dims.empty()) throw ContractViolation("model: at least one layer required");
  for (std::size_t d : layer_dims)
    if (d == 0) throw ContractViolation("model: layer widths must be positive");
  if (loss == Loss::quadratic && (activation != Activation::identity || layer_dims.size() != 1))
    throw ContractViolation("model: quadratic loss requires a single identity layer");
}

Batch::Batch(std::span<const Example> examples) {
  examples_.reserve(examples.size());
  for (const Example& e : examples) examples_.emplace_back(e);
}

Batch join_batches(std::span<const Batch> batches) {
  Batch out;
  for (const Batch& b : batches)
    for (std::size_t i = 0; i < b.size(); ++i) out.push_back(b[i]);
  return out;
}

bool ParamVector::all_finite() const { return vec::all_finite(values); }

namespace vec {

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractViolation("vec::dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ContractViolation("vec::axpy: dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

std::vector<double> sub(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractViolation("vec::sub: dimension mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace vec

namespace {

struct LayerView {
  std::size_t fan_in;
  std::size_t fan_out;
  std::size_t weight_offset;
  std::size_t bias_offset;
};

std::vector<LayerView> layer_views(const ModelSpec& spec) {
  std::vector<LayerView> views;
  std::size_t offset = 0;
  std::size_t fan_in = spec.input_dim;
  for (std::size_t fan_out : spec.layer_dims) {
    views.push_back({fan_in, fan_out, offset, offset + fan_in * fan_out});
    offset += (fan_in + 1) * fan_out;
    fan_in = fan_out;
  }
  return views;
}

double activate(Activation a, double z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
  }
  return z;
}

// Derivative expressed through the pre-activation z and output y.
double activate_derivative(Activation a, double z, double y) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - y * y;
  }
  return 1.0;
}

void check_inputs(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  spec.validate();
  if (params.dim() != spec.param_count())
    throw ContractViolation("parameter dimension " + std::to_string(params.dim()) +
                            " does not match model parameter count " +
                            std::to_string(spec.param_count()));
  if (batch.empty()) throw ContractViolation("batch must be non-empty");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].features.size() != spec.input_dim)
      throw ContractViolation("example feature length " +
                              std::to_string(batch[i].features.size()) + " != input_dim " +
                              std::to_string(spec.input_dim));
    if (batch[i].label >= spec.num_classes())
      throw ContractViolation("example label " + std::to_string(batch[i].label) +
                              " out of range");
  }
}

// Per-call scratch space: pre-activations and outputs per layer.
struct Workspace {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> out;
  std::vector<double> delta;
  std::vector<double> delta_prev;

  explicit Workspace(const std::vector<LayerView>& layers) {
    for (const auto& l : layers) {
      pre.emplace_back(l.fan_out);
      out.emplace_back(l.fan_out);
    }
  }
};

void forward(const ModelSpec& spec, const std::vector<LayerView>& layers,
             std::span<const double> theta, std::span<const double> x, Workspace& ws) {
  std::span<const double> input = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerView& lv = layers[l];
    const bool last = l + 1 == layers.size();
    for (std::size_t o = 0; o < lv.fan_out; ++o) {
      const double* w = theta.data() + lv.weight_offset + o * lv.fan_in;
      double z = theta[lv.bias_offset + o];
      for (std::size_t i = 0; i < lv.fan_in; ++i) z += w[i] * input[i];
      ws.pre[l][o] = z;
      ws.out[l][o] = last ? z : activate(spec.activation, z);
    }
    input = ws.out[l];
  }
}

// Fills ws.delta with dLoss/dOutput of the final layer and returns the loss.
double output_loss(const ModelSpec& spec, std::span<const double> out, std::uint32_t label,
                   std::vector<double>& delta) {
  delta.assign(out.size(), 0.0);
  if (spec.loss == Loss::quadratic) {
    double loss = 0.0;
    for (std::size_t c = 0; c < out.size(); ++c) {
      const double r = out[c] - (c == label ? 1.0 : 0.0);
      loss += 0.5 * r * r;
      delta[c] = r;
    }
    return loss;
  }
  const double zmax = *std::max_element(out.begin(), out.end());
  double sum = 0.0;
  for (std::size_t c = 0; c < out.size(); ++c) {
    delta[c] = std::exp(out[c] - zmax);
    sum += delta[c];
  }
  for (double& d : delta) d /= sum;
  delta[label] -= 1.0;
  return zmax + std::log(sum) - out[label];
}

}  // namespace

LossAndGradient loss_and_gradient(const ModelSpec& spec, const ParamVector& params,
                                  const Batch& batch) {
  check_inputs(spec, params, batch);
  const auto layers = layer_views(spec);
  Workspace ws(layers);
  std::vector<double> grad(params.dim(), 0.0);
  std::span<const double> theta = params.values;
  double total = 0.0;

  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Example& ex = batch[n];
    forward(spec, layers, theta, ex.features, ws);
    total += output_loss(spec, ws.out.back(), ex.label, ws.delta);

    for (std::size_t l = layers.size(); l-- > 0;) {
      const LayerView& lv = layers[l];
      std::span<const double> input =
          l == 0 ? std::span<const double>(ex.features) : std::span<const double>(ws.out[l - 1]);
      for (std::size_t o = 0; o < lv.fan_out; ++o) {
        const double d = ws.delta[o];
        if (d == 0.0) continue;
        double* gw = grad.data() + lv.weight_offset + o * lv.fan_in;
        for (std::size_t i = 0; i < lv.fan_in; ++i) gw[i] += d * input[i];
        grad[lv.bias_offset + o] += d;
      }
      if (l == 0) break;
      ws.delta_prev.assign(lv.fan_in, 0.0);
      for (std::size_t o = 0; o < lv.fan_out; ++o) {
        const double d = ws.delta[o];
        if (d == 0.0) continue;
        const double* w = theta.data() + lv.weight_offset + o * lv.fan_in;
        for (std::size_t i = 0; i < lv.fan_in; ++i) ws.delta_prev[i] += w[i] * d;
      }
      for (std::size_t i = 0; i < lv.fan_in; ++i)
        ws.delta_prev[i] *= activate_derivative(spec.activation, ws.pre[l - 1][i], ws.out[l - 1][i]);
      std::swap(ws.delta, ws.delta_prev);
    }
  }

  const double inv = 1.0 / static_cast<double>(batch.size());
  for (double& g : grad) g *= inv;
  const double loss = total * inv;
  if (!std::isfinite(loss) || !vec::all_finite(grad))
    throw NumericError("non-finite loss or gradient");
  return {loss, Gradient(std::move(grad))};
}

double forward_loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  check_inputs(spec, params, batch);
  const auto layers = layer_views(spec);
  Workspace ws(layers);
  double total = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    forward(spec, layers, params.values, batch[n].features, ws);
    total += output_loss(spec, ws.out.back(), batch[n].label, ws.delta);
  }
  const double loss = total / static_cast<double>(batch.size());
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");
  return loss;
}

Gradient gradient(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  return loss_and_gradient(spec, params, batch).grad;
}

std::vector<double> predict(const ModelSpec& spec, const ParamVector& params,
                            std::span<const double> features) {
  spec.validate();
  if (params.dim() != spec.param_count() || features.size() != spec.input_dim)
    throw ContractViolation("predict: dimension mismatch");
  const auto layers = layer_views(spec);
  Workspace ws(layers);
  forward(spec, layers, params.values, features, ws);
  return ws.out.back();
}

SgdTrajectory sgd_trajectory(const ModelSpec& spec, const ParamVector& params,
                             std::span<const Batch> batches, double beta, bool keep_iterates) {
  if (!(beta >= 0.0)) throw ContractViolation("sgd_trajectory: beta must be non-negative");
  if (batches.empty()) throw ContractViolation("sgd_trajectory: no batches");
  SgdTrajectory traj;
  traj.final_params = params;
  traj.gradients.reserve(batches.size());
  for (std::size_t j = 0; j < batches.size(); ++j) {
    if (keep_iterates) traj.iterates.push_back(traj.final_params);
    Gradient g;
    try {
      g = gradient(spec, traj.final_params, batches[j]);
    } catch (const NumericError&) {
      throw DivergenceError(j + 1);
    }
    vec::axpy(-beta, g.values, traj.final_params.values);
    if (!traj.final_params.all_finite()) throw DivergenceError(j + 1);
    traj.gradients.push_back(std::move(g));
  }
  return traj;
}

Gradient maml_gradient_oracle(const ModelSpec& spec, const ParamVector& params,
                              std::span<const Batch> batches,
                              const std::optional<Batch>& eval_batch, double beta,
                              double fd_step) {
  if (params.dim() > kMamlOracleMaxDim)
    throw CapacityError("maml_gradient_oracle: " + std::to_string(params.dim()) +
                        " parameters exceed the oracle cap of " +
                        std::to_string(kMamlOracleMaxDim));
  if (!(fd_step > 0.0)) throw ContractViolation("maml_gradient_oracle: fd_step must be positive");
  const Batch eval = eval_batch ? *eval_batch : join_batches(batches);

  auto adapted_loss = [&](const ParamVector& theta) {
    if (batches.empty()) return forward_loss(spec, theta, eval);
    return forward_loss(spec, sgd_trajectory(spec, theta, batches, beta).final_params, eval);
  };

  std::vector<double> grad(params.dim());
  ParamVector probe = params;
  for (std::size_t i = 0; i < params.dim(); ++i) {
    const double orig = probe.values[i];
    probe.values[i] = orig + fd_step;
    const double up = adapted_loss(probe);
    probe.values[i] = orig - fd_step;
    const double down = adapted_loss(probe);
    probe.values[i] = orig;
    grad[i] = (up - down) / (2.0 * fd_step);
  }
  return Gradient(std::move(grad));
}

ParamVector init_params(const ModelSpec& spec, RngStream& rng) {
  spec.validate();
  ParamVector params = ParamVector::zeros(spec.param_count());
  for (const LayerView& lv : layer_views(spec)) {
    const double limit = std::sqrt(6.0 / static_cast<double>(lv.fan_in + lv.fan_out));
    for (std::size_t k = 0; k < lv.fan_in * lv.fan_out; ++k)
      params.values[lv.weight_offset + k] = rng.uniform(-limit, limit);
  }
  return params;
}

}  // namespace fms
