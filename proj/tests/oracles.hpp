#pragma once

// Reference computations used by the tests. Nothing here calls into the
// library's forward or backward passes.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fms/model.hpp"

namespace oracle {

using fms::Activation;
using fms::Example;
using fms::Loss;
using fms::ModelSpec;

/// Mean loss in long double, written directly from the layer layout.
inline long double mean_loss(const ModelSpec& spec, std::span<const double> params,
                             std::span<const Example> batch) {
  long double total = 0.0L;
  for (const Example& e : batch) {
    std::vector<long double> a(e.features.begin(), e.features.end());
    std::size_t off = 0;
    for (std::size_t l = 0; l < spec.layer_dims.size(); ++l) {
      const std::size_t in = a.size(), out = spec.layer_dims[l];
      std::vector<long double> z(out);
      for (std::size_t r = 0; r < out; ++r) {
        long double s = params[off + out * in + r];
        for (std::size_t c = 0; c < in; ++c) s += params[off + r * in + c] * a[c];
        z[r] = s;
      }
      off += out * in + out;
      const bool last = l + 1 == spec.layer_dims.size();
      if (!last) {
        for (auto& v : z) {
          if (spec.activation == Activation::tanh) v = std::tanh(v);
          if (spec.activation == Activation::relu) v = v > 0 ? v : 0;
        }
      }
      a = std::move(z);
    }
    if (spec.loss == Loss::softmax_cross_entropy) {
      const long double m = *std::max_element(a.begin(), a.end());
      long double se = 0.0L;
      for (long double v : a) se += std::exp(v - m);
      total += m + std::log(se) - a[e.label];
    } else {
      long double s = 0.0L;
      for (std::size_t c = 0; c < a.size(); ++c) {
        const long double d = a[c] - (c == e.label ? 1.0L : 0.0L);
        s += d * d;
      }
      total += 0.5L * s;
    }
  }
  return total / static_cast<long double>(batch.size());
}

/// Central differences of mean_loss.
inline std::vector<double> fd_gradient(const ModelSpec& spec, std::span<const double> params,
                                       std::span<const Example> batch, double h = 1e-5) {
  std::vector<double> p(params.begin(), params.end()), g(params.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double x = p[i];
    p[i] = x + h;
    const long double up = mean_loss(spec, p, batch);
    p[i] = x - h;
    const long double dn = mean_loss(spec, p, batch);
    p[i] = x;
    g[i] = static_cast<double>((up - dn) / (2.0L * h));
  }
  return g;
}

/// max |a-b| / max(|a|,|b|) over coordinates where the reference exceeds
/// `floor` in magnitude.
inline double max_rel_error(std::span<const double> got, std::span<const double> ref,
                            double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (std::abs(ref[i]) <= floor) continue;
    const double d = std::abs(got[i] - ref[i]) / std::max(std::abs(got[i]), std::abs(ref[i]));
    worst = std::max(worst, d);
  }
  return worst;
}

/// Single identity layer with quadratic loss: L(theta) = 1/2 (theta - theta*)^T A (theta - theta*) + c.
/// A and theta* are assembled in the model's parameter layout (weights row
/// by row, then biases).
struct Quadratic {
  Eigen::MatrixXd A;
  Eigen::VectorXd theta_star;

  Quadratic(const ModelSpec& spec, std::span<const Example> batch) {
    const std::size_t d = spec.input_dim, C = spec.num_classes(), P = C * d + C;
    A = Eigen::MatrixXd::Zero(P, P);
    Eigen::VectorXd r = Eigen::VectorXd::Zero(P);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (const Example& e : batch) {
      Eigen::VectorXd xt(d + 1);
      for (std::size_t i = 0; i < d; ++i) xt[i] = e.features[i];
      xt[d] = 1.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double y = c == e.label ? 1.0 : 0.0;
        for (std::size_t i = 0; i <= d; ++i) {
          const std::size_t pi = i < d ? c * d + i : C * d + c;
          r[pi] += inv_n * y * xt[i];
          for (std::size_t j = 0; j <= d; ++j) {
            const std::size_t pj = j < d ? c * d + j : C * d + c;
            A(pi, pj) += inv_n * xt[i] * xt[j];
          }
        }
      }
    }
    theta_star = A.ldlt().solve(r);
  }

  Eigen::MatrixXd step(double beta) const {
    return Eigen::MatrixXd::Identity(A.rows(), A.cols()) - beta * A;
  }

  Eigen::MatrixXd step_pow(double beta, int k) const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(A.rows(), A.cols());
    for (int i = 0; i < k; ++i) m = step(beta) * m;
    return m;
  }

  /// K full-batch SGD steps: theta* + (I - beta A)^K (theta - theta*).
  Eigen::VectorXd trajectory(const Eigen::VectorXd& theta, double beta, int k) const {
    return theta_star + step_pow(beta, k) * (theta - theta_star);
  }

  /// d/dtheta L(U_K(theta)) = (I - beta A)^K A (I - beta A)^K (theta - theta*).
  Eigen::VectorXd maml_gradient(const Eigen::VectorXd& theta, double beta, int k) const {
    const Eigen::MatrixXd m = step_pow(beta, k);
    return m * A * m * (theta - theta_star);
  }

  /// grad L(U_K(theta)) = A (I - beta A)^K (theta - theta*).
  Eigen::VectorXd fomaml_gradient(const Eigen::VectorXd& theta, double beta, int k) const {
    return A * step_pow(beta, k) * (theta - theta_star);
  }

  double lambda_max() const {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
    return es.eigenvalues().maxCoeff();
  }
};

inline Eigen::VectorXd to_eigen(std::span<const double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

inline double rel_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return (a - b).norm() / std::max(a.norm(), b.norm());
}

}  // namespace oracle
