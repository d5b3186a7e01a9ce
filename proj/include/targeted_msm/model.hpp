#pragma once

#include <Eigen/Dense>
#include <span>
#include <type_traits>

#include "targeted_msm/dual.hpp"
#include "targeted_msm/rng.hpp"

namespace tmsm {

// A working marginal model is a callable m(beta, v) templated over the
// scalar layer of beta; a loss is a callable L(t, m) smooth in both slots.
// Models may advertise `linear_basis` plus a basis() filler to unlock
// least-squares initialization; anything else starts from zero.

template <typename Model>
concept HasLinearBasis = requires { { Model::linear_basis } -> std::convertible_to<bool>; };

struct LinearModel {
  // m(beta, v) = beta_1 + sum_j beta_{j+1} v_j; covers intercept-only when
  // v is empty.
  template <typename T>
  T operator()(std::span<const T> beta, std::span<const double> v) const {
    T out = beta[0];
    for (std::size_t j = 0; j < v.size(); ++j) out = out + beta[j + 1] * v[j];
    return out;
  }

  static constexpr bool linear_basis = true;

  static void basis(std::span<const double> v, std::span<double> out) {
    out[0] = 1.0;
    for (std::size_t j = 0; j < v.size(); ++j) out[j + 1] = v[j];
  }
};

struct SquaredErrorLoss {
  template <typename A, typename B>
  auto operator()(const A& t, const B& m) const {
    auto d = t - m;
    return d * d;
  }
};

template <typename Model, typename Loss>
struct MsmSpec {
  using model_type = Model;
  using loss_type = Loss;

  Model model;
  Loss loss;
  Eigen::Index dim;  // length of beta
};

using LinearSquaredSpec = MsmSpec<LinearModel, SquaredErrorLoss>;

inline LinearSquaredSpec linear_squared_spec(Eigen::Index v_dim) {
  return LinearSquaredSpec{LinearModel{}, SquaredErrorLoss{}, v_dim + 1};
}

// Samples (t, beta, v) triples and checks L(t, t') is minimized on the
// diagonal: L(m, m) <= L(t, m) for the model value m.
template <typename Spec>
bool check_valid_loss(const Spec& spec, Rng& rng, int trials, double lo, double hi) {
  const auto p = static_cast<std::size_t>(spec.dim);
  std::vector<double> beta(p), v(p > 0 ? p - 1 : 0);
  for (int trial = 0; trial < trials; ++trial) {
    for (auto& b : beta) b = lo + (hi - lo) * rng.uniform();
    for (auto& vj : v) vj = lo + (hi - lo) * rng.uniform();
    const double m = spec.model(std::span<const double>(beta), std::span<const double>(v));
    const double t = lo + (hi - lo) * rng.uniform();
    if (spec.loss(m, m) > spec.loss(t, m) + 1e-12) return false;
  }
  return true;
}

}  // namespace tmsm
