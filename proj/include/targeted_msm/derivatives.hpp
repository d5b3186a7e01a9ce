#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "targeted_msm/dual.hpp"

namespace tmsm {

using Dual1 = Dual<double>;
using Dual2 = Dual<Dual<double>>;

struct GradientResult {
  double value = 0.0;
  Eigen::VectorXd grad;
};

struct HessianResult {
  double value = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;  // symmetrized
};

struct JacobianResult {
  Eigen::VectorXd value;
  Eigen::MatrixXd jac;  // m x d
};

namespace detail {

inline void seed_first_order(std::span<const double> x, std::vector<Dual1>& xs) {
  xs.clear();
  xs.reserve(x.size());
  for (std::size_t j = 0; j < x.size(); ++j)
    xs.push_back(Dual1::seeded(x[j], x.size(), j));
}

inline void seed_second_order(std::span<const double> x, std::vector<Dual2>& xs) {
  xs.clear();
  xs.reserve(x.size());
  for (std::size_t j = 0; j < x.size(); ++j)
    xs.push_back(Dual2::seeded(Dual1::seeded(x[j], x.size(), j), x.size(), j));
}

}  // namespace detail

// f: callable on std::span<const T> returning T, with T = Dual1 here.
template <typename F>
GradientResult gradient(F&& f, std::span<const double> x) {
  std::vector<Dual1> xs;
  detail::seed_first_order(x, xs);
  Dual1 r = f(std::span<const Dual1>(xs));
  GradientResult out;
  out.value = r.value();
  out.grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) out.grad[static_cast<Eigen::Index>(j)] = r.partial(j);
  return out;
}

// Exact second-order derivatives through dual-over-dual nesting. The value
// and gradient lanes coincide bit-for-bit with a plain first-order pass.
template <typename F>
HessianResult hessian(F&& f, std::span<const double> x) {
  const auto d = static_cast<Eigen::Index>(x.size());
  std::vector<Dual2> xs;
  detail::seed_second_order(x, xs);
  Dual2 r = f(std::span<const Dual2>(xs));
  HessianResult out;
  out.value = r.value().value();
  out.grad = Eigen::VectorXd::Zero(d);
  out.hess = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index j = 0; j < d; ++j)
    out.grad[j] = r.value().partial(static_cast<std::size_t>(j));
  for (Eigen::Index k = 0; k < d; ++k) {
    Dual1 row = r.partial(static_cast<std::size_t>(k));
    for (Eigen::Index i = 0; i < d; ++i)
      out.hess(k, i) = row.partial(static_cast<std::size_t>(i));
  }
  out.hess = ((out.hess + out.hess.transpose()) * 0.5).eval();
  return out;
}

// f: callable on std::span<const Dual1> returning std::vector<Dual1>.
template <typename F>
JacobianResult jacobian(F&& f, std::span<const double> x) {
  std::vector<Dual1> xs;
  detail::seed_first_order(x, xs);
  std::vector<Dual1> r = f(std::span<const Dual1>(xs));
  JacobianResult out;
  out.value = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(r.size()));
  out.jac = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(r.size()),
                                  static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < r.size(); ++i) {
    out.value[static_cast<Eigen::Index>(i)] = r[i].value();
    for (std::size_t j = 0; j < x.size(); ++j)
      out.jac(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r[i].partial(j);
  }
  return out;
}

}  // namespace tmsm
