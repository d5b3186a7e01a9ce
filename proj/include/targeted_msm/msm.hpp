#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "targeted_msm/dataset.hpp"
#include "targeted_msm/derivatives.hpp"
#include "targeted_msm/dual.hpp"
#include "targeted_msm/errors.hpp"
#include "targeted_msm/model.hpp"

namespace tmsm {

class SolveNonconvergence : public Error {
 public:
  SolveNonconvergence(const std::string& msg, Eigen::VectorXd last, double gn)
      : Error(errc::nonconvergence, msg), last_iterate(std::move(last)), grad_norm(gn) {}

  Eigen::VectorXd last_iterate;
  double grad_norm;
};

struct SolveOptions {
  int max_iter = 100;
  double tol = 1e-10;  // scaled by max(1, |beta|_inf)
  int max_halvings = 30;
};

namespace detail {

inline void copy_row(const Eigen::MatrixXd& m, Eigen::Index i, std::vector<double>& buf) {
  buf.resize(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) buf[static_cast<std::size_t>(j)] = m(i, j);
}

template <typename Spec, typename = void>
struct has_linear_basis : std::false_type {};
template <typename Spec>
struct has_linear_basis<Spec, std::void_t<decltype(Spec::model_type::linear_basis)>>
    : std::bool_constant<Spec::model_type::linear_basis> {};

// Squared loss over a linear basis has closed-form derivatives. The fast
// paths below use them; they agree with the dual-number passes to rounding.
template <typename Spec>
inline constexpr bool squared_linear_v =
    has_linear_basis<Spec>::value &&
    std::is_same_v<typename Spec::loss_type, SquaredErrorLoss>;

}  // namespace detail

// Value of the weighted empirical risk sum_i w_i L(psi_i, m(beta, v_i)).
template <typename Spec>
double weighted_risk_value(const Spec& spec, const Eigen::VectorXd& psi,
                           const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
                           const Eigen::MatrixXd& v) {
  std::vector<double> b(beta.data(), beta.data() + beta.size());
  std::vector<double> vbuf;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < psi.size(); ++i) {
    detail::copy_row(v, i, vbuf);
    acc += w[i] * spec.loss(psi[i], spec.model(std::span<const double>(b),
                                               std::span<const double>(vbuf)));
  }
  return acc;
}

// Gradient and Hessian in beta of the weighted empirical risk, one
// second-order pass per row with the beta seeds built once.
template <typename Spec>
HessianResult weighted_risk_derivatives(const Spec& spec, const Eigen::VectorXd& psi,
                                        const Eigen::VectorXd& w,
                                        const Eigen::VectorXd& beta,
                                        const Eigen::MatrixXd& v) {
  if constexpr (detail::squared_linear_v<Spec>) {
    const Eigen::Index pi = beta.size();
    HessianResult out;
    out.grad = Eigen::VectorXd::Zero(pi);
    out.hess = Eigen::MatrixXd::Zero(pi, pi);
    std::vector<double> vbuf, xb(static_cast<std::size_t>(pi));
    for (Eigen::Index i = 0; i < psi.size(); ++i) {
      detail::copy_row(v, i, vbuf);
      Spec::model_type::basis(std::span<const double>(vbuf), std::span<double>(xb));
      double m = 0.0;
      for (Eigen::Index j = 0; j < pi; ++j) m += beta[j] * xb[static_cast<std::size_t>(j)];
      const double r = psi[i] - m;
      out.value += w[i] * r * r;
      for (Eigen::Index j = 0; j < pi; ++j) {
        out.grad[j] += w[i] * (-2.0) * r * xb[static_cast<std::size_t>(j)];
        for (Eigen::Index k = 0; k < pi; ++k)
          out.hess(j, k) +=
              w[i] * 2.0 * xb[static_cast<std::size_t>(j)] * xb[static_cast<std::size_t>(k)];
      }
    }
    return out;
  }
  const auto p = static_cast<std::size_t>(beta.size());
  std::vector<Dual2> b(p);
  for (std::size_t j = 0; j < p; ++j)
    b[j] = Dual2::seeded(Dual1::seeded(beta[static_cast<Eigen::Index>(j)], p, j), p, j);
  Dual2 acc(0.0);
  std::vector<double> vbuf;
  for (Eigen::Index i = 0; i < psi.size(); ++i) {
    detail::copy_row(v, i, vbuf);
    Dual2 li = spec.loss(Dual2(psi[i]), spec.model(std::span<const Dual2>(b),
                                                   std::span<const double>(vbuf)));
    acc = acc + w[i] * li;
  }
  HessianResult out;
  const auto pi = static_cast<Eigen::Index>(p);
  out.value = acc.value().value();
  out.grad = Eigen::VectorXd::Zero(pi);
  out.hess = Eigen::MatrixXd::Zero(pi, pi);
  for (Eigen::Index j = 0; j < pi; ++j)
    out.grad[j] = acc.value().partial(static_cast<std::size_t>(j));
  for (Eigen::Index k = 0; k < pi; ++k) {
    Dual1 row = acc.partial(static_cast<std::size_t>(k));
    for (Eigen::Index j = 0; j < pi; ++j)
      out.hess(k, j) = row.partial(static_cast<std::size_t>(j));
  }
  out.hess = ((out.hess + out.hess.transpose()) * 0.5).eval();
  return out;
}

// Weighted-least-squares start for models exposing a linear basis.
template <typename Spec>
Eigen::VectorXd least_squares_init(const Spec& spec, const Eigen::VectorXd& psi,
                                   const Eigen::VectorXd& w, const Eigen::MatrixXd& v) {
  const Eigen::Index p = spec.dim;
  const Eigen::Index n = psi.size();
  Eigen::MatrixXd x(n, p);
  std::vector<double> vbuf, row(static_cast<std::size_t>(p));
  for (Eigen::Index i = 0; i < n; ++i) {
    detail::copy_row(v, i, vbuf);
    Spec::model_type::basis(std::span<const double>(vbuf), std::span<double>(row));
    for (Eigen::Index j = 0; j < p; ++j) x(i, j) = row[static_cast<std::size_t>(j)];
  }
  Eigen::MatrixXd xtwx = x.transpose() * w.asDiagonal() * x;
  Eigen::VectorXd xtwy = x.transpose() * (w.cwiseProduct(psi));
  Eigen::LDLT<Eigen::MatrixXd> ldlt(xtwx);
  if (ldlt.info() != Eigen::Success) return Eigen::VectorXd::Zero(p);
  Eigen::VectorXd beta = ldlt.solve(xtwy);
  return beta.allFinite() ? beta : Eigen::VectorXd::Zero(p);
}

// Minimizes the weighted empirical risk by damped Newton with halving line
// search. Throws rank_deficient on a singular Hessian and nonconvergence
// (carrying the last iterate and gradient norm) if the budget runs out.
template <typename Spec>
Eigen::VectorXd solve_beta(const Spec& spec, const Eigen::VectorXd& psi,
                           const Eigen::VectorXd& w, const Eigen::MatrixXd& v,
                           const Eigen::VectorXd* init = nullptr,
                           const SolveOptions& opts = {}) {
  Eigen::VectorXd beta;
  if (init != nullptr)
    beta = *init;
  else if constexpr (detail::has_linear_basis<Spec>::value)
    beta = least_squares_init(spec, psi, w, v);
  else
    beta = Eigen::VectorXd::Zero(spec.dim);

  HessianResult rd = weighted_risk_derivatives(spec, psi, w, beta, v);
  for (int it = 0; it < opts.max_iter; ++it) {
    const double gn = rd.grad.lpNorm<Eigen::Infinity>();
    if (gn < opts.tol * std::max(1.0, beta.lpNorm<Eigen::Infinity>())) return beta;

    Eigen::FullPivLU<Eigen::MatrixXd> lu(rd.hess);
    if (!lu.isInvertible())
      throw Error(errc::rank_deficient, "singular risk hessian in solve_beta");
    Eigen::VectorXd s = lu.solve(-rd.grad);
    if (!(s.dot(rd.grad) < 0.0)) s = -rd.grad;

    double step = 1.0;
    bool accepted = false;
    Eigen::VectorXd cand;
    for (int h = 0; h <= opts.max_halvings; ++h) {
      cand = beta + step * s;
      double rv;
      try {
        rv = weighted_risk_value(spec, psi, w, cand, v);
      } catch (const Error&) {
        step *= 0.5;
        continue;  // candidate outside the loss domain
      }
      // Non-strict acceptance: near the optimum the risk decrement drops
      // below double precision while the Newton step still contracts the
      // gradient quadratically.
      if (std::isfinite(rv) && rv <= rd.value + 1e-14 * std::max(1.0, std::abs(rd.value))) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted)
      throw SolveNonconvergence("line search stalled in solve_beta (grad norm " +
                                    std::to_string(gn) + ")",
                                beta, gn);
    beta = cand;
    rd = weighted_risk_derivatives(spec, psi, w, beta, v);
  }
  const double gn = rd.grad.lpNorm<Eigen::Infinity>();
  if (gn < opts.tol * std::max(1.0, beta.lpNorm<Eigen::Infinity>())) return beta;
  throw SolveNonconvergence("newton budget exhausted in solve_beta (grad norm " +
                                std::to_string(gn) + ")",
                            beta, gn);
}

// First and second derivatives of the loss at one observation: gradient and
// Hessian in beta plus the cross derivative in (t, beta), all from a single
// second-order pass over the joint vector (beta, t).
struct LossDerivatives {
  double value = 0.0;
  Eigen::VectorXd ldot;         // dL/dbeta
  Eigen::MatrixXd lddot;        // d2L/dbeta2
  Eigen::VectorXd grad_t_ldot;  // d/dt of ldot
};

// Precomputes the beta seeds so per-row evaluation only rebuilds the t seed.
template <typename Spec>
class LossDerivativeBatch {
 public:
  LossDerivativeBatch(const Spec& spec, const Eigen::VectorXd& beta)
      : spec_(spec), beta_(beta), p_(static_cast<std::size_t>(beta.size())) {
    if constexpr (!detail::squared_linear_v<Spec>) {
      b_.resize(p_);
      for (std::size_t j = 0; j < p_; ++j)
        b_[j] = Dual2::seeded(Dual1::seeded(beta[static_cast<Eigen::Index>(j)], p_ + 1, j),
                              p_ + 1, j);
    }
  }

  LossDerivatives at(double t, std::span<const double> v) const {
    if constexpr (detail::squared_linear_v<Spec>) {
      const auto pi = static_cast<Eigen::Index>(p_);
      xb_.resize(p_);
      Spec::model_type::basis(v, std::span<double>(xb_));
      double m = 0.0;
      for (Eigen::Index j = 0; j < pi; ++j) m += beta_[j] * xb_[static_cast<std::size_t>(j)];
      const double r = t - m;
      LossDerivatives out;
      out.value = r * r;
      out.ldot.resize(pi);
      out.lddot.resize(pi, pi);
      out.grad_t_ldot.resize(pi);
      for (Eigen::Index j = 0; j < pi; ++j) {
        const double xj = xb_[static_cast<std::size_t>(j)];
        out.ldot[j] = -2.0 * r * xj;
        out.grad_t_ldot[j] = -2.0 * xj;
        for (Eigen::Index k = 0; k < pi; ++k)
          out.lddot(j, k) = 2.0 * xj * xb_[static_cast<std::size_t>(k)];
      }
      return out;
    }
    Dual2 td = Dual2::seeded(Dual1::seeded(t, p_ + 1, p_), p_ + 1, p_);
    Dual2 r = spec_.loss(td, spec_.model(std::span<const Dual2>(b_), v));
    LossDerivatives out;
    const auto pi = static_cast<Eigen::Index>(p_);
    out.value = r.value().value();
    out.ldot = Eigen::VectorXd::Zero(pi);
    out.lddot = Eigen::MatrixXd::Zero(pi, pi);
    out.grad_t_ldot = Eigen::VectorXd::Zero(pi);
    for (Eigen::Index j = 0; j < pi; ++j)
      out.ldot[j] = r.value().partial(static_cast<std::size_t>(j));
    for (Eigen::Index k = 0; k < pi; ++k) {
      Dual1 row = r.partial(static_cast<std::size_t>(k));
      for (Eigen::Index j = 0; j < pi; ++j)
        out.lddot(k, j) = row.partial(static_cast<std::size_t>(j));
    }
    out.lddot = ((out.lddot + out.lddot.transpose()) * 0.5).eval();
    Dual1 trow = r.partial(p_);
    for (Eigen::Index j = 0; j < pi; ++j) {
      const double cross = r.partial(static_cast<std::size_t>(j)).partial(p_);
      out.grad_t_ldot[j] = 0.5 * (trow.partial(static_cast<std::size_t>(j)) + cross);
    }
    return out;
  }

 private:
  Spec spec_;
  Eigen::VectorXd beta_;
  std::size_t p_;
  std::vector<Dual2> b_;
  mutable std::vector<double> xb_;
};

template <typename Spec>
LossDerivatives loss_derivatives(const Spec& spec, double t, const Eigen::VectorXd& beta,
                                 std::span<const double> v) {
  return LossDerivativeBatch<Spec>(spec, beta).at(t, v);
}

struct NormalizingMatrix {
  Eigen::MatrixXd m;
  double condition = 0.0;
};

// M = -sum_i w_i d2L/dbeta2(psi_i, beta); errors out when the spectral
// condition number exceeds 1e12.
template <typename Spec>
NormalizingMatrix normalizing_matrix(const Spec& spec, const Eigen::VectorXd& psi,
                                     const Eigen::VectorXd& w, const Eigen::VectorXd& beta,
                                     const Eigen::MatrixXd& v) {
  const Eigen::Index p = beta.size();
  NormalizingMatrix out;
  out.m = Eigen::MatrixXd::Zero(p, p);
  LossDerivativeBatch<Spec> batch(spec, beta);
  std::vector<double> vbuf;
  for (Eigen::Index i = 0; i < psi.size(); ++i) {
    detail::copy_row(v, i, vbuf);
    out.m -= w[i] * batch.at(psi[i], vbuf).lddot;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(out.m, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd abs_ev = es.eigenvalues().cwiseAbs();
  const double lo = abs_ev.minCoeff();
  const double hi = abs_ev.maxCoeff();
  out.condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (!(out.condition < 1e12))
    throw Error(errc::singular_normalizer,
                "normalizing matrix is numerically singular (condition " +
                    std::to_string(out.condition) + ")");
  return out;
}

// Residual-based centering term for one observation; g1 is the (already
// truncated) treatment propensity.
inline double delta_star(double a, double y, double qbar_a, double g1) {
  if (!(g1 > 0.0 && g1 < 1.0))
    throw Error(errc::positivity,
                "propensity outside (0,1) in delta_star: " + std::to_string(g1));
  const double resid = y - qbar_a;
  return a == 1.0 ? resid / g1 : -resid / (1.0 - g1);
}

inline Eigen::VectorXd delta_star_rows(const Eigen::VectorXd& a, const Eigen::VectorXd& y,
                                       const Eigen::VectorXd& qbar0,
                                       const Eigen::VectorXd& qbar1,
                                       const Eigen::VectorXd& g1) {
  Eigen::VectorXd out(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i)
    out[i] = delta_star(a[i], y[i], a[i] == 1.0 ? qbar1[i] : qbar0[i], g1[i]);
  return out;
}

struct EifParts {
  Eigen::MatrixXd d1;  // n x p, residual channel
  Eigen::MatrixXd d2;  // n x p, loss-score channel
  Eigen::MatrixXd d;   // n x p, M^{-1} (d1 + d2) rows
  NormalizingMatrix norm;
};

template <typename Spec>
EifParts assemble_eif(const Spec& spec, const Eigen::VectorXd& psi, const Eigen::VectorXd& w,
                      const Eigen::VectorXd& beta, const Eigen::MatrixXd& v,
                      const Eigen::VectorXd& delta) {
  const Eigen::Index n = psi.size();
  const Eigen::Index p = beta.size();
  EifParts out;
  out.d1.resize(n, p);
  out.d2.resize(n, p);
  out.norm.m = Eigen::MatrixXd::Zero(p, p);
  LossDerivativeBatch<Spec> batch(spec, beta);
  std::vector<double> vbuf;
  for (Eigen::Index i = 0; i < n; ++i) {
    detail::copy_row(v, i, vbuf);
    LossDerivatives ld = batch.at(psi[i], vbuf);
    out.d1.row(i) = (delta[i] * ld.grad_t_ldot).transpose();
    out.d2.row(i) = ld.ldot.transpose();
    out.norm.m -= w[i] * ld.lddot;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(out.norm.m, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd abs_ev = es.eigenvalues().cwiseAbs();
  const double lo = abs_ev.minCoeff();
  const double hi = abs_ev.maxCoeff();
  out.norm.condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (!(out.norm.condition < 1e12))
    throw Error(errc::singular_normalizer,
                "normalizing matrix is numerically singular (condition " +
                    std::to_string(out.norm.condition) + ")");
  Eigen::FullPivLU<Eigen::MatrixXd> lu(out.norm.m);
  out.d = lu.solve((out.d1 + out.d2).transpose()).transpose();
  return out;
}

// Sample covariance of the influence rows, mean-centered, divisor n.
inline Eigen::MatrixXd eif_covariance(const Eigen::MatrixXd& d) {
  const auto n = static_cast<double>(d.rows());
  Eigen::RowVectorXd mean = d.colwise().mean();
  Eigen::MatrixXd centered = d.rowwise() - mean;
  return (centered.transpose() * centered) / n;
}

// Score in beta, sum_i w_i dL/dbeta(psi_i, beta), with psi and w carried in
// an arbitrary dual layer T at a fixed primal beta. Backbone of implicit
// differentiation through solve_beta.
template <typename Spec, typename T>
std::vector<T> weighted_score(const Spec& spec, const std::vector<T>& psi,
                              const std::vector<T>& w, const Eigen::VectorXd& beta,
                              const Eigen::MatrixXd& v) {
  if constexpr (detail::squared_linear_v<Spec>) {
    const auto p = static_cast<std::size_t>(beta.size());
    std::vector<T> out(p, T(0.0));
    std::vector<double> vbuf, xb(p);
    for (std::size_t i = 0; i < psi.size(); ++i) {
      detail::copy_row(v, static_cast<Eigen::Index>(i), vbuf);
      Spec::model_type::basis(std::span<const double>(vbuf), std::span<double>(xb));
      double m = 0.0;
      for (std::size_t j = 0; j < p; ++j) m += beta[static_cast<Eigen::Index>(j)] * xb[j];
      T c = w[i] * (psi[i] - m);
      for (std::size_t j = 0; j < p; ++j) out[j] = out[j] + c * (-2.0 * xb[j]);
    }
    return out;
  }
  using U = Dual<T>;
  const auto p = static_cast<std::size_t>(beta.size());
  std::vector<U> b(p);
  for (std::size_t j = 0; j < p; ++j)
    b[j] = U::seeded(T(beta[static_cast<Eigen::Index>(j)]), p, j);
  std::vector<T> out(p, T(0.0));
  std::vector<double> vbuf;
  for (std::size_t i = 0; i < psi.size(); ++i) {
    detail::copy_row(v, static_cast<Eigen::Index>(i), vbuf);
    U ti(psi[i]);
    U r = spec.loss(ti, spec.model(std::span<const U>(b), std::span<const double>(vbuf)));
    for (std::size_t j = 0; j < p; ++j) out[j] = out[j] + w[i] * r.partial(j);
  }
  return out;
}

// solve_beta through a dual layer: converge at the primal values, then take
// one Newton step in dual arithmetic. At the root the step's own derivative
// vanishes, so the dual partials carry exactly the implicit-function
// derivative of the solution map.
template <typename Spec, typename T>
std::vector<T> solve_beta_dual(const Spec& spec, const std::vector<T>& psi,
                               const std::vector<T>& w, const Eigen::MatrixXd& v,
                               const Eigen::VectorXd* init = nullptr,
                               const SolveOptions& opts = {}) {
  const auto n = static_cast<Eigen::Index>(psi.size());
  Eigen::VectorXd psi_p(n), w_p(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    psi_p[i] = primal(psi[static_cast<std::size_t>(i)]);
    w_p[i] = primal(w[static_cast<std::size_t>(i)]);
  }
  Eigen::VectorXd beta = solve_beta(spec, psi_p, w_p, v, init, opts);
  HessianResult rd = weighted_risk_derivatives(spec, psi_p, w_p, beta, v);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(rd.hess);
  if (!lu.isInvertible())
    throw Error(errc::rank_deficient, "singular risk hessian in solve_beta_dual");
  Eigen::MatrixXd hinv = lu.inverse();
  std::vector<T> g = weighted_score(spec, psi, w, beta, v);
  const auto p = static_cast<std::size_t>(beta.size());
  std::vector<T> out(p, T(0.0));
  for (std::size_t r = 0; r < p; ++r) {
    T acc(beta[static_cast<Eigen::Index>(r)]);
    for (std::size_t c = 0; c < p; ++c)
      acc = acc - hinv(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * g[c];
    out[r] = acc;
  }
  return out;
}

}  // namespace tmsm
