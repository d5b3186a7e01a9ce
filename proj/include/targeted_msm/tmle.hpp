#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "targeted_msm/dataset.hpp"
#include "targeted_msm/derivatives.hpp"
#include "targeted_msm/dual.hpp"
#include "targeted_msm/errors.hpp"
#include "targeted_msm/msm.hpp"
#include "targeted_msm/nuisance.hpp"
#include "targeted_msm/stats.hpp"

namespace tmsm {

class EpsNonconvergence : public Error {
 public:
  EpsNonconvergence(const std::string& msg, std::vector<double> trace)
      : Error(errc::nonconvergence, msg), risk_trace(std::move(trace)) {}

  std::vector<double> risk_trace;
};

struct TargetOptions {
  double stop_tol = 0.0;  // <= 0 picks 1e-4 / sqrt(n)
  int max_iter = 50;
  double level = 0.95;
  SolveOptions solve;
  int eps_max_iter = 100;
  double eps_tol = 1e-9;
};

struct CleverCovariates {
  Eigen::VectorXd h0, h1;
};

// h1 = I(a=1)/g1, h0 = -I(a=0)/(1-g1); the indicators keep each arm's
// fluctuation from moving the other arm's regression.
inline CleverCovariates clever_covariates(const Eigen::VectorXd& a, const Eigen::VectorXd& g1) {
  CleverCovariates cc;
  cc.h0.resize(a.size());
  cc.h1.resize(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (!(g1[i] > 0.0 && g1[i] < 1.0))
      throw Error(errc::positivity,
                  "propensity outside (0,1) in clever_covariates: " + std::to_string(g1[i]));
    cc.h1[i] = a[i] == 1.0 ? 1.0 / g1[i] : 0.0;
    cc.h0[i] = a[i] == 0.0 ? -1.0 / (1.0 - g1[i]) : 0.0;
  }
  return cc;
}

namespace detail {

template <typename T>
T dot_row(std::span<const T> eps, const Eigen::MatrixXd& m, Eigen::Index i) {
  T acc(0.0);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    acc = acc + eps[static_cast<std::size_t>(j)] * m(i, j);
  return acc;
}

template <typename T>
T log_sum_exp(const std::vector<T>& terms) {
  double m = -std::numeric_limits<double>::infinity();
  for (const T& t : terms) m = std::max(m, primal(t));
  T acc(0.0);
  for (const T& t : terms) acc = acc + exp(t - m);
  return m + log(acc);
}

inline double logit(double q) { return std::log(q) - std::log1p(-q); }

}  // namespace detail

// The per-iteration fluctuation criterion in epsilon, everything else
// frozen: average outcome loss along the fluctuation paths plus the
// log-likelihood of the exponentially tilted weights (constant part
// dropped). Its gradient at zero is minus the average of the two influence
// channels, which is what drives the targeting loop to the EIF root.
struct EpsProblem {
  Family family = Family::binary;
  Eigen::VectorXd y, a;
  Eigen::VectorXd lq0, lq1;  // binary: current logits
  Eigen::VectorXd q0, q1;    // continuous: current levels
  Eigen::VectorXd h0, h1;
  Eigen::VectorXd logw;  // log of current normalized weights
  Eigen::MatrixXd ldot, gtl;

  template <typename T>
  T operator()(std::span<const T> eps) const {
    const Eigen::Index n = y.size();
    T outcome(0.0), lin(0.0);
    std::vector<T> tilt_terms(static_cast<std::size_t>(n), T(0.0));
    for (Eigen::Index i = 0; i < n; ++i) {
      T s_g = detail::dot_row(eps, gtl, i);
      T s_l = detail::dot_row(eps, ldot, i);
      if (family == Family::binary) {
        T z = a[i] == 1.0 ? T(lq1[i] + h1[i] * s_g) : T(lq0[i] + h0[i] * s_g);
        outcome = outcome - (y[i] * log_sigmoid(z) + (1.0 - y[i]) * log_sigmoid(-z));
      } else {
        T m = a[i] == 1.0 ? T(q1[i] + h1[i] * s_g) : T(q0[i] + h0[i] * s_g);
        T r = y[i] - m;
        outcome = outcome + 0.5 * (r * r);
      }
      lin = lin + s_l;
      tilt_terms[static_cast<std::size_t>(i)] = logw[i] + s_l;
    }
    const double dn = static_cast<double>(n);
    return (outcome - lin) / dn + detail::log_sum_exp(tilt_terms);
  }
};

// Newton minimization of the fluctuation criterion from zero. Throws
// nonconvergence carrying the visited risk values.
inline Eigen::VectorXd eps_step(const EpsProblem& prob, Eigen::Index p, int max_iter = 100,
                                double tol = 1e-9, int max_halvings = 30) {
  Eigen::VectorXd eps = Eigen::VectorXd::Zero(p);
  std::vector<double> trace;
  auto value_at = [&](const Eigen::VectorXd& e) {
    return prob(std::span<const double>(e.data(), static_cast<std::size_t>(e.size())));
  };
  auto derivs_at = [&](const Eigen::VectorXd& e) {
    return hessian(prob, std::span<const double>(e.data(), static_cast<std::size_t>(e.size())));
  };
  HessianResult rd = derivs_at(eps);
  trace.push_back(rd.value);
  for (int it = 0; it < max_iter; ++it) {
    if (rd.grad.lpNorm<Eigen::Infinity>() < tol) return eps;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(rd.hess);
    Eigen::VectorXd s = lu.isInvertible() ? lu.solve(-rd.grad).eval() : (-rd.grad).eval();
    if (!(s.dot(rd.grad) < 0.0)) s = -rd.grad;
    double step = 1.0;
    bool accepted = false;
    Eigen::VectorXd cand;
    for (int h = 0; h <= max_halvings; ++h) {
      cand = eps + step * s;
      const double rv = value_at(cand);
      if (std::isfinite(rv) && rv <= rd.value + 1e-14 * std::max(1.0, std::abs(rd.value))) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted)
      throw EpsNonconvergence("fluctuation line search stalled (grad norm " +
                                  std::to_string(rd.grad.lpNorm<Eigen::Infinity>()) + ")",
                              trace);
    eps = cand;
    rd = derivs_at(eps);
    trace.push_back(rd.value);
  }
  if (rd.grad.lpNorm<Eigen::Infinity>() < tol) return eps;
  throw EpsNonconvergence("fluctuation newton budget exhausted (grad norm " +
                              std::to_string(rd.grad.lpNorm<Eigen::Infinity>()) + ")",
                          trace);
}

struct WaldCi {
  Eigen::VectorXd se, lo, hi;
};

inline WaldCi wald_ci(const Eigen::VectorXd& beta, const Eigen::MatrixXd& cov, Eigen::Index n,
                      double level) {
  if (!(level > 0.0 && level < 1.0))
    throw Error(errc::config, "confidence level must lie in (0,1)");
  const double z = normal_quantile(1.0 - (1.0 - level) / 2.0);
  WaldCi ci;
  ci.se.resize(beta.size());
  ci.lo.resize(beta.size());
  ci.hi.resize(beta.size());
  for (Eigen::Index j = 0; j < beta.size(); ++j) {
    ci.se[j] = std::sqrt(cov(j, j) / static_cast<double>(n));
    ci.lo[j] = beta[j] - z * ci.se[j];
    ci.hi[j] = beta[j] + z * ci.se[j];
  }
  return ci;
}

struct TargetedFit {
  // Estimate and uncertainty.
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;
  Eigen::VectorXd se, ci_lo, ci_hi;
  double level = 0.95;

  // Final targeted state, frozen for the posterior stage.
  Family family = Family::binary;
  Eigen::VectorXd a, y, g1;
  Eigen::MatrixXd v;
  Eigen::VectorXd qbar0, qbar1, lq0, lq1;
  Eigen::VectorXd psi, w, tilt;
  Eigen::VectorXd h0, h1;
  Eigen::MatrixXd ldot, gtl;
  double sigma2_0 = 0.0, sigma2_1 = 0.0;

  // Influence function pieces at the fit.
  Eigen::MatrixXd eif, eif_d1, eif_d2;
  Eigen::MatrixXd m;
  double m_condition = 0.0;
  double eif_mean_norm = 0.0;

  int iterations = 0;
  bool converged = false;
  std::vector<Eigen::VectorXd> eps_history;

  Eigen::Index n() const { return y.size(); }
};

class TargetNonconvergence : public Error {
 public:
  TargetNonconvergence(const std::string& msg, TargetedFit f)
      : Error(errc::nonconvergence, msg), fit(std::move(f)), eif_mean_norm(fit.eif_mean_norm) {}

  TargetedFit fit;
  double eif_mean_norm;
};

namespace detail {

template <typename Spec>
void fill_basis(const Spec& spec, const Eigen::VectorXd& psi, const Eigen::VectorXd& beta,
                const Eigen::MatrixXd& v, Eigen::MatrixXd& ldot, Eigen::MatrixXd& gtl) {
  LossDerivativeBatch<Spec> batch(spec, beta);
  std::vector<double> vbuf;
  for (Eigen::Index i = 0; i < psi.size(); ++i) {
    copy_row(v, i, vbuf);
    LossDerivatives ld = batch.at(psi[i], vbuf);
    ldot.row(i) = ld.ldot.transpose();
    gtl.row(i) = ld.grad_t_ldot.transpose();
  }
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& logw) {
  const double m = logw.maxCoeff();
  Eigen::VectorXd w = (logw.array() - m).exp();
  return w / w.sum();
}

}  // namespace detail

// The targeting loop: solve for beta under the current weights, take one
// joint fluctuation step (outcome regressions moved along the clever
// covariates, weights exponentially tilted by the loss score), apply it,
// and stop once the step is smaller than stop_tol in sup norm. The final
// sub-tolerance step is applied before stopping, which is what pushes the
// average influence function into the second-order-small regime.
template <typename Spec>
TargetedFit target(const Spec& spec, const Dataset& data, const Nuisance& nu,
                   const TargetOptions& opts = {}) {
  data.validate();
  const Eigen::Index n = data.n();
  const Eigen::Index p = spec.dim;
  if (nu.g1.size() != n || nu.qbar0.size() != n || nu.qbar1.size() != n)
    throw Error(errc::config, "nuisance estimates do not match the dataset");
  const double stop_tol = opts.stop_tol > 0.0 ? opts.stop_tol : 1e-4 / std::sqrt(double(n));

  TargetedFit fit;
  fit.family = data.family;
  fit.level = opts.level;
  fit.a = data.a;
  fit.y = data.y;
  fit.g1 = nu.g1;
  fit.v = data.modifiers();
  fit.sigma2_0 = nu.sigma2_0;
  fit.sigma2_1 = nu.sigma2_1;
  fit.qbar0 = nu.qbar0;
  fit.qbar1 = nu.qbar1;
  if (data.family == Family::binary) {
    fit.lq0.resize(n);
    fit.lq1.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      fit.lq0[i] = detail::logit(nu.qbar0[i]);
      fit.lq1[i] = detail::logit(nu.qbar1[i]);
    }
  }
  fit.tilt = Eigen::VectorXd::Zero(n);
  fit.w = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  CleverCovariates cc = clever_covariates(data.a, nu.g1);
  fit.h0 = cc.h0;
  fit.h1 = cc.h1;

  fit.ldot.resize(n, p);
  fit.gtl.resize(n, p);
  Eigen::VectorXd beta;
  bool have_beta = false;

  for (int it = 0; it < opts.max_iter; ++it) {
    fit.psi = fit.qbar1 - fit.qbar0;
    beta = solve_beta(spec, fit.psi, fit.w, fit.v, have_beta ? &beta : nullptr, opts.solve);
    have_beta = true;
    detail::fill_basis(spec, fit.psi, beta, fit.v, fit.ldot, fit.gtl);

    EpsProblem prob;
    prob.family = data.family;
    prob.y = data.y;
    prob.a = data.a;
    prob.lq0 = fit.lq0;
    prob.lq1 = fit.lq1;
    prob.q0 = fit.qbar0;
    prob.q1 = fit.qbar1;
    prob.h0 = fit.h0;
    prob.h1 = fit.h1;
    prob.logw = fit.w.array().log();
    prob.ldot = fit.ldot;
    prob.gtl = fit.gtl;
    Eigen::VectorXd eps = eps_step(prob, p, opts.eps_max_iter, opts.eps_tol);

    // Apply the fluctuation and the tilt.
    for (Eigen::Index i = 0; i < n; ++i) {
      const double shift = fit.gtl.row(i).dot(eps);
      if (data.family == Family::binary) {
        fit.lq0[i] += fit.h0[i] * shift;
        fit.lq1[i] += fit.h1[i] * shift;
        fit.qbar0[i] = logistic(fit.lq0[i]);
        fit.qbar1[i] = logistic(fit.lq1[i]);
      } else {
        fit.qbar0[i] += fit.h0[i] * shift;
        fit.qbar1[i] += fit.h1[i] * shift;
      }
    }
    fit.tilt += fit.ldot * eps;
    fit.w = detail::softmax(fit.tilt);

    fit.eps_history.push_back(eps);
    fit.iterations = it + 1;
    if (eps.lpNorm<Eigen::Infinity>() < stop_tol) {
      fit.converged = true;
      break;
    }
  }

  // Final statistics at the post-update state.
  fit.psi = fit.qbar1 - fit.qbar0;
  fit.beta = solve_beta(spec, fit.psi, fit.w, fit.v, have_beta ? &beta : nullptr, opts.solve);
  detail::fill_basis(spec, fit.psi, fit.beta, fit.v, fit.ldot, fit.gtl);
  Eigen::VectorXd delta = delta_star_rows(data.a, data.y, fit.qbar0, fit.qbar1, nu.g1);
  EifParts parts = assemble_eif(spec, fit.psi, fit.w, fit.beta, fit.v, delta);
  fit.eif = parts.d;
  fit.eif_d1 = parts.d1;
  fit.eif_d2 = parts.d2;
  fit.m = parts.norm.m;
  fit.m_condition = parts.norm.condition;
  fit.cov = eif_covariance(fit.eif);
  fit.eif_mean_norm = fit.eif.colwise().mean().lpNorm<Eigen::Infinity>();
  WaldCi ci = wald_ci(fit.beta, fit.cov, n, opts.level);
  fit.se = ci.se;
  fit.ci_lo = ci.lo;
  fit.ci_hi = ci.hi;

  if (!fit.converged)
    throw TargetNonconvergence(
        "targeting loop hit max_iter without a sub-tolerance step (mean EIF sup norm " +
            std::to_string(fit.eif_mean_norm) + ")",
        std::move(fit));
  return fit;
}

// Rebuilds the fluctuation criterion at a fit's final state (test hook for
// the loss-span identity: its gradient at zero must equal minus the average
// of the influence channels).
inline EpsProblem eps_problem_at(const TargetedFit& fit) {
  EpsProblem prob;
  prob.family = fit.family;
  prob.y = fit.y;
  prob.a = fit.a;
  prob.lq0 = fit.lq0;
  prob.lq1 = fit.lq1;
  prob.q0 = fit.qbar0;
  prob.q1 = fit.qbar1;
  prob.h0 = fit.h0;
  prob.h1 = fit.h1;
  prob.logw = fit.w.array().log();
  prob.ldot = fit.ldot;
  prob.gtl = fit.gtl;
  return prob;
}

}  // namespace tmsm
