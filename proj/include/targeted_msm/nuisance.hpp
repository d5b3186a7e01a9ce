#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "targeted_msm/dataset.hpp"
#include "targeted_msm/dual.hpp"
#include "targeted_msm/errors.hpp"

namespace tmsm {

struct GlmFit {
  Eigen::VectorXd coef;
  bool separation = false;
  int iterations = 0;
  std::vector<double> loglik_trace;  // one entry per accepted IRLS step
};

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double bernoulli_loglik(const Eigen::VectorXd& eta, const Eigen::VectorXd& y) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y[i] * eta[i] - softplus(eta[i]);
  return ll;
}

struct GlmOptions {
  int max_iter = 50;
  double tol = 1e-8;          // score sup-norm
  double clamp = 30.0;        // separation guard on coefficients
  int max_halvings = 30;
};

// Logistic regression by iteratively reweighted least squares with step
// halving, so the recorded log-likelihood trace is non-decreasing.
inline GlmFit fit_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                           const GlmOptions& opts = {}) {
  const Eigen::Index p = x.cols();
  GlmFit fit;
  fit.coef = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(x.rows());
  double ll = bernoulli_loglik(eta, y);
  fit.loglik_trace.push_back(ll);
  for (int it = 0; it < opts.max_iter; ++it) {
    Eigen::VectorXd mu(eta.size()), wdiag(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      mu[i] = logistic(eta[i]);
      wdiag[i] = mu[i] * (1.0 - mu[i]);
    }
    Eigen::VectorXd score = x.transpose() * (y - mu);
    if (score.lpNorm<Eigen::Infinity>() < opts.tol) break;
    Eigen::MatrixXd h = x.transpose() * wdiag.asDiagonal() * x;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    Eigen::VectorXd dir;
    if (ldlt.info() == Eigen::Success) dir = ldlt.solve(score);
    if (ldlt.info() != Eigen::Success || !dir.allFinite())
      throw Error(errc::rank_deficient, "singular information matrix in fit_logistic");

    double step = 1.0;
    bool accepted = false;
    for (int hlf = 0; hlf <= opts.max_halvings; ++hlf) {
      Eigen::VectorXd cand = fit.coef + step * dir;
      Eigen::VectorXd eta_c = x * cand;
      const double ll_c = bernoulli_loglik(eta_c, y);
      if (std::isfinite(ll_c) && ll_c >= ll) {
        fit.coef = cand;
        eta = eta_c;
        ll = ll_c;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    fit.iterations = it + 1;
    if (!accepted) break;  // likelihood at its numeric ceiling
    fit.loglik_trace.push_back(ll);
  }
  for (Eigen::Index j = 0; j < p; ++j) {
    if (std::abs(fit.coef[j]) > opts.clamp) {
      fit.coef[j] = fit.coef[j] > 0.0 ? opts.clamp : -opts.clamp;
      fit.separation = true;
    }
  }
  return fit;
}

// Ordinary least squares via column-pivoted QR; rank deficiency is an error.
inline GlmFit fit_linear(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < x.cols())
    throw Error(errc::rank_deficient, "design matrix rank-deficient in fit_linear (rank " +
                                          std::to_string(qr.rank()) + " of " +
                                          std::to_string(x.cols()) + ")");
  GlmFit fit;
  fit.coef = qr.solve(y);
  fit.iterations = 1;
  return fit;
}

struct NuisanceOptions {
  double g_trunc = 0.01;
  // Covariate columns used by each regression; nullopt means all columns,
  // an empty list means intercept-only. An intercept is always included.
  std::optional<std::vector<int>> g_cols;
  std::optional<std::vector<int>> q_cols;
  GlmOptions glm;
};

struct Nuisance {
  Eigen::VectorXd g1;            // truncated propensity of treatment
  Eigen::VectorXd qbar0, qbar1;  // outcome regressions under a = 0, 1
  double sigma2_0 = 0.0, sigma2_1 = 0.0;  // continuous family only
  GlmFit g_fit, q0_fit, q1_fit;
};

namespace detail {

inline Eigen::MatrixXd build_design(const Eigen::MatrixXd& x,
                                    const std::optional<std::vector<int>>& cols) {
  std::vector<int> use;
  if (cols.has_value())
    use = *cols;
  else
    for (int j = 0; j < x.cols(); ++j) use.push_back(j);
  Eigen::MatrixXd d(x.rows(), static_cast<Eigen::Index>(use.size()) + 1);
  d.col(0).setOnes();
  for (std::size_t j = 0; j < use.size(); ++j) {
    if (use[j] < 0 || use[j] >= x.cols())
      throw Error(errc::config, "covariate column index " + std::to_string(use[j]) +
                                    " out of range");
    d.col(static_cast<Eigen::Index>(j) + 1) = x.col(use[j]);
  }
  return d;
}

inline Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

inline Eigen::VectorXd take_rows(const Eigen::VectorXd& v, const std::vector<Eigen::Index>& rows) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[rows[i]];
  return out;
}

}  // namespace detail

// Fits the treatment mechanism and the per-arm outcome regressions, then
// predicts over every row. Propensities are truncated into
// [g_trunc, 1 - g_trunc]; binary outcome predictions get a pure numeric
// floor so downstream logits stay finite.
inline Nuisance make_nuisance(const Dataset& data, const NuisanceOptions& opts = {}) {
  data.validate();
  if (!(opts.g_trunc > 0.0 && opts.g_trunc < 0.5))
    throw Error(errc::config, "g_trunc must lie in (0, 0.5)");
  const Eigen::Index n = data.n();

  Nuisance nu;
  Eigen::MatrixXd gx = detail::build_design(data.x, opts.g_cols);
  nu.g_fit = fit_logistic(gx, data.a, opts.glm);
  nu.g1.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double g = logistic(gx.row(i).dot(nu.g_fit.coef));
    nu.g1[i] = std::min(1.0 - opts.g_trunc, std::max(opts.g_trunc, g));
  }

  Eigen::MatrixXd qx = detail::build_design(data.x, opts.q_cols);
  std::vector<Eigen::Index> arm0, arm1;
  for (Eigen::Index i = 0; i < n; ++i) (data.a[i] == 1.0 ? arm1 : arm0).push_back(i);
  const auto min_rows = static_cast<std::size_t>(qx.cols()) + 1;
  if (arm0.size() < min_rows || arm1.size() < min_rows)
    throw Error(errc::insufficient_data,
                "treatment arm too small for the outcome regression (control " +
                    std::to_string(arm0.size()) + ", treated " + std::to_string(arm1.size()) +
                    ", need " + std::to_string(min_rows) + ")");

  Eigen::MatrixXd qx0 = detail::take_rows(qx, arm0);
  Eigen::MatrixXd qx1 = detail::take_rows(qx, arm1);
  Eigen::VectorXd y0 = detail::take_rows(data.y, arm0);
  Eigen::VectorXd y1 = detail::take_rows(data.y, arm1);

  nu.qbar0.resize(n);
  nu.qbar1.resize(n);
  if (data.family == Family::binary) {
    nu.q0_fit = fit_logistic(qx0, y0, opts.glm);
    nu.q1_fit = fit_logistic(qx1, y1, opts.glm);
    const double floor = 1e-10;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double q0 = logistic(qx.row(i).dot(nu.q0_fit.coef));
      const double q1 = logistic(qx.row(i).dot(nu.q1_fit.coef));
      nu.qbar0[i] = std::min(1.0 - floor, std::max(floor, q0));
      nu.qbar1[i] = std::min(1.0 - floor, std::max(floor, q1));
    }
  } else {
    nu.q0_fit = fit_linear(qx0, y0);
    nu.q1_fit = fit_linear(qx1, y1);
    nu.qbar0 = qx * nu.q0_fit.coef;
    nu.qbar1 = qx * nu.q1_fit.coef;
    nu.sigma2_0 = (y0 - qx0 * nu.q0_fit.coef).squaredNorm() / static_cast<double>(arm0.size());
    nu.sigma2_1 = (y1 - qx1 * nu.q1_fit.coef).squaredNorm() / static_cast<double>(arm1.size());
  }
  return nu;
}

}  // namespace tmsm
