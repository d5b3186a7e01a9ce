#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "targeted_msm/derivatives.hpp"
#include "targeted_msm/dual.hpp"
#include "targeted_msm/errors.hpp"
#include "targeted_msm/msm.hpp"
#include "targeted_msm/rng.hpp"
#include "targeted_msm/stats.hpp"
#include "targeted_msm/tmle.hpp"

namespace tmsm {

struct GaussianPrior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  static GaussianPrior standard(Eigen::Index p) {
    return {Eigen::VectorXd::Zero(p), Eigen::MatrixXd::Identity(p, p)};
  }

  bool empty() const { return mean.size() == 0; }

  double log_density(const Eigen::VectorXd& b) const {
    if (b.size() != mean.size() || cov.rows() != mean.size() || cov.cols() != mean.size())
      throw Error(errc::config, "prior dimensions do not match");
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
      throw Error(errc::config, "prior covariance is not positive definite");
    Eigen::VectorXd s = llt.matrixL().solve(b - mean);
    double logdet = 0.0;
    for (Eigen::Index j = 0; j < mean.size(); ++j)
      logdet += 2.0 * std::log(llt.matrixL()(j, j));
    const double ln2pi = std::log(2.0 * 3.14159265358979323846);
    return -0.5 * (s.squaredNorm() + logdet + static_cast<double>(mean.size()) * ln2pi);
  }
};

// The frozen endpoint of the targeting loop, reused as a parametric family
// indexed by the fluctuation coordinate. Proposals outside [-box, box]^p
// carry zero mass.
template <typename Spec>
class TargetedLikelihood {
 public:
  TargetedLikelihood(Spec spec, TargetedFit fit, double eps_box = 10.0)
      : spec_(std::move(spec)), fit_(std::move(fit)), box_(eps_box) {
    if (fit_.m.rows() != spec_.dim || fit_.beta.size() != spec_.dim)
      throw Error(errc::config, "targeted fit does not match the model dimension");
    if (!(box_ > 0.0)) throw Error(errc::config, "fluctuation box must be positive");
    if (fit_.family == Family::continuous && !(fit_.sigma2_0 > 0.0 && fit_.sigma2_1 > 0.0))
      throw Error(errc::config, "continuous family needs positive arm variances");
    Eigen::FullPivLU<Eigen::MatrixXd> lu(fit_.m);
    if (!lu.isInvertible())
      throw Error(errc::singular_normalizer, "normalizing matrix is singular at the fit");
    minv_ = lu.inverse();
    logw_ = fit_.w.array().log();
    // Arm slopes without the treatment indicator: the family moves both
    // counterfactual regressions at every point, while the observed-data
    // likelihood only ever reads the factual arm.
    u0_.resize(fit_.n());
    u1_.resize(fit_.n());
    for (Eigen::Index i = 0; i < fit_.n(); ++i) {
      if (!(fit_.g1[i] > 0.0 && fit_.g1[i] < 1.0))
        throw Error(errc::positivity,
                    "propensity outside (0,1) in the targeted likelihood");
      u1_[i] = 1.0 / fit_.g1[i];
      u0_[i] = -1.0 / (1.0 - fit_.g1[i]);
    }
  }

  const Spec& spec() const { return spec_; }
  const TargetedFit& fit() const { return fit_; }
  const Eigen::MatrixXd& minv() const { return minv_; }
  const Eigen::VectorXd& logw() const { return logw_; }
  const Eigen::VectorXd& u0() const { return u0_; }
  const Eigen::VectorXd& u1() const { return u1_; }
  Eigen::Index dim() const { return spec_.dim; }
  double box() const { return box_; }

  template <typename T>
  bool inside_box(std::span<const T> eps) const {
    for (const T& e : eps)
      if (std::abs(primal(e)) > box_) return false;
    return true;
  }

 private:
  Spec spec_;
  TargetedFit fit_;
  double box_;
  Eigen::MatrixXd minv_;
  Eigen::VectorXd logw_;
  Eigen::VectorXd u0_, u1_;
};

namespace detail {

// d = M^{-1} eps, the fluctuation direction in beta coordinates.
template <typename T, typename Spec>
std::vector<T> bayes_direction(const TargetedLikelihood<Spec>& lik, std::span<const T> eps) {
  const Eigen::Index p = lik.dim();
  if (static_cast<Eigen::Index>(eps.size()) != p)
    throw Error(errc::config, "fluctuation coordinate has the wrong dimension");
  std::vector<T> d(static_cast<std::size_t>(p), T(0.0));
  for (Eigen::Index r = 0; r < p; ++r)
    for (Eigen::Index c = 0; c < p; ++c)
      d[static_cast<std::size_t>(r)] =
          d[static_cast<std::size_t>(r)] + lik.minv()(r, c) * eps[static_cast<std::size_t>(c)];
  return d;
}

}  // namespace detail

// Log density of the observed data under the fluctuated family: arm
// log-likelihood at the moved outcome regressions plus the log of the
// tilted weights at the sample points. Continuous arms move by sigma^2
// times the clever covariate so the score in eps stays on the loss scale.
template <typename T, typename Spec>
T log_targeted_likelihood(const TargetedLikelihood<Spec>& lik, std::span<const T> eps) {
  const TargetedFit& f = lik.fit();
  const Eigen::Index n = f.n();
  const Eigen::Index p = lik.dim();
  if (!lik.inside_box(eps)) return T(-std::numeric_limits<double>::infinity());
  std::vector<T> d = detail::bayes_direction(lik, eps);

  T ll(0.0), tilt_sum(0.0);
  std::vector<T> terms(static_cast<std::size_t>(n), T(0.0));
  const double ln2pi = std::log(2.0 * 3.14159265358979323846);
  for (Eigen::Index i = 0; i < n; ++i) {
    T s(0.0), t(0.0);
    for (Eigen::Index j = 0; j < p; ++j) {
      s = s + f.gtl(i, j) * d[static_cast<std::size_t>(j)];
      t = t + f.ldot(i, j) * d[static_cast<std::size_t>(j)];
    }
    if (f.family == Family::binary) {
      T z = f.a[i] == 1.0 ? T(f.lq1[i] + f.h1[i] * s) : T(f.lq0[i] + f.h0[i] * s);
      ll = ll + f.y[i] * log_sigmoid(z) + (1.0 - f.y[i]) * log_sigmoid(-z);
    } else {
      const double s2 = f.a[i] == 1.0 ? f.sigma2_1 : f.sigma2_0;
      T m = f.a[i] == 1.0 ? T(f.qbar1[i] + (f.sigma2_1 * f.h1[i]) * s)
                          : T(f.qbar0[i] + (f.sigma2_0 * f.h0[i]) * s);
      T r = f.y[i] - m;
      ll = ll - 0.5 * ((r * r) / s2) - 0.5 * (ln2pi + std::log(s2));
    }
    terms[static_cast<std::size_t>(i)] = lik.logw()[i] + t;
    tilt_sum = tilt_sum + terms[static_cast<std::size_t>(i)];
  }
  T lse = detail::log_sum_exp(terms);
  return ll + tilt_sum - static_cast<double>(n) * lse;
}

// The pullback of the fluctuation onto the working-model coordinates:
// move the regressions and weights by eps, then re-solve the weighted
// risk. At eps = 0 this returns the targeted estimate unchanged.
//
// The contrast moves through both counterfactual regressions at every
// sample point (arm slopes u0, u1 with no indicator): the fluctuated
// family is a law of (X, A, Y), and its contrast is a function of X
// alone. The observed-arm indicator lives in the likelihood, not here.
template <typename T, typename Spec>
std::vector<T> vartheta(const TargetedLikelihood<Spec>& lik, std::span<const T> eps) {
  const TargetedFit& f = lik.fit();
  const Eigen::Index n = f.n();
  const Eigen::Index p = lik.dim();
  std::vector<T> d = detail::bayes_direction(lik, eps);

  std::vector<T> psi(static_cast<std::size_t>(n), T(0.0));
  std::vector<T> w(static_cast<std::size_t>(n), T(0.0));
  std::vector<T> terms(static_cast<std::size_t>(n), T(0.0));
  for (Eigen::Index i = 0; i < n; ++i) {
    T s(0.0), t(0.0);
    for (Eigen::Index j = 0; j < p; ++j) {
      s = s + f.gtl(i, j) * d[static_cast<std::size_t>(j)];
      t = t + f.ldot(i, j) * d[static_cast<std::size_t>(j)];
    }
    if (f.family == Family::binary) {
      T lq0e = f.lq0[i] + lik.u0()[i] * s;
      T lq1e = f.lq1[i] + lik.u1()[i] * s;
      psi[static_cast<std::size_t>(i)] = logistic(lq1e) - logistic(lq0e);
    } else {
      psi[static_cast<std::size_t>(i)] = (f.qbar1[i] + (f.sigma2_1 * lik.u1()[i]) * s) -
                                         (f.qbar0[i] + (f.sigma2_0 * lik.u0()[i]) * s);
    }
    terms[static_cast<std::size_t>(i)] = lik.logw()[i] + t;
  }
  T lse = detail::log_sum_exp(terms);
  for (std::size_t i = 0; i < terms.size(); ++i) w[i] = exp(terms[i] - lse);

  if constexpr (std::is_same_v<T, double>) {
    Eigen::VectorXd pv = Eigen::Map<const Eigen::VectorXd>(psi.data(), n);
    Eigen::VectorXd wv = Eigen::Map<const Eigen::VectorXd>(w.data(), n);
    Eigen::VectorXd b = solve_beta(lik.spec(), pv, wv, f.v, &f.beta);
    return std::vector<double>(b.data(), b.data() + p);
  } else {
    return solve_beta_dual(lik.spec(), psi, w, f.v, &f.beta);
  }
}

// Jacobian of the pullback by implicit differentiation through the inner
// solve; falls back to central differences when the implicit step hits a
// singular risk hessian.
template <typename Spec>
JacobianResult vartheta_with_jacobian(const TargetedLikelihood<Spec>& lik,
                                      const Eigen::VectorXd& eps) {
  const Eigen::Index p = lik.dim();
  auto at = [&lik](const Eigen::VectorXd& e) {
    std::vector<double> b =
        vartheta(lik, std::span<const double>(e.data(), static_cast<std::size_t>(e.size())));
    return Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size())).eval();
  };
  try {
    auto fn = [&lik](std::span<const Dual1> e) { return vartheta(lik, e); };
    return jacobian(fn, std::span<const double>(eps.data(), static_cast<std::size_t>(eps.size())));
  } catch (const Error& e) {
    if (e.code() != errc::rank_deficient) throw;
    JacobianResult out;
    out.value = at(eps);
    out.jac.resize(p, p);
    const double h = 1e-6;
    for (Eigen::Index k = 0; k < p; ++k) {
      Eigen::VectorXd lo = eps, hi = eps;
      lo[k] -= h;
      hi[k] += h;
      out.jac.col(k) = (at(hi) - at(lo)) / (2.0 * h);
    }
    return out;
  }
}

// Prior on the fluctuation coordinate, induced from the prior on beta by
// the change of variables through the pullback.
template <typename Spec>
double log_prior_eps(const TargetedLikelihood<Spec>& lik, const Eigen::VectorXd& eps,
                     const GaussianPrior& prior, Eigen::VectorXd* beta_out = nullptr) {
  JacobianResult vt = vartheta_with_jacobian(lik, eps);
  const double det = vt.jac.determinant();
  if (!(std::abs(det) >= 1e-12))
    throw Error(errc::degenerate_map, "pullback jacobian is numerically singular (|det| = " +
                                          std::to_string(std::abs(det)) + ")");
  if (beta_out != nullptr) *beta_out = vt.value;
  return prior.log_density(vt.value) + std::log(std::abs(det));
}

struct TargetEval {
  double lp = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd beta;
};

struct McmcDraws {
  Eigen::MatrixXd eps;   // iters x p, post-step position
  Eigen::MatrixXd beta;  // iters x p, pullback at the position
  std::vector<std::uint8_t> accepted;
  Eigen::VectorXd log_post;
  double tau = 0.0;
  long burn_in = 0;
  double acceptance_rate = 0.0;

  long iters() const { return static_cast<long>(eps.rows()); }
  long kept() const { return iters() - burn_in; }
};

// Random-walk chain over a log target. A rejected proposal repeats the
// previous position and its pullback. Draw order is fixed (p normals, one
// uniform per step), so a seed replays the chain exactly.
template <typename Eval>
McmcDraws sample_chain(Eval&& eval, Eigen::Index p, long iters, double tau, Rng& rng,
                       const Eigen::VectorXd& eps0) {
  if (iters <= 0) throw Error(errc::config, "chain length must be positive");
  if (!(tau > 0.0)) throw Error(errc::config, "proposal variance must be positive");
  TargetEval cur = eval(eps0);
  if (!std::isfinite(cur.lp))
    throw Error(errc::eval, "chain start has zero posterior mass");

  McmcDraws out;
  out.tau = tau;
  out.eps.resize(iters, p);
  out.beta.resize(iters, cur.beta.size());
  out.accepted.assign(static_cast<std::size_t>(iters), 0);
  out.log_post.resize(iters);

  Eigen::VectorXd eps = eps0;
  const double sd = std::sqrt(tau);
  long acc = 0;
  for (long k = 0; k < iters; ++k) {
    Eigen::VectorXd prop = eps;
    for (Eigen::Index j = 0; j < p; ++j) prop[j] += sd * rng.normal();
    TargetEval pe = eval(prop);
    const double u = rng.uniform();
    if (std::log(u) < pe.lp - cur.lp) {
      eps = prop;
      cur = std::move(pe);
      out.accepted[static_cast<std::size_t>(k)] = 1;
      ++acc;
    }
    out.eps.row(k) = eps.transpose();
    out.beta.row(k) = cur.beta.transpose();
    out.log_post[k] = cur.lp;
  }
  out.acceptance_rate = static_cast<double>(acc) / static_cast<double>(iters);
  return out;
}

struct TuneOptions {
  long pilot_iters = 1000;
  int max_rounds = 20;
  double tau_lo = 1e-4;
  double tau_hi = 10.0;
  double band_lo = 0.3;
  double band_hi = 0.4;
};

struct TuneResult {
  double tau = 0.0;
  double acceptance = 0.0;
  int rounds = 0;
  bool in_band = false;
};

// Bisection on the proposal scale against the pilot acceptance rate: too
// few acceptances shrink the bracket downward, too many upward. Returns
// the last midpoint when the band is never hit.
template <typename Eval>
TuneResult tune_tau(Eval&& eval, Eigen::Index p, const Eigen::VectorXd& eps0, std::uint64_t seed,
                    const TuneOptions& t = {}) {
  if (t.pilot_iters <= 0 || t.max_rounds <= 0)
    throw Error(errc::config, "pilot length and round count must be positive");
  if (!(t.tau_lo > 0.0 && t.tau_hi > t.tau_lo))
    throw Error(errc::config, "proposal bracket must satisfy 0 < lo < hi");
  if (!(t.band_lo > 0.0 && t.band_hi > t.band_lo && t.band_hi < 1.0))
    throw Error(errc::config, "acceptance band must satisfy 0 < lo < hi < 1");
  double lo = t.tau_lo, hi = t.tau_hi;
  TuneResult out;
  for (int k = 0; k < t.max_rounds; ++k) {
    const double tau = 0.5 * (lo + hi);
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(k)));
    McmcDraws pilot = sample_chain(eval, p, t.pilot_iters, tau, rng, eps0);
    out.tau = tau;
    out.acceptance = pilot.acceptance_rate;
    out.rounds = k + 1;
    if (pilot.acceptance_rate > t.band_lo && pilot.acceptance_rate < t.band_hi) {
      out.in_band = true;
      return out;
    }
    if (pilot.acceptance_rate <= t.band_lo)
      hi = tau;
    else
      lo = tau;
  }
  return out;
}

struct McmcOptions {
  long iters = 10000;
  long burn_in = -1;  // < 0 keeps the first fifth as warm-up
  double tau = -1.0;  // <= 0 tunes the proposal scale first
  std::uint64_t seed = 1;
  GaussianPrior prior;  // empty: standard normal on beta
  TuneOptions tune;
};

// Random-walk sampler over the fluctuation coordinate. Inner-solve failures
// and singular pullbacks at a proposal are treated as zero mass.
template <typename Spec>
McmcDraws metropolis_hastings(const TargetedLikelihood<Spec>& lik, const McmcOptions& opts = {}) {
  const Eigen::Index p = lik.dim();
  const GaussianPrior prior = opts.prior.empty() ? GaussianPrior::standard(p) : opts.prior;
  if (prior.mean.size() != p)
    throw Error(errc::config, "prior dimension does not match the model");
  if (opts.iters <= 0) throw Error(errc::config, "chain length must be positive");
  const long burn = opts.burn_in >= 0 ? opts.burn_in : opts.iters / 5;
  if (burn >= opts.iters) throw Error(errc::config, "burn-in consumes the whole chain");

  auto eval = [&lik, &prior](const Eigen::VectorXd& e) -> TargetEval {
    TargetEval out;
    std::span<const double> es(e.data(), static_cast<std::size_t>(e.size()));
    if (!lik.inside_box(es)) return out;
    try {
      Eigen::VectorXd beta;
      const double lp = log_prior_eps(lik, e, prior, &beta);
      out.lp = lp + log_targeted_likelihood(lik, es);
      out.beta = std::move(beta);
    } catch (const Error& err) {
      if (err.code() == errc::degenerate_map || err.code() == errc::rank_deficient ||
          err.code() == errc::nonconvergence)
        return TargetEval{};
      throw;
    }
    return out;
  };

  double tau = opts.tau;
  if (!(tau > 0.0))
    tau = tune_tau(eval, p, Eigen::VectorXd::Zero(p), mix_seed(opts.seed, 0x74756e65ULL),
                   opts.tune)
              .tau;
  Rng rng(opts.seed);
  McmcDraws draws = sample_chain(eval, p, opts.iters, tau, rng, Eigen::VectorXd::Zero(p));
  draws.burn_in = burn;
  return draws;
}

struct PosteriorSummary {
  Eigen::VectorXd median, lo, hi, mean, sd, prob_pos;
  double level = 0.95;
  long kept = 0;
};

inline PosteriorSummary posterior_summaries(const McmcDraws& draws, double level = 0.95) {
  if (!(level > 0.0 && level < 1.0))
    throw Error(errc::config, "credible level must lie in (0,1)");
  const long kept = draws.kept();
  if (kept < 100)
    throw Error(errc::insufficient_data, "posterior summaries need at least 100 retained draws, have " +
                                             std::to_string(kept));
  const Eigen::Index p = draws.beta.cols();
  PosteriorSummary out;
  out.level = level;
  out.kept = kept;
  out.median.resize(p);
  out.lo.resize(p);
  out.hi.resize(p);
  out.mean.resize(p);
  out.sd.resize(p);
  out.prob_pos.resize(p);
  const double alpha = 1.0 - level;
  for (Eigen::Index j = 0; j < p; ++j) {
    std::vector<double> col(static_cast<std::size_t>(kept));
    long pos = 0;
    double mean = 0.0;
    for (long t = 0; t < kept; ++t) {
      const double b = draws.beta(draws.burn_in + t, j);
      col[static_cast<std::size_t>(t)] = b;
      if (b > 0.0) ++pos;
      mean += b;
    }
    mean /= static_cast<double>(kept);
    double ss = 0.0;
    for (double b : col) ss += (b - mean) * (b - mean);
    std::sort(col.begin(), col.end());
    out.median[j] = median_sorted(col);
    out.lo[j] = quantile_sorted(col, alpha / 2.0);
    out.hi[j] = quantile_sorted(col, 1.0 - alpha / 2.0);
    out.mean[j] = mean;
    out.sd[j] = kept > 1 ? std::sqrt(ss / static_cast<double>(kept - 1)) : 0.0;
    out.prob_pos[j] = static_cast<double>(pos) / static_cast<double>(kept);
  }
  return out;
}

struct ChainDiagnostics {
  std::vector<bool> plateau;      // coordinate pinned at an extreme while eps moves
  std::vector<long> plateau_hits; // draws at the worse of the two extremes
  double acceptance_rate = 0.0;
  double tau = 0.0;
  long kept = 0;
  long burn_in = 0;
};

// A coordinate that sits at its own extreme for a nontrivial share of the
// chain while the underlying fluctuation keeps moving indicates a
// collapsed pullback, not genuine posterior mass.
inline ChainDiagnostics diagnostic_export(const McmcDraws& draws) {
  const long kept = draws.kept();
  if (kept <= 0) throw Error(errc::insufficient_data, "no retained draws to diagnose");
  const Eigen::Index p = draws.beta.cols();
  ChainDiagnostics out;
  out.plateau.assign(static_cast<std::size_t>(p), false);
  out.plateau_hits.assign(static_cast<std::size_t>(p), 0);
  out.acceptance_rate = draws.acceptance_rate;
  out.tau = draws.tau;
  out.kept = kept;
  out.burn_in = draws.burn_in;
  const double atol = 1e-6;
  const double need = std::max(2.0, 0.01 * static_cast<double>(kept));
  for (Eigen::Index j = 0; j < p; ++j) {
    const auto col = draws.beta.col(j).segment(draws.burn_in, kept);
    for (double extreme : {col.maxCoeff(), col.minCoeff()}) {
      long hits = 0;
      double elo = std::numeric_limits<double>::infinity();
      double ehi = -std::numeric_limits<double>::infinity();
      for (long t = 0; t < kept; ++t) {
        if (std::abs(col[t] - extreme) > atol) continue;
        ++hits;
        const double e = draws.eps(draws.burn_in + t, j);
        elo = std::min(elo, e);
        ehi = std::max(ehi, e);
      }
      out.plateau_hits[static_cast<std::size_t>(j)] =
          std::max(out.plateau_hits[static_cast<std::size_t>(j)], hits);
      if (static_cast<double>(hits) >= need && ehi - elo > atol)
        out.plateau[static_cast<std::size_t>(j)] = true;
    }
  }
  return out;
}

// Distance of each retained marginal from the normal limit with the given
// center and variance.
inline Eigen::VectorXd bvm_check(const McmcDraws& draws, const Eigen::VectorXd& center,
                                 const Eigen::VectorXd& variance) {
  const long kept = draws.kept();
  if (kept <= 0) throw Error(errc::insufficient_data, "no retained draws to compare");
  const Eigen::Index p = draws.beta.cols();
  if (center.size() != p || variance.size() != p)
    throw Error(errc::config, "reference moments do not match the draw dimension");
  Eigen::VectorXd ks(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    if (!(variance[j] > 0.0))
      throw Error(errc::config, "reference variance must be positive");
    std::vector<double> col(static_cast<std::size_t>(kept));
    for (long t = 0; t < kept; ++t)
      col[static_cast<std::size_t>(t)] = draws.beta(draws.burn_in + t, j);
    std::sort(col.begin(), col.end());
    const double mu = center[j];
    const double sd = std::sqrt(variance[j]);
    ks[j] = ks_distance_sorted(col, [mu, sd](double x) { return normal_cdf((x - mu) / sd); });
  }
  return ks;
}

template <typename Spec>
Eigen::VectorXd bvm_check(const McmcDraws& draws, const TargetedLikelihood<Spec>& lik) {
  const TargetedFit& f = lik.fit();
  Eigen::VectorXd variance = f.cov.diagonal() / static_cast<double>(f.n());
  return bvm_check(draws, f.beta, variance);
}

}  // namespace tmsm
