#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "targeted_msm/bayes.hpp"
#include "targeted_msm/dataset.hpp"
#include "targeted_msm/errors.hpp"
#include "targeted_msm/model.hpp"
#include "targeted_msm/nuisance.hpp"
#include "targeted_msm/rng.hpp"
#include "targeted_msm/tmle.hpp"

namespace tmsm {

// Nuisance column sets for the four specification scenarios. Misspecified
// regressions see only the first and fourth covariates.
struct ScenarioSpec {
  char id;
  std::vector<int> g_cols, q_cols;
};

inline ScenarioSpec scenario(char id) {
  const std::vector<int> full{0, 1, 2, 3};
  const std::vector<int> reduced{0, 3};
  switch (id) {
    case 'a':
      return {id, full, full};
    case 'b':
      return {id, full, reduced};
    case 'c':
      return {id, reduced, full};
    case 'd':
      return {id, reduced, reduced};
    default:
      throw Error(errc::config, std::string("unknown scenario: ") + id);
  }
}

// One draw from the study design: four standard normal covariates, a
// logistic treatment model, and a logistic outcome model with a
// treatment-by-covariate interaction. The effect modifier is the fourth
// covariate.
inline Dataset generate_dataset(Eigen::Index n, Rng& rng) {
  if (n < 1) throw Error(errc::config, "dataset size must be at least 1");
  Dataset d;
  d.family = Family::binary;
  d.x.resize(n, 4);
  d.a.resize(n);
  d.y.resize(n);
  d.v_cols = {3};
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < 4; ++j) d.x(i, j) = rng.normal();
    const double pg =
        logistic(0.5 * d.x(i, 0) - 0.5 * d.x(i, 1) + 0.2 * d.x(i, 2) - 0.1 * d.x(i, 3));
    d.a[i] = rng.bernoulli(pg) ? 1.0 : 0.0;
    const double pq =
        logistic(d.x(i, 1) + d.x(i, 2) + 3.0 * d.a[i] + 1.5 * d.a[i] * d.x(i, 3));
    d.y[i] = rng.bernoulli(pq) ? 1.0 : 0.0;
  }
  return d;
}

inline Dataset generate_dataset(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  return generate_dataset(n, rng);
}

struct OracleResult {
  Eigen::Vector2d beta;
  Eigen::Vector2d mc_se;
  std::uint64_t draws = 0;
};

// Monte Carlo projection of the true contrast onto the working model
// basis (1, x4). The contrast has a closed form given the covariates, so
// a single pass accumulates the moments E[x4^k psi^m] (k <= 4, m <= 2)
// and the normal equations plus the OLS influence function variance are
// read off the moment table afterwards.
inline OracleResult true_beta_oracle(std::uint64_t draws = 10'000'000,
                                     std::uint64_t seed = 0x6f7261636cULL) {
  if (draws < 1000) throw Error(errc::config, "oracle needs at least 1000 draws");
  Rng rng(seed);
  double mom[5][3] = {};
  for (std::uint64_t t = 0; t < draws; ++t) {
    const double s = rng.normal() + rng.normal();  // x2 + x3
    const double x4 = rng.normal();
    const double psi = logistic(s + 3.0 + 1.5 * x4) - logistic(s);
    double xk = 1.0;
    for (int k = 0; k <= 4; ++k) {
      mom[k][0] += xk;
      mom[k][1] += xk * psi;
      mom[k][2] += xk * psi * psi;
      xk *= x4;
    }
  }
  const double inv = 1.0 / static_cast<double>(draws);
  for (auto& row : mom)
    for (double& c : row) c *= inv;

  Eigen::Matrix2d g;
  g << mom[0][0], mom[1][0], mom[1][0], mom[2][0];
  Eigen::Vector2d b(mom[0][1], mom[1][1]);
  Eigen::Vector2d beta = g.ldlt().solve(b);

  // E[x4^k r^2] with r = psi - beta1 - beta2 x4, expanded over the table.
  auto rsq = [&](int k) {
    return mom[k][2] - 2.0 * beta[0] * mom[k][1] - 2.0 * beta[1] * mom[k + 1][1] +
           beta[0] * beta[0] * mom[k][0] + 2.0 * beta[0] * beta[1] * mom[k + 1][0] +
           beta[1] * beta[1] * mom[k + 2][0];
  };
  Eigen::Matrix2d meat;
  meat << rsq(0), rsq(1), rsq(1), rsq(2);
  Eigen::Matrix2d ginv = g.inverse();
  Eigen::Matrix2d cov = ginv * meat * ginv;

  OracleResult out;
  out.beta = beta;
  out.draws = draws;
  out.mc_se[0] = std::sqrt(cov(0, 0) * inv);
  out.mc_se[1] = std::sqrt(cov(1, 1) * inv);
  return out;
}

// Aggregates for one estimator over the kept replications. Bias is the
// mean absolute deviation from the oracle truth; coverage counts
// interval hits at the requested level.
struct ArmSummary {
  Eigen::VectorXd coverage, coverage_se;
  Eigen::VectorXd bias, bias_se;
  Eigen::VectorXd mean_point, point_sd;
};

struct SimResult {
  char scenario = 'a';
  Eigen::Index n = 0;
  int reps_requested = 0;
  int kept = 0;
  int failures = 0;
  std::vector<std::string> failure_notes;
  Eigen::VectorXd beta0;
  double max_eif_mean_norm = 0.0;
  ArmSummary freq;
  std::optional<ArmSummary> bayes;
};

struct SimOptions {
  char scenario = 'a';
  Eigen::Index n = 1000;
  int reps = 200;
  bool bayesian = false;
  std::uint64_t seed = 1;
  Eigen::VectorXd beta0;  // oracle truth for coverage and bias
  double level = 0.95;
  McmcOptions mcmc;       // Bayesian arm configuration (seed derived per rep)
  TargetOptions target;
  double g_trunc = 0.01;
  int threads = 0;        // 0 picks hardware concurrency; env cap applies
};

namespace detail {

struct RepOutcome {
  bool ok = false;
  std::string note;
  double eifn = 0.0;
  Eigen::VectorXd beta, lo, hi;
  Eigen::VectorXd bmed, blo, bhi;
};

inline int resolve_threads(int requested, int reps) {
  int t = requested;
  if (t <= 0) {
    unsigned hw = std::thread::hardware_concurrency();
    t = hw == 0 ? 1 : static_cast<int>(hw);
  }
  if (const char* env = std::getenv("TARGETED_MSM_THREADS")) {
    char* end = nullptr;
    long cap = std::strtol(env, &end, 10);
    if (end != env && cap > 0 && cap < 1024) t = std::min(t, static_cast<int>(cap));
  }
  return std::max(1, std::min(t, reps));
}

// Per-coordinate summary over the kept replications for one estimator.
inline ArmSummary summarize_arm(const std::vector<const RepOutcome*>& kept,
                                const Eigen::VectorXd& beta0, bool bayes_arm) {
  const Eigen::Index p = beta0.size();
  const double m = static_cast<double>(kept.size());
  ArmSummary s;
  s.coverage = Eigen::VectorXd::Zero(p);
  s.coverage_se = Eigen::VectorXd::Zero(p);
  s.bias = Eigen::VectorXd::Zero(p);
  s.bias_se = Eigen::VectorXd::Zero(p);
  s.mean_point = Eigen::VectorXd::Zero(p);
  s.point_sd = Eigen::VectorXd::Zero(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    double hits = 0.0, abs_sum = 0.0, abs_sq = 0.0, pt_sum = 0.0, pt_sq = 0.0;
    for (const RepOutcome* r : kept) {
      const Eigen::VectorXd& point = bayes_arm ? r->bmed : r->beta;
      const Eigen::VectorXd& lo = bayes_arm ? r->blo : r->lo;
      const Eigen::VectorXd& hi = bayes_arm ? r->bhi : r->hi;
      if (lo[j] <= beta0[j] && beta0[j] <= hi[j]) hits += 1.0;
      const double ad = std::abs(point[j] - beta0[j]);
      abs_sum += ad;
      abs_sq += ad * ad;
      pt_sum += point[j];
      pt_sq += point[j] * point[j];
    }
    const double c = hits / m;
    s.coverage[j] = c;
    s.coverage_se[j] = std::sqrt(c * (1.0 - c) / m);
    s.bias[j] = abs_sum / m;
    const double bv = std::max(0.0, abs_sq / m - s.bias[j] * s.bias[j]);
    s.bias_se[j] = std::sqrt(bv / m);
    s.mean_point[j] = pt_sum / m;
    const double pv = std::max(0.0, pt_sq / m - s.mean_point[j] * s.mean_point[j]);
    s.point_sd[j] = m > 1.5 ? std::sqrt(pv * m / (m - 1.0)) : 0.0;
  }
  return s;
}

}  // namespace detail

// Runs the replication study for one scenario and sample size. Each
// replication owns an RNG stream derived from (seed, rep), so results do
// not depend on the thread count. A targeting run that stops at max_iter
// still counts when its EIF mean norm is below 1/n; other failures are
// recorded, and more than 5% of them is a harness error.
inline SimResult run_scenario(const SimOptions& opts) {
  if (opts.reps < 1) throw Error(errc::config, "reps must be at least 1");
  if (opts.beta0.size() != 2)
    throw Error(errc::config, "run_scenario needs the two-coordinate oracle truth");
  const ScenarioSpec sc = scenario(opts.scenario);
  const LinearSquaredSpec spec = linear_squared_spec(1);

  std::vector<detail::RepOutcome> slots(static_cast<std::size_t>(opts.reps));
  std::atomic<int> next{0};

  auto run_one = [&](int rep) {
    detail::RepOutcome out;
    try {
      const std::uint64_t rep_seed = mix_seed(opts.seed, static_cast<std::uint64_t>(rep));
      Rng rng(rep_seed);
      Dataset data = generate_dataset(opts.n, rng);

      NuisanceOptions nopt;
      nopt.g_trunc = opts.g_trunc;
      nopt.g_cols = sc.g_cols;
      nopt.q_cols = sc.q_cols;
      Nuisance nu = make_nuisance(data, nopt);

      TargetedFit fit = [&] {
        try {
          return target(spec, data, nu, opts.target);
        } catch (const TargetNonconvergence& e) {
          if (e.fit.eif_mean_norm < 1.0 / static_cast<double>(opts.n)) return e.fit;
          throw;
        }
      }();

      out.eifn = fit.eif_mean_norm;
      out.beta = fit.beta;
      out.lo = fit.ci_lo;
      out.hi = fit.ci_hi;

      if (opts.bayesian) {
        TargetedLikelihood<LinearSquaredSpec> lik(spec, fit);
        McmcOptions mc = opts.mcmc;
        mc.seed = mix_seed(rep_seed, 0x6261796573ULL);
        McmcDraws draws = metropolis_hastings(lik, mc);
        PosteriorSummary ps = posterior_summaries(draws, opts.level);
        out.bmed = ps.median;
        out.blo = ps.lo;
        out.bhi = ps.hi;
      }
      out.ok = true;
    } catch (const std::exception& e) {
      out.ok = false;
      out.note = std::string("rep ") + std::to_string(rep) + ": " + e.what();
    }
    slots[static_cast<std::size_t>(rep)] = std::move(out);
  };

  const int nthreads = detail::resolve_threads(opts.threads, opts.reps);
  if (nthreads <= 1) {
    for (int r = 0; r < opts.reps; ++r) run_one(r);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nthreads));
    for (int t = 0; t < nthreads; ++t)
      pool.emplace_back([&] {
        for (int r = next.fetch_add(1); r < opts.reps; r = next.fetch_add(1)) run_one(r);
      });
    for (std::thread& th : pool) th.join();
  }

  SimResult res;
  res.scenario = opts.scenario;
  res.n = opts.n;
  res.reps_requested = opts.reps;
  res.beta0 = opts.beta0;
  std::vector<const detail::RepOutcome*> kept;
  kept.reserve(slots.size());
  for (const detail::RepOutcome& r : slots) {
    if (r.ok) {
      kept.push_back(&r);
      res.max_eif_mean_norm = std::max(res.max_eif_mean_norm, r.eifn);
    } else {
      res.failures += 1;
      res.failure_notes.push_back(r.note);
    }
  }
  res.kept = static_cast<int>(kept.size());
  if (res.failures * 20 > opts.reps) {
    std::string msg = "more than 5% of replications failed (" +
                      std::to_string(res.failures) + "/" + std::to_string(opts.reps) + ")";
    if (!res.failure_notes.empty()) msg += "; first: " + res.failure_notes.front();
    throw Error(errc::harness, msg);
  }
  if (res.kept == 0) throw Error(errc::harness, "no replication survived");

  res.freq = detail::summarize_arm(kept, opts.beta0, false);
  if (opts.bayesian) res.bayes = detail::summarize_arm(kept, opts.beta0, true);
  return res;
}

}  // namespace tmsm
