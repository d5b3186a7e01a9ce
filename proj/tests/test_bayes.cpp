#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <span>
#include <vector>

#include "support/oracles.hpp"
#include "targeted_msm/bayes.hpp"
#include "targeted_msm/dataset.hpp"
#include "targeted_msm/model.hpp"
#include "targeted_msm/nuisance.hpp"
#include "targeted_msm/rng.hpp"
#include "targeted_msm/tmle.hpp"

namespace {

double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }

tmsm::Dataset binary_data(tmsm::Rng& rng, Eigen::Index n) {
  tmsm::Dataset d;
  d.family = tmsm::Family::binary;
  d.x.resize(n, 1);
  d.a.resize(n);
  d.y.resize(n);
  d.v_cols = {0};
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = 2.0 * rng.uniform() - 1.0;
    d.x(i, 0) = v;
    d.a[i] = rng.bernoulli(sigma(0.4 * v)) ? 1.0 : 0.0;
    d.y[i] = rng.bernoulli(sigma(-0.3 + 1.2 * d.a[i] + 0.8 * v)) ? 1.0 : 0.0;
  }
  return d;
}

tmsm::Dataset continuous_data(tmsm::Rng& rng, Eigen::Index n) {
  tmsm::Dataset d;
  d.family = tmsm::Family::continuous;
  d.x.resize(n, 1);
  d.a.resize(n);
  d.y.resize(n);
  d.v_cols = {0};
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = 2.0 * rng.uniform() - 1.0;
    d.x(i, 0) = v;
    d.a[i] = rng.bernoulli(sigma(-0.2 + 0.5 * v)) ? 1.0 : 0.0;
    d.y[i] = 0.2 + 1.0 * d.a[i] + 0.3 * v + 0.5 * d.a[i] * v + 0.3 * rng.normal();
  }
  return d;
}

tmsm::TargetedFit make_fit(std::uint64_t seed, Eigen::Index n, tmsm::Family fam) {
  tmsm::Rng rng(seed);
  tmsm::Dataset d = fam == tmsm::Family::binary ? binary_data(rng, n) : continuous_data(rng, n);
  tmsm::Nuisance nu = tmsm::make_nuisance(d);
  return tmsm::target(tmsm::linear_squared_spec(1), d, nu);
}

Eigen::VectorXd vartheta_at(const tmsm::TargetedLikelihood<tmsm::LinearSquaredSpec>& lik,
                            const Eigen::VectorXd& eps) {
  std::vector<double> b = tmsm::vartheta(
      lik, std::span<const double>(eps.data(), static_cast<std::size_t>(eps.size())));
  return Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
}

// Hand-built draw container for the summary and diagnostic tests.
tmsm::McmcDraws draws_from(const Eigen::MatrixXd& beta, const Eigen::MatrixXd& eps,
                           long burn_in) {
  tmsm::McmcDraws d;
  d.beta = beta;
  d.eps = eps;
  d.burn_in = burn_in;
  d.accepted.assign(static_cast<std::size_t>(beta.rows()), 1);
  d.log_post = Eigen::VectorXd::Zero(beta.rows());
  d.tau = 1.0;
  d.acceptance_rate = 1.0;
  return d;
}

}  // namespace

TEST_CASE("likelihood at zero matches the frozen state") {
  for (tmsm::Family fam : {tmsm::Family::binary, tmsm::Family::continuous}) {
    tmsm::TargetedFit fit = make_fit(fam == tmsm::Family::binary ? 61 : 62, 300, fam);
    tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);

    double hand = 0.0;
    const double ln2pi = std::log(2.0 * M_PI);
    for (Eigen::Index i = 0; i < fit.n(); ++i) {
      const double q = fit.a[i] == 1.0 ? fit.qbar1[i] : fit.qbar0[i];
      if (fam == tmsm::Family::binary) {
        hand += fit.y[i] * std::log(q) + (1.0 - fit.y[i]) * std::log(1.0 - q);
      } else {
        const double s2 = fit.a[i] == 1.0 ? fit.sigma2_1 : fit.sigma2_0;
        hand += -0.5 * (fit.y[i] - q) * (fit.y[i] - q) / s2 - 0.5 * (ln2pi + std::log(s2));
      }
      hand += std::log(fit.w[i]);
    }
    hand -= static_cast<double>(fit.n()) * std::log(fit.w.sum());

    Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
    const double got =
        tmsm::log_targeted_likelihood(lik, std::span<const double>(zero.data(), 2));
    CHECK(got == Catch::Approx(hand).epsilon(1e-10));
  }
}

TEST_CASE("likelihood score at zero equals the scaled mean influence function") {
  tmsm::TargetedFit fit = make_fit(63, 400, tmsm::Family::binary);
  tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);

  Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
  auto f = [&lik](std::span<const tmsm::Dual1> e) { return tmsm::log_targeted_likelihood(lik, e); };
  tmsm::GradientResult g = tmsm::gradient(f, std::span<const double>(zero.data(), 2));

  Eigen::VectorXd mean_eif = fit.eif.colwise().mean();
  Eigen::VectorXd expected = static_cast<double>(fit.n()) * mean_eif;
  CHECK((g.grad - expected).lpNorm<Eigen::Infinity>() < 1e-5);
  // Targeting has already made this second-order small.
  CHECK(g.grad.lpNorm<Eigen::Infinity>() <
        static_cast<double>(fit.n()) * fit.eif_mean_norm + 1e-9);
}

TEST_CASE("proposals outside the box carry zero mass") {
  tmsm::TargetedFit fit = make_fit(64, 200, tmsm::Family::binary);
  tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);
  Eigen::VectorXd out(2);
  out << 10.5, 0.0;
  const double lp = tmsm::log_targeted_likelihood(lik, std::span<const double>(out.data(), 2));
  CHECK(lp == -std::numeric_limits<double>::infinity());
}

TEST_CASE("pullback at zero returns the targeted estimate unchanged") {
  for (tmsm::Family fam : {tmsm::Family::binary, tmsm::Family::continuous}) {
    tmsm::TargetedFit fit = make_fit(fam == tmsm::Family::binary ? 65 : 66, 250, fam);
    tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);
    Eigen::VectorXd b = vartheta_at(lik, Eigen::VectorXd::Zero(2));
    CHECK(b[0] == fit.beta[0]);
    CHECK(b[1] == fit.beta[1]);
  }
}

TEST_CASE("pullback jacobian matches finite differences") {
  tmsm::TargetedFit fit = make_fit(67, 300, tmsm::Family::binary);
  tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);

  for (Eigen::Vector2d eps : {Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(0.3, -0.2),
                              Eigen::Vector2d(-0.7, 0.5)}) {
    tmsm::JacobianResult jr = tmsm::vartheta_with_jacobian(lik, eps);
    CHECK((jr.value - vartheta_at(lik, eps)).lpNorm<Eigen::Infinity>() < 1e-12);

    const double h = 1e-6;
    for (int k = 0; k < 2; ++k) {
      Eigen::VectorXd lo = eps, hi = eps;
      lo[k] -= h;
      hi[k] += h;
      Eigen::VectorXd fd = (vartheta_at(lik, hi) - vartheta_at(lik, lo)) / (2.0 * h);
      for (int r = 0; r < 2; ++r)
        CHECK(std::abs(fd[r] - jr.jac(r, k)) <= 1e-5 * std::max(std::abs(jr.jac(r, k)), 0.1));
    }
  }
}

TEST_CASE("prior on the fluctuation composes density and volume change") {
  tmsm::TargetedFit fit = make_fit(68, 250, tmsm::Family::binary);
  tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);
  tmsm::GaussianPrior prior = tmsm::GaussianPrior::standard(2);

  // The density itself against the closed form.
  Eigen::VectorXd b(2);
  b << 0.4, -1.1;
  const double hand_pdf = -0.5 * b.squaredNorm() - std::log(2.0 * M_PI);
  CHECK(prior.log_density(b) == Catch::Approx(hand_pdf).epsilon(1e-12));

  Eigen::VectorXd eps(2);
  eps << 0.25, -0.4;
  Eigen::VectorXd beta_out;
  const double got = tmsm::log_prior_eps(lik, eps, prior, &beta_out);

  // Independent pieces: pullback value by the double path, volume change by
  // finite differences.
  Eigen::VectorXd beta_eps = vartheta_at(lik, eps);
  CHECK((beta_out - beta_eps).lpNorm<Eigen::Infinity>() < 1e-12);
  const double h = 1e-6;
  Eigen::MatrixXd jfd(2, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd lo = eps, hi = eps;
    lo[k] -= h;
    hi[k] += h;
    jfd.col(k) = (vartheta_at(lik, hi) - vartheta_at(lik, lo)) / (2.0 * h);
  }
  const double det = jfd(0, 0) * jfd(1, 1) - jfd(0, 1) * jfd(1, 0);
  const double hand = (-0.5 * beta_eps.squaredNorm() - std::log(2.0 * M_PI)) +
                      std::log(std::abs(det));
  CHECK(got == Catch::Approx(hand).margin(1e-6));

  // An indefinite prior covariance is rejected.
  tmsm::GaussianPrior bad;
  bad.mean = Eigen::VectorXd::Zero(2);
  bad.cov.resize(2, 2);
  bad.cov << 1.0, 2.0, 2.0, 1.0;
  try {
    bad.log_density(b);
    FAIL("expected config error");
  } catch (const tmsm::Error& e) {
    CHECK(e.code() == tmsm::errc::config);
  }
}

TEST_CASE("collapsed pullback is reported as a degenerate map") {
  tmsm::TargetedFit fit = make_fit(69, 200, tmsm::Family::binary);
  fit.ldot.setZero();
  fit.gtl.setZero();
  tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);
  Eigen::VectorXd eps(2);
  eps << 0.1, 0.0;
  try {
    tmsm::log_prior_eps(lik, eps, tmsm::GaussianPrior::standard(2));
    FAIL("expected degenerate_map");
  } catch (const tmsm::Error& e) {
    CHECK(e.code() == tmsm::errc::degenerate_map);
  }
}

TEST_CASE("chains replay bit-identically under the same seed") {
  tmsm::TargetedFit fit = make_fit(70, 200, tmsm::Family::binary);
  tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);
  tmsm::McmcOptions opts;
  opts.iters = 300;
  opts.tau = 0.6;
  opts.seed = 77;
  tmsm::McmcDraws a = tmsm::metropolis_hastings(lik, opts);
  tmsm::McmcDraws b = tmsm::metropolis_hastings(lik, opts);
  CHECK((a.eps - b.eps).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.beta - b.beta).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.accepted == b.accepted);
  CHECK((a.log_post - b.log_post).cwiseAbs().maxCoeff() == 0.0);

  opts.seed = 78;
  tmsm::McmcDraws c = tmsm::metropolis_hastings(lik, opts);
  CHECK((a.eps - c.eps).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("rejected proposals repeat the previous state") {
  tmsm::TargetedFit fit = make_fit(71, 200, tmsm::Family::binary);
  tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);
  tmsm::McmcOptions opts;
  opts.iters = 300;
  opts.seed = 5;  // tuned proposals accept roughly a third of the steps
  opts.tune.pilot_iters = 200;
  opts.tune.max_rounds = 10;
  tmsm::McmcDraws d = tmsm::metropolis_hastings(lik, opts);

  bool saw_reject = false, saw_accept = false;
  for (long k = 1; k < d.iters(); ++k) {
    if (d.accepted[static_cast<std::size_t>(k)] == 0) {
      saw_reject = true;
      CHECK((d.eps.row(k) - d.eps.row(k - 1)).cwiseAbs().maxCoeff() == 0.0);
      CHECK((d.beta.row(k) - d.beta.row(k - 1)).cwiseAbs().maxCoeff() == 0.0);
    } else {
      saw_accept = true;
      CHECK((d.eps.row(k) - d.eps.row(k - 1)).cwiseAbs().maxCoeff() > 0.0);
    }
  }
  CHECK(saw_reject);
  CHECK(saw_accept);
  CHECK(std::isfinite(d.log_post.minCoeff()));
}

TEST_CASE("random-walk chain recovers the moments of a quadratic target") {
  auto eval = [](const Eigen::VectorXd& e) {
    tmsm::TargetEval out;
    out.lp = -0.5 * e.squaredNorm();
    out.beta = e;
    return out;
  };
  tmsm::Rng rng(901);
  tmsm::McmcDraws d = tmsm::sample_chain(eval, 1, 20000, 5.76, rng, Eigen::VectorXd::Zero(1));
  CHECK(d.acceptance_rate > 0.25);
  CHECK(d.acceptance_rate < 0.60);
  const double mean = d.beta.col(0).mean();
  const double var = (d.beta.col(0).array() - mean).square().mean();
  CHECK(std::abs(mean) < 0.1);
  CHECK(var > 0.85);
  CHECK(var < 1.15);
}

TEST_CASE("proposal tuning lands in the acceptance band") {
  auto eval = [](const Eigen::VectorXd& e) {
    tmsm::TargetEval out;
    out.lp = -0.5 * e.squaredNorm();
    out.beta = e;
    return out;
  };
  tmsm::TuneResult r = tmsm::tune_tau(eval, 2, Eigen::VectorXd::Zero(2), 314);
  CHECK(r.in_band);
  CHECK(r.acceptance > 0.3);
  CHECK(r.acceptance < 0.4);
  CHECK(r.tau > 1e-4);
  CHECK(r.tau < 10.0);
}

TEST_CASE("proposal tuning reports the bracket limit when no scale fits") {
  // Always accept: the bracket walks to its upper end.
  auto always = [](const Eigen::VectorXd& e) {
    tmsm::TargetEval out;
    out.lp = 0.0;
    out.beta = e;
    return out;
  };
  tmsm::TuneResult hi = tmsm::tune_tau(always, 1, Eigen::VectorXd::Zero(1), 2);
  CHECK_FALSE(hi.in_band);
  CHECK(hi.acceptance == 1.0);
  CHECK(hi.rounds == 20);
  const double span = 10.0 - 1e-4;
  CHECK(hi.tau == Catch::Approx(10.0 - span / 1048576.0).epsilon(1e-12));

  // Never accept (zero mass away from the start): the bracket walks down.
  auto never = [](const Eigen::VectorXd& e) {
    tmsm::TargetEval out;
    out.beta = e;
    if (e.cwiseAbs().maxCoeff() == 0.0) out.lp = 0.0;
    return out;
  };
  tmsm::TuneResult lo = tmsm::tune_tau(never, 1, Eigen::VectorXd::Zero(1), 3);
  CHECK_FALSE(lo.in_band);
  CHECK(lo.acceptance == 0.0);
  CHECK(lo.tau == Catch::Approx(1e-4 + span / 1048576.0).epsilon(1e-12));
}

TEST_CASE("posterior summaries against hand quantiles") {
  const long n = 100;
  Eigen::MatrixXd beta(n, 2);
  tmsm::Rng rng(11);
  // Scrambled insertion order exercises the sort.
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform() * (i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  for (int i = 0; i < n; ++i) {
    beta(order[static_cast<std::size_t>(i)], 0) = static_cast<double>(i + 1);   // 1..100
    beta(order[static_cast<std::size_t>(i)], 1) = static_cast<double>(i - 50);  // -50..49
  }
  tmsm::McmcDraws d = draws_from(beta, Eigen::MatrixXd::Zero(n, 2), 0);

  tmsm::PosteriorSummary s = tmsm::posterior_summaries(d);
  CHECK(s.kept == 100);
  CHECK(s.median[0] == Catch::Approx(50.5));
  CHECK(s.lo[0] == Catch::Approx(3.475));
  CHECK(s.hi[0] == Catch::Approx(97.525));
  CHECK(s.mean[0] == Catch::Approx(50.5));
  CHECK(s.prob_pos[0] == Catch::Approx(1.0));
  CHECK(s.median[1] == Catch::Approx(-0.5));
  CHECK(s.prob_pos[1] == Catch::Approx(0.49));

  d.burn_in = 1;  // 99 retained draws is not enough
  try {
    tmsm::posterior_summaries(d);
    FAIL("expected insufficient_data");
  } catch (const tmsm::Error& e) {
    CHECK(e.code() == tmsm::errc::insufficient_data);
  }
}

TEST_CASE("plateau diagnostic flags a pinned coordinate") {
  const long n = 500;
  Eigen::MatrixXd beta(n, 2), eps(n, 2);
  for (long t = 0; t < n; ++t) {
    const double e = -2.0 + 4.0 * static_cast<double>(t) / static_cast<double>(n - 1);
    eps(t, 0) = e;
    eps(t, 1) = e;
    beta(t, 0) = std::min(e, 1.0);  // saturates at the top
    beta(t, 1) = 2.0 * e;           // moves freely
  }
  tmsm::ChainDiagnostics diag = tmsm::diagnostic_export(draws_from(beta, eps, 0));
  CHECK(diag.plateau[0]);
  CHECK_FALSE(diag.plateau[1]);
  CHECK(diag.plateau_hits[0] >= 100);

  // A frozen chain (rejection streak) pins eps too, so it must not flag;
  // a constant coordinate under a moving fluctuation must.
  Eigen::MatrixXd beta2(n, 2), eps2(n, 2);
  for (long t = 0; t < n; ++t) {
    beta2(t, 0) = 3.0;
    eps2(t, 0) = 0.7;
    beta2(t, 1) = 3.0;
    eps2(t, 1) = -2.0 + 4.0 * static_cast<double>(t) / static_cast<double>(n - 1);
  }
  tmsm::ChainDiagnostics diag2 = tmsm::diagnostic_export(draws_from(beta2, eps2, 0));
  CHECK_FALSE(diag2.plateau[0]);
  CHECK(diag2.plateau[1]);
}

TEST_CASE("distribution distance is small for draws from the limit law") {
  const long n = 5000;
  Eigen::VectorXd center(2), variance(2);
  center << 0.4, -0.1;
  variance << 0.004, 0.0009;
  Eigen::MatrixXd beta(n, 2);
  tmsm::Rng rng(313);
  for (long t = 0; t < n; ++t)
    for (int j = 0; j < 2; ++j)
      beta(t, j) = center[j] + std::sqrt(variance[j]) * rng.normal();
  tmsm::McmcDraws d = draws_from(beta, Eigen::MatrixXd::Zero(n, 2), 0);

  Eigen::VectorXd ks = tmsm::bvm_check(d, center, variance);
  CHECK(ks[0] < 0.03);
  CHECK(ks[1] < 0.03);

  Eigen::VectorXd shifted = center;
  shifted[0] += 3.0 * std::sqrt(variance[0]);
  Eigen::VectorXd ks2 = tmsm::bvm_check(d, shifted, variance);
  CHECK(ks2[0] > 0.3);
}

TEST_CASE("posterior over a targeted fit concentrates at the estimate") {
  tmsm::TargetedFit fit = make_fit(72, 250, tmsm::Family::binary);
  tmsm::TargetedLikelihood lik(tmsm::linear_squared_spec(1), fit);

  tmsm::McmcOptions opts;
  opts.iters = 1200;
  opts.seed = 99;
  opts.tune.pilot_iters = 300;
  opts.tune.max_rounds = 12;
  tmsm::McmcDraws draws = tmsm::metropolis_hastings(lik, opts);
  CHECK(draws.tau > 0.0);
  CHECK(draws.burn_in == 240);
  CHECK(draws.acceptance_rate > 0.05);
  CHECK(draws.acceptance_rate < 0.8);

  tmsm::PosteriorSummary s = tmsm::posterior_summaries(draws);
  for (int j = 0; j < 2; ++j) {
    CHECK(std::abs(s.median[j] - fit.beta[j]) < 4.0 * fit.se[j]);
    CHECK(s.lo[j] < s.median[j]);
    CHECK(s.hi[j] > s.median[j]);
  }

  Eigen::VectorXd ks = tmsm::bvm_check(draws, lik);
  CHECK(ks.maxCoeff() < 0.35);

  tmsm::ChainDiagnostics diag = tmsm::diagnostic_export(draws);
  CHECK_FALSE(diag.plateau[0]);
  CHECK_FALSE(diag.plateau[1]);
  CHECK(diag.kept == 960);
}
