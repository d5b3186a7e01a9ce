// A user-supplied working model and loss plugged into the estimation engine.
// The model is quadratic in the effect modifier; the loss is log-cosh. Both
// only have to be callable templates over the scalar layer: every derivative
// the targeting loop and the sampler need comes out of the same definitions.

#include <Eigen/Dense>
#include <iostream>
#include <span>

#include "targeted_msm/bayes.hpp"
#include "targeted_msm/model.hpp"
#include "targeted_msm/nuisance.hpp"
#include "targeted_msm/rng.hpp"
#include "targeted_msm/sim.hpp"
#include "targeted_msm/tmle.hpp"

namespace {

struct QuadraticModel {
  // m(beta, v) = beta1 + beta2 v + beta3 v^2. No linear-basis hook: the
  // solver falls back to Newton from a zero start.
  template <typename T>
  T operator()(std::span<const T> beta, std::span<const double> v) const {
    return beta[0] + beta[1] * v[0] + beta[2] * (v[0] * v[0]);
  }
};

struct LogCoshLoss {
  // log cosh(t - m), written with exp/log so the dual overloads apply.
  template <typename A, typename B>
  auto operator()(const A& t, const B& m) const {
    using std::exp;
    using std::log;
    auto d = t - m;
    return log(exp(d) + exp(-d)) - std::log(2.0);
  }
};

}  // namespace

int main() {
  const tmsm::MsmSpec<QuadraticModel, LogCoshLoss> spec{{}, {}, 3};

  tmsm::Rng rng(2024);
  if (!tmsm::check_valid_loss(spec, rng, 200, -2.0, 2.0)) {
    std::cerr << "loss is not minimized on the diagonal\n";
    return 1;
  }
  std::cout << "model: m(beta, v) = beta1 + beta2 v + beta3 v^2\n"
            << "loss:  L(t, m) = log cosh(t - m), valid on 200 random probes\n\n";

  const tmsm::Dataset data = tmsm::generate_dataset(300, 7u);

  const tmsm::Nuisance nu = tmsm::make_nuisance(data);
  const tmsm::TargetedFit fit = tmsm::target(spec, data, nu);

  std::cout << "targeted fit, n = " << fit.n() << ":\n";
  for (Eigen::Index j = 0; j < fit.beta.size(); ++j)
    std::cout << "  beta" << (j + 1) << " = " << fit.beta[j] << "  [" << fit.ci_lo[j] << ", "
              << fit.ci_hi[j] << "]\n";
  std::cout << "  iterations = " << fit.iterations
            << ", mean influence norm = " << fit.eif_mean_norm << "\n\n";

  const tmsm::TargetedLikelihood lik(spec, fit);
  tmsm::McmcOptions mopts;
  mopts.iters = 1000;
  mopts.seed = 11;
  mopts.tune.pilot_iters = 300;  // the generic dual path has no fast lane
  const tmsm::McmcDraws draws = tmsm::metropolis_hastings(lik, mopts);
  const tmsm::PosteriorSummary post = tmsm::posterior_summaries(draws);

  std::cout << "targeted posterior, " << post.kept << " retained draws, tau = " << draws.tau
            << ", acceptance = " << draws.acceptance_rate << ":\n";
  for (Eigen::Index j = 0; j < post.median.size(); ++j)
    std::cout << "  beta" << (j + 1) << " ~ " << post.median[j] << "  [" << post.lo[j] << ", "
              << post.hi[j] << "]\n";
  return 0;
}
