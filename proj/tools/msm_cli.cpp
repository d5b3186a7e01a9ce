// Command-line shell around the estimation library: estimate, bayes,
// simulate, diagnose. Errors leave as machine-readable JSON on stderr with a
// nonzero exit; results go to stdout or to --out-prefixed files.

#include <CLI11.hpp>

#include <Eigen/Dense>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "targeted_msm/io.hpp"
#include "targeted_msm/model.hpp"
#include "targeted_msm/nuisance.hpp"
#include "targeted_msm/sim.hpp"
#include "targeted_msm/tmle.hpp"

namespace {

using tmsm::errc;
using tmsm::Error;
using tmsm::RunConfig;

int exit_code(errc code) {
  switch (code) {
    case errc::config:
    case errc::parse:
      return 2;
    default:
      return 3;
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(errc::parse, "cannot write \"" + path + "\"");
  out << text;
}

struct Flags {
  std::string config, input, out, family, scenario;
  std::uint64_t seed = 0;
  long iters = 0, burn_in = 0, n = 0;
  int reps = 0;
  bool bayesian = false;

  CLI::Option* config_opt = nullptr;
  CLI::Option* input_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* family_opt = nullptr;
  CLI::Option* scenario_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* iters_opt = nullptr;
  CLI::Option* burn_in_opt = nullptr;
  CLI::Option* n_opt = nullptr;
  CLI::Option* reps_opt = nullptr;
  CLI::Option* bayesian_opt = nullptr;
};

// Config file first, explicit flags on top.
RunConfig resolve(const Flags& f, const std::string& command) {
  RunConfig cfg;
  if (f.config_opt->count()) cfg = tmsm::load_config(f.config);
  cfg.command = command;
  if (f.input_opt && f.input_opt->count()) cfg.input = f.input;
  if (f.out_opt && f.out_opt->count()) cfg.out = f.out;
  if (f.family_opt && f.family_opt->count()) cfg.family = f.family;
  if (f.scenario_opt && f.scenario_opt->count()) cfg.sim.scenario = f.scenario;
  if (f.seed_opt && f.seed_opt->count()) cfg.mcmc.seed = f.seed;
  if (f.iters_opt && f.iters_opt->count()) cfg.mcmc.iters = f.iters;
  if (f.burn_in_opt && f.burn_in_opt->count()) cfg.mcmc.burn_in = f.burn_in;
  if (f.n_opt && f.n_opt->count()) cfg.sim.n = f.n;
  if (f.reps_opt && f.reps_opt->count()) cfg.sim.reps = f.reps;
  if (f.bayesian_opt && f.bayesian_opt->count()) cfg.sim.bayesian = f.bayesian;
  return cfg;
}

struct Fitted {
  tmsm::LoadReport loaded;
  tmsm::LinearSquaredSpec spec;
  tmsm::TargetedFit fit;
};

Fitted fit_from_config(const RunConfig& cfg) {
  if (cfg.input.empty()) throw Error(errc::config, cfg.command + " needs --input");
  const tmsm::Family family = tmsm::family_from_string(cfg.family);
  tmsm::LoadReport loaded = tmsm::load_csv(cfg.input, cfg.columns, family);

  tmsm::NuisanceOptions nopts;
  nopts.g_trunc = cfg.tmle.g_trunc;
  const tmsm::Nuisance nu = tmsm::make_nuisance(loaded.data, nopts);

  const auto spec =
      tmsm::linear_squared_spec(static_cast<Eigen::Index>(loaded.data.v_cols.size()));
  tmsm::TargetOptions topts;
  topts.stop_tol = cfg.tmle.stop_tol;
  topts.max_iter = cfg.tmle.max_iter;
  tmsm::TargetedFit fit = tmsm::target(spec, loaded.data, nu, topts);
  return {std::move(loaded), spec, std::move(fit)};
}

void emit_json(const RunConfig& cfg, const nlohmann::json& j) {
  if (cfg.out.empty())
    std::cout << j.dump(2) << '\n';
  else
    write_text(cfg.out + ".json", j.dump(2) + "\n");
}

int run_estimate(const RunConfig& cfg) {
  const Fitted r = fit_from_config(cfg);
  emit_json(cfg, tmsm::estimate_report(r.fit, r.loaded.dropped_rows));
  return 0;
}

int run_bayes(const RunConfig& cfg) {
  if (cfg.out.empty()) throw Error(errc::config, "bayes needs --out");
  const Fitted r = fit_from_config(cfg);

  tmsm::McmcOptions mo;
  mo.iters = cfg.mcmc.iters;
  mo.burn_in = cfg.mcmc.burn_in;
  mo.tau = cfg.mcmc.tau;
  mo.seed = cfg.mcmc.seed;
  mo.tune.pilot_iters = cfg.mcmc.pilot_iters;
  mo.tune.max_rounds = cfg.mcmc.max_rounds;
  mo.tune.tau_lo = cfg.mcmc.tau_lo;
  mo.tune.tau_hi = cfg.mcmc.tau_hi;
  if (!cfg.prior.mean.empty()) {
    const Eigen::Index p = r.spec.dim;
    if (static_cast<Eigen::Index>(cfg.prior.mean.size()) != p)
      throw Error(errc::config, "prior dimension does not match the working model");
    mo.prior.mean = Eigen::Map<const Eigen::VectorXd>(cfg.prior.mean.data(), p);
    mo.prior.cov = Eigen::Map<const Eigen::VectorXd>(cfg.prior.cov_diag.data(), p).asDiagonal();
  }

  const tmsm::TargetedLikelihood lik(r.spec, r.fit);
  const tmsm::McmcDraws draws = tmsm::metropolis_hastings(lik, mo);
  const tmsm::PosteriorSummary summary = tmsm::posterior_summaries(draws);
  const tmsm::ChainDiagnostics diag = tmsm::diagnostic_export(draws);

  write_text(cfg.out + ".json",
             tmsm::bayes_report(r.fit, draws, summary, diag, r.loaded.dropped_rows).dump(2) + "\n");
  tmsm::write_draws_csv(cfg.out + "_draws.csv", draws);
  std::cerr << "wrote " << cfg.out << ".json and " << cfg.out << "_draws.csv\n";
  return 0;
}

int run_simulate(const RunConfig& cfg) {
  if (cfg.out.empty()) throw Error(errc::config, "simulate needs --out");
  if (cfg.sim.scenario.size() != 1)
    throw Error(errc::config, "scenario must be one of a, b, c, d");

  tmsm::SimOptions so;
  so.scenario = cfg.sim.scenario[0];
  so.n = cfg.sim.n;
  so.reps = cfg.sim.reps;
  so.bayesian = cfg.sim.bayesian;
  so.seed = cfg.mcmc.seed;
  so.threads = cfg.sim.threads;
  so.g_trunc = cfg.tmle.g_trunc;
  so.target.stop_tol = cfg.tmle.stop_tol;
  so.target.max_iter = cfg.tmle.max_iter;
  so.mcmc.iters = cfg.mcmc.iters;
  so.mcmc.burn_in = cfg.mcmc.burn_in;
  so.mcmc.tau = cfg.mcmc.tau;
  so.mcmc.tune.pilot_iters = cfg.mcmc.pilot_iters;
  so.mcmc.tune.max_rounds = cfg.mcmc.max_rounds;
  so.mcmc.tune.tau_lo = cfg.mcmc.tau_lo;
  so.mcmc.tune.tau_hi = cfg.mcmc.tau_hi;

  const tmsm::OracleResult oracle = tmsm::true_beta_oracle();
  so.beta0 = oracle.beta;

  const tmsm::SimResult res = tmsm::run_scenario(so);
  nlohmann::json j = tmsm::sim_report(res);
  j["beta_true_mc_se"] = std::vector<double>(oracle.mc_se.data(),
                                             oracle.mc_se.data() + oracle.mc_se.size());
  j["seed"] = so.seed;

  write_text(cfg.out + ".csv", tmsm::sim_csv(res));
  write_text(cfg.out + ".json", j.dump(2) + "\n");
  std::cerr << "wrote " << cfg.out << ".csv and " << cfg.out << ".json\n";
  return 0;
}

int run_diagnose(const RunConfig& cfg) {
  if (cfg.input.empty()) throw Error(errc::config, "diagnose needs --input (a draws CSV)");
  const tmsm::McmcDraws draws = tmsm::read_draws_csv(cfg.input, cfg.mcmc.burn_in);
  const std::string csv = tmsm::diagnostics_csv(tmsm::diagnostic_export(draws));
  if (cfg.out.empty())
    std::cout << csv;
  else
    write_text(cfg.out + ".csv", csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Loss-based marginal structural models: targeted frequentist and Bayesian inference"};
  app.require_subcommand(1);

  Flags ef, bf, sf, df;

  CLI::App* est = app.add_subcommand("estimate", "Frequentist targeted fit from a CSV dataset");
  ef.input_opt = est->add_option("--input", ef.input, "CSV dataset with a header row");
  ef.config_opt = est->add_option("--config", ef.config, "JSON run configuration");
  ef.out_opt = est->add_option("--out", ef.out, "output prefix; omit to print JSON to stdout");
  ef.family_opt = est->add_option("--family", ef.family, "outcome family")
                      ->check(CLI::IsMember({"binary", "continuous"}));
  ef.seed_opt = est->add_option("--seed", ef.seed, "random seed (estimation is deterministic)");

  CLI::App* bay = app.add_subcommand("bayes", "Targeted posterior over the working model");
  bf.input_opt = bay->add_option("--input", bf.input, "CSV dataset with a header row");
  bf.config_opt = bay->add_option("--config", bf.config, "JSON run configuration");
  bf.out_opt = bay->add_option("--out", bf.out, "output prefix for <out>.json and <out>_draws.csv");
  bf.family_opt = bay->add_option("--family", bf.family, "outcome family")
                      ->check(CLI::IsMember({"binary", "continuous"}));
  bf.seed_opt = bay->add_option("--seed", bf.seed, "chain seed");
  bf.iters_opt = bay->add_option("--iters", bf.iters, "chain length");
  bf.burn_in_opt = bay->add_option("--burn-in", bf.burn_in, "warm-up draws to discard");

  CLI::App* sim = app.add_subcommand("simulate", "Coverage and bias study on synthetic data");
  sf.config_opt = sim->add_option("--config", sf.config, "JSON run configuration");
  sf.out_opt = sim->add_option("--out", sf.out, "output prefix for <out>.csv and <out>.json");
  sf.scenario_opt = sim->add_option("--scenario", sf.scenario, "nuisance specification scenario")
                        ->check(CLI::IsMember({"a", "b", "c", "d"}));
  sf.n_opt = sim->add_option("--n", sf.n, "sample size per replication");
  sf.reps_opt = sim->add_option("--reps", sf.reps, "number of replications");
  sf.seed_opt = sim->add_option("--seed", sf.seed, "master seed; replications derive from it");
  sf.iters_opt = sim->add_option("--iters", sf.iters, "chain length for the Bayesian arm");
  sf.burn_in_opt = sim->add_option("--burn-in", sf.burn_in, "warm-up draws for the Bayesian arm");
  sf.bayesian_opt = sim->add_flag("--bayesian", sf.bayesian, "also run the Bayesian arm");

  CLI::App* dia = app.add_subcommand("diagnose", "Chain diagnostics from a posterior draws CSV");
  df.input_opt = dia->add_option("--input", df.input, "draws CSV written by bayes");
  df.config_opt = dia->add_option("--config", df.config, "JSON run configuration");
  df.out_opt = dia->add_option("--out", df.out, "output prefix; omit to print CSV to stdout");
  df.burn_in_opt = dia->add_option("--burn-in", df.burn_in, "warm-up draws to discard");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << tmsm::error_report(errc::config, e.what()).dump() << '\n';
    return 2;
  }

  try {
    if (est->parsed()) return run_estimate(resolve(ef, "estimate"));
    if (bay->parsed()) return run_bayes(resolve(bf, "bayes"));
    if (sim->parsed()) return run_simulate(resolve(sf, "simulate"));
    return run_diagnose(resolve(df, "diagnose"));
  } catch (const Error& e) {
    std::cerr << tmsm::error_report(e.code(), e.what()).dump() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << tmsm::error_report(errc::eval, e.what()).dump() << '\n';
    return 1;
  }
}
