#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "targeted_msm/bayes.hpp"
#include "targeted_msm/dataset.hpp"
#include "targeted_msm/errors.hpp"
#include "targeted_msm/sim.hpp"
#include "targeted_msm/tmle.hpp"

// Data ingestion, configuration, and result serialization. Everything here
// is deliberately dumb plumbing: parse, validate, emit. No estimation logic.

namespace tmsm {

inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------------------
// CSV ingestion

// Which header names play which role. Empty x means "every column that is
// not the treatment or the outcome, in file order". v must be a subset of
// the resolved x list; an empty v fits the intercept-only working model.
struct ColumnSpec {
  std::string a = "a";
  std::string y = "y";
  std::vector<std::string> x;
  std::vector<std::string> v;

  bool operator==(const ColumnSpec&) const = default;
};

struct LoadReport {
  Dataset data;
  std::vector<long> dropped_rows;  // 1-based data rows with missing cells
};

namespace detail {

inline std::string trim(std::string s) {
  const auto sp = [](unsigned char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  std::size_t b = 0, e = s.size();
  while (b < e && sp(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && sp(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  cells.push_back(trim(cur));
  return cells;
}

inline bool missing_cell(const std::string& s) {
  if (s.empty()) return true;
  std::string t;
  for (char c : s) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return t == "na" || t == "nan";
}

inline std::optional<double> parse_double(const std::string& s) {
  const char* b = s.data();
  const char* e = b + s.size();
  if (b != e && *b == '+') ++b;  // from_chars rejects an explicit plus
  double v = 0.0;
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e) return std::nullopt;
  return v;
}

inline Eigen::Index find_column(const std::vector<std::string>& header, const std::string& name) {
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j] == name) return static_cast<Eigen::Index>(j);
  throw Error(errc::parse, "input is missing column \"" + name + "\"");
}

}  // namespace detail

// Header row names the columns. Rows with missing cells (empty, na, nan) are
// dropped and reported by 1-based data-row number; a non-numeric cell, a row
// with extra cells, or an out-of-range indicator is fatal.
inline LoadReport load_csv(const std::string& path, const ColumnSpec& cols = {},
                           Family family = Family::binary) {
  std::ifstream in(path);
  if (!in) throw Error(errc::parse, "cannot open input file \"" + path + "\"");

  std::string line;
  if (!std::getline(in, line)) throw Error(errc::parse, "input file \"" + path + "\" is empty");
  const std::vector<std::string> header = detail::split_csv_line(line);
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j].empty()) throw Error(errc::parse, "empty column name in header");
    for (std::size_t k = j + 1; k < header.size(); ++k)
      if (header[j] == header[k])
        throw Error(errc::parse, "duplicate column \"" + header[j] + "\" in header");
  }

  const Eigen::Index a_col = detail::find_column(header, cols.a);
  const Eigen::Index y_col = detail::find_column(header, cols.y);

  std::vector<std::string> x_names = cols.x;
  if (x_names.empty()) {
    for (const std::string& h : header)
      if (h != cols.a && h != cols.y) x_names.push_back(h);
  }
  std::vector<Eigen::Index> x_idx;
  x_idx.reserve(x_names.size());
  for (const std::string& name : x_names) x_idx.push_back(detail::find_column(header, name));

  std::vector<int> v_cols;
  for (const std::string& name : cols.v) {
    const auto it = std::find(x_names.begin(), x_names.end(), name);
    if (it == x_names.end())
      throw Error(errc::config,
                  "modifier column \"" + name + "\" is not among the covariate columns");
    v_cols.push_back(static_cast<int>(it - x_names.begin()));
  }

  std::vector<std::vector<double>> rows;
  std::vector<long> dropped;
  long row_no = 0;
  while (std::getline(in, line)) {
    ++row_no;
    if (detail::trim(line).empty()) continue;  // blank trailing lines are not data
    std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() > header.size())
      throw Error(errc::parse, "row " + std::to_string(row_no) + " has " +
                                   std::to_string(cells.size()) + " cells, header has " +
                                   std::to_string(header.size()));
    cells.resize(header.size());  // short rows: trailing cells are missing
    bool miss = false;
    for (const std::string& c : cells)
      if (detail::missing_cell(c)) miss = true;
    if (miss) {
      dropped.push_back(row_no);
      continue;
    }
    std::vector<double> parsed(header.size());
    for (std::size_t j = 0; j < header.size(); ++j) {
      const auto v = detail::parse_double(cells[j]);
      if (!v)
        throw Error(errc::parse, "non-numeric value \"" + cells[j] + "\" in column \"" +
                                     header[j] + "\", row " + std::to_string(row_no));
      parsed[j] = *v;
    }
    rows.push_back(std::move(parsed));
  }

  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  if (n == 0) throw Error(errc::insufficient_data, "no usable rows in \"" + path + "\"");

  Dataset data;
  data.family = family;
  data.v_cols = v_cols;
  data.x.resize(n, static_cast<Eigen::Index>(x_idx.size()));
  data.a.resize(n);
  data.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < x_idx.size(); ++j)
      data.x(i, static_cast<Eigen::Index>(j)) = r[static_cast<std::size_t>(x_idx[j])];
    const double a = r[static_cast<std::size_t>(a_col)];
    if (a != 0.0 && a != 1.0)
      throw Error(errc::parse, "treatment must be 0 or 1 in column \"" + cols.a + "\"");
    data.a[i] = a;
    const double y = r[static_cast<std::size_t>(y_col)];
    if (family == Family::binary && y != 0.0 && y != 1.0)
      throw Error(errc::parse, "binary outcome must be 0 or 1 in column \"" + cols.y + "\"");
    data.y[i] = y;
  }
  return {std::move(data), std::move(dropped)};
}

namespace detail {

// 17 significant digits: doubles survive the text round trip exactly.
inline std::string full_precision(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::vector<std::string> default_x_names(Eigen::Index d) {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) names.push_back("x" + std::to_string(j + 1));
  return names;
}

inline void write_dataset_csv(std::ostream& out, const Dataset& data,
                              std::vector<std::string> x_names = {}) {
  if (x_names.empty()) x_names = default_x_names(data.x.cols());
  if (static_cast<Eigen::Index>(x_names.size()) != data.x.cols())
    throw Error(errc::config, "covariate name count does not match the data");
  for (const std::string& name : x_names) out << name << ',';
  out << "a,y\n";
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    for (Eigen::Index j = 0; j < data.x.cols(); ++j)
      out << detail::full_precision(data.x(i, j)) << ',';
    out << detail::full_precision(data.a[i]) << ',' << detail::full_precision(data.y[i]) << '\n';
  }
}

inline void write_dataset_csv(const std::string& path, const Dataset& data,
                              std::vector<std::string> x_names = {}) {
  std::ofstream out(path);
  if (!out) throw Error(errc::parse, "cannot write \"" + path + "\"");
  write_dataset_csv(out, data, std::move(x_names));
}

// ---------------------------------------------------------------------------
// Run configuration

struct PriorConfig {
  std::vector<double> mean;      // empty: standard normal of the model dimension
  std::vector<double> cov_diag;  // must match mean when given

  bool operator==(const PriorConfig&) const = default;
};

struct McmcConfig {
  long iters = 10000;
  long burn_in = -1;
  std::uint64_t seed = 1;
  double tau = -1.0;
  double tau_lo = 1e-4;
  double tau_hi = 10.0;
  long pilot_iters = 1000;
  int max_rounds = 20;

  bool operator==(const McmcConfig&) const = default;
};

struct TmleConfig {
  double stop_tol = 0.0;  // <= 0 picks the sample-size default
  int max_iter = 50;
  double g_trunc = 0.01;

  bool operator==(const TmleConfig&) const = default;
};

struct SimConfig {
  std::string scenario = "a";
  long n = 1000;
  int reps = 200;
  bool bayesian = false;
  int threads = 0;

  bool operator==(const SimConfig&) const = default;
};

struct RunConfig {
  std::string command;  // set by the subcommand; a config file may pre-fill it
  std::string input;
  std::string out;
  std::string family = "binary";
  ColumnSpec columns;
  PriorConfig prior;
  McmcConfig mcmc;
  TmleConfig tmle;
  SimConfig sim;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const char* where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) ok = true;
    if (!ok)
      throw Error(errc::config,
                  std::string("unknown key \"") + item.key() + "\" in " + where + " config");
  }
}

template <typename T>
T take(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(errc::config, std::string("config key \"") + key + "\" has the wrong type");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  return nlohmann::json{
      {"command", c.command},
      {"input", c.input},
      {"out", c.out},
      {"family", c.family},
      {"columns",
       {{"a", c.columns.a}, {"y", c.columns.y}, {"x", c.columns.x}, {"v", c.columns.v}}},
      {"prior", {{"mean", c.prior.mean}, {"cov_diag", c.prior.cov_diag}}},
      {"mcmc",
       {{"iters", c.mcmc.iters},
        {"burn_in", c.mcmc.burn_in},
        {"seed", c.mcmc.seed},
        {"tau", c.mcmc.tau},
        {"tau_lo", c.mcmc.tau_lo},
        {"tau_hi", c.mcmc.tau_hi},
        {"pilot_iters", c.mcmc.pilot_iters},
        {"max_rounds", c.mcmc.max_rounds}}},
      {"tmle",
       {{"stop_tol", c.tmle.stop_tol}, {"max_iter", c.tmle.max_iter}, {"g_trunc", c.tmle.g_trunc}}},
      {"sim",
       {{"scenario", c.sim.scenario},
        {"n", c.sim.n},
        {"reps", c.sim.reps},
        {"bayesian", c.sim.bayesian},
        {"threads", c.sim.threads}}}};
}

// Missing keys keep their defaults; unknown keys are rejected so a typo
// cannot silently run with defaults.
inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(errc::config, "config root must be a JSON object");
  detail::check_keys(
      j, {"command", "input", "out", "family", "columns", "prior", "mcmc", "tmle", "sim"}, "run");
  RunConfig c;
  c.command = detail::take<std::string>(j, "command", c.command);
  c.input = detail::take<std::string>(j, "input", c.input);
  c.out = detail::take<std::string>(j, "out", c.out);
  c.family = detail::take<std::string>(j, "family", c.family);
  if (j.contains("columns")) {
    const auto& jc = j.at("columns");
    detail::check_keys(jc, {"a", "y", "x", "v"}, "columns");
    c.columns.a = detail::take<std::string>(jc, "a", c.columns.a);
    c.columns.y = detail::take<std::string>(jc, "y", c.columns.y);
    c.columns.x = detail::take<std::vector<std::string>>(jc, "x", {});
    c.columns.v = detail::take<std::vector<std::string>>(jc, "v", {});
  }
  if (j.contains("prior")) {
    const auto& jp = j.at("prior");
    detail::check_keys(jp, {"mean", "cov_diag"}, "prior");
    c.prior.mean = detail::take<std::vector<double>>(jp, "mean", {});
    c.prior.cov_diag = detail::take<std::vector<double>>(jp, "cov_diag", {});
    if (c.prior.mean.size() != c.prior.cov_diag.size())
      throw Error(errc::config, "prior mean and cov_diag lengths differ");
    for (double v : c.prior.cov_diag)
      if (!(v > 0.0)) throw Error(errc::config, "prior cov_diag entries must be positive");
  }
  if (j.contains("mcmc")) {
    const auto& jm = j.at("mcmc");
    detail::check_keys(
        jm, {"iters", "burn_in", "seed", "tau", "tau_lo", "tau_hi", "pilot_iters", "max_rounds"},
        "mcmc");
    c.mcmc.iters = detail::take<long>(jm, "iters", c.mcmc.iters);
    c.mcmc.burn_in = detail::take<long>(jm, "burn_in", c.mcmc.burn_in);
    c.mcmc.seed = detail::take<std::uint64_t>(jm, "seed", c.mcmc.seed);
    c.mcmc.tau = detail::take<double>(jm, "tau", c.mcmc.tau);
    c.mcmc.tau_lo = detail::take<double>(jm, "tau_lo", c.mcmc.tau_lo);
    c.mcmc.tau_hi = detail::take<double>(jm, "tau_hi", c.mcmc.tau_hi);
    c.mcmc.pilot_iters = detail::take<long>(jm, "pilot_iters", c.mcmc.pilot_iters);
    c.mcmc.max_rounds = detail::take<int>(jm, "max_rounds", c.mcmc.max_rounds);
  }
  if (j.contains("tmle")) {
    const auto& jt = j.at("tmle");
    detail::check_keys(jt, {"stop_tol", "max_iter", "g_trunc"}, "tmle");
    c.tmle.stop_tol = detail::take<double>(jt, "stop_tol", c.tmle.stop_tol);
    c.tmle.max_iter = detail::take<int>(jt, "max_iter", c.tmle.max_iter);
    c.tmle.g_trunc = detail::take<double>(jt, "g_trunc", c.tmle.g_trunc);
  }
  if (j.contains("sim")) {
    const auto& js = j.at("sim");
    detail::check_keys(js, {"scenario", "n", "reps", "bayesian", "threads"}, "sim");
    c.sim.scenario = detail::take<std::string>(js, "scenario", c.sim.scenario);
    c.sim.n = detail::take<long>(js, "n", c.sim.n);
    c.sim.reps = detail::take<int>(js, "reps", c.sim.reps);
    c.sim.bayesian = detail::take<bool>(js, "bayesian", c.sim.bayesian);
    c.sim.threads = detail::take<int>(js, "threads", c.sim.threads);
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(errc::config, "cannot open config file \"" + path + "\"");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(errc::config, std::string("config file is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline Family family_from_string(const std::string& s) {
  if (s == "binary") return Family::binary;
  if (s == "continuous") return Family::continuous;
  throw Error(errc::config, "family must be \"binary\" or \"continuous\", got \"" + s + "\"");
}

// ---------------------------------------------------------------------------
// Result reports

namespace detail {

inline void require_finite(const nlohmann::json& j, const std::string& at) {
  if (j.is_number_float() && !std::isfinite(j.get<double>()))
    throw Error(errc::eval, "non-finite value in report at " + at);
  if (j.is_object())
    for (const auto& item : j.items()) require_finite(item.value(), at + "." + item.key());
  if (j.is_array())
    for (std::size_t i = 0; i < j.size(); ++i)
      require_finite(j[i], at + "[" + std::to_string(i) + "]");
}

inline std::vector<double> vec(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

}  // namespace detail

inline nlohmann::json estimate_report(const TargetedFit& fit,
                                      const std::vector<long>& dropped_rows = {}) {
  nlohmann::json j{
      {"schema_version", kReportSchemaVersion},
      {"command", "estimate"},
      {"family", fit.family == Family::binary ? "binary" : "continuous"},
      {"n", fit.n()},
      {"dropped_rows", dropped_rows},
      {"beta_star", detail::vec(fit.beta)},
      {"se", detail::vec(fit.se)},
      {"ci_lo", detail::vec(fit.ci_lo)},
      {"ci_hi", detail::vec(fit.ci_hi)},
      {"level", fit.level},
      {"eif_mean_norm", fit.eif_mean_norm},
      {"iterations", fit.iterations},
      {"converged", fit.converged},
      {"m_condition", fit.m_condition},
  };
  detail::require_finite(j, "estimate");
  return j;
}

inline nlohmann::json bayes_report(const TargetedFit& fit, const McmcDraws& draws,
                                   const PosteriorSummary& summary, const ChainDiagnostics& diag,
                                   const std::vector<long>& dropped_rows = {}) {
  bool any_plateau = false;
  for (bool b : diag.plateau) any_plateau = any_plateau || b;
  nlohmann::json j = estimate_report(fit, dropped_rows);
  j["command"] = "bayes";
  j["posterior"] = {
      {"median", detail::vec(summary.median)}, {"ci_lo", detail::vec(summary.lo)},
      {"ci_hi", detail::vec(summary.hi)},      {"mean", detail::vec(summary.mean)},
      {"sd", detail::vec(summary.sd)},         {"prob_positive", detail::vec(summary.prob_pos)},
      {"level", summary.level},                {"kept", summary.kept},
  };
  j["mcmc"] = {
      {"iters", draws.iters()},
      {"burn_in", draws.burn_in},
      {"tau", draws.tau},
      {"acceptance_rate", draws.acceptance_rate},
  };
  j["diagnostic"] = {
      {"plateau", diag.plateau},
      {"plateau_hits", diag.plateau_hits},
      {"flag", any_plateau},
  };
  detail::require_finite(j, "bayes");
  return j;
}

// Posterior draws, one row per iteration including warm-up.
inline void write_draws_csv(std::ostream& out, const McmcDraws& draws) {
  const Eigen::Index p = draws.eps.cols();
  out << "iter,accepted";
  for (Eigen::Index jj = 0; jj < p; ++jj) out << ",eps_" << (jj + 1);
  for (Eigen::Index jj = 0; jj < p; ++jj) out << ",beta_" << (jj + 1);
  out << '\n';
  for (long t = 0; t < draws.iters(); ++t) {
    out << (t + 1) << ',' << static_cast<int>(draws.accepted[static_cast<std::size_t>(t)]);
    for (Eigen::Index jj = 0; jj < p; ++jj)
      out << ',' << detail::full_precision(draws.eps(t, jj));
    for (Eigen::Index jj = 0; jj < p; ++jj)
      out << ',' << detail::full_precision(draws.beta(t, jj));
    out << '\n';
  }
}

inline void write_draws_csv(const std::string& path, const McmcDraws& draws) {
  std::ofstream out(path);
  if (!out) throw Error(errc::parse, "cannot write \"" + path + "\"");
  write_draws_csv(out, draws);
}

// Rebuilds a chain from its CSV form. tau is not recorded in the CSV; the
// caller supplies burn-in (< 0 keeps the sampler's first-fifth default).
inline McmcDraws read_draws_csv(const std::string& path, long burn_in = -1) {
  std::ifstream in(path);
  if (!in) throw Error(errc::parse, "cannot open draws file \"" + path + "\"");
  std::string line;
  if (!std::getline(in, line)) throw Error(errc::parse, "draws file \"" + path + "\" is empty");
  const std::vector<std::string> header = detail::split_csv_line(line);
  if (header.size() < 4 || header[0] != "iter" || header[1] != "accepted")
    throw Error(errc::parse, "draws file must start with iter,accepted,eps_*,beta_* columns");
  Eigen::Index p = 0;
  while (2 + static_cast<std::size_t>(p) < header.size() &&
         header[2 + static_cast<std::size_t>(p)] == "eps_" + std::to_string(p + 1))
    ++p;
  if (p == 0 || header.size() != static_cast<std::size_t>(2 + 2 * p))
    throw Error(errc::parse, "draws header does not pair eps_* with beta_* columns");
  for (Eigen::Index jj = 0; jj < p; ++jj)
    if (header[static_cast<std::size_t>(2 + p + jj)] != "beta_" + std::to_string(jj + 1))
      throw Error(errc::parse, "draws header does not pair eps_* with beta_* columns");

  std::vector<std::vector<double>> rows;
  long row_no = 0;
  while (std::getline(in, line)) {
    ++row_no;
    if (detail::trim(line).empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw Error(errc::parse, "draws row " + std::to_string(row_no) + " has " +
                                   std::to_string(cells.size()) + " cells");
    std::vector<double> parsed(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const auto v = detail::parse_double(cells[j]);
      if (!v)
        throw Error(errc::parse, "non-numeric value \"" + cells[j] + "\" in draws row " +
                                     std::to_string(row_no));
      parsed[j] = *v;
    }
    rows.push_back(std::move(parsed));
  }
  const long iters = static_cast<long>(rows.size());
  if (iters == 0) throw Error(errc::insufficient_data, "draws file has no rows");

  McmcDraws draws;
  draws.eps.resize(iters, p);
  draws.beta.resize(iters, p);
  draws.accepted.resize(static_cast<std::size_t>(iters));
  draws.log_post = Eigen::VectorXd::Zero(iters);
  long naccept = 0;
  for (long t = 0; t < iters; ++t) {
    const auto& r = rows[static_cast<std::size_t>(t)];
    const double acc = r[1];
    if (acc != 0.0 && acc != 1.0)
      throw Error(errc::parse, "accepted must be 0 or 1 in draws row " + std::to_string(t + 1));
    draws.accepted[static_cast<std::size_t>(t)] = acc != 0.0;
    naccept += acc != 0.0;
    for (Eigen::Index jj = 0; jj < p; ++jj) {
      draws.eps(t, jj) = r[static_cast<std::size_t>(2 + jj)];
      draws.beta(t, jj) = r[static_cast<std::size_t>(2 + p + jj)];
    }
  }
  draws.acceptance_rate = static_cast<double>(naccept) / static_cast<double>(iters);
  draws.burn_in = burn_in >= 0 ? burn_in : iters / 5;
  if (draws.burn_in >= iters) throw Error(errc::config, "burn-in consumes the whole chain");
  return draws;
}

inline std::string diagnostics_csv(const ChainDiagnostics& diag) {
  std::ostringstream out;
  out << "coord,plateau,plateau_hits,kept,burn_in,acceptance_rate,tau\n";
  for (std::size_t j = 0; j < diag.plateau.size(); ++j)
    out << (j + 1) << ',' << (diag.plateau[j] ? 1 : 0) << ',' << diag.plateau_hits[j] << ','
        << diag.kept << ',' << diag.burn_in << ',' << detail::full_precision(diag.acceptance_rate)
        << ',' << detail::full_precision(diag.tau) << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Simulation output

inline std::string sim_csv(const SimResult& res) {
  std::ostringstream out;
  out << "scenario,n,estimator,coverage_b1,bias_b1,coverage_b2,bias_b2\n";
  const auto row = [&](const char* estimator, const ArmSummary& arm) {
    out << res.scenario << ',' << res.n << ',' << estimator << ','
        << detail::full_precision(arm.coverage[0]) << ',' << detail::full_precision(arm.bias[0])
        << ',' << detail::full_precision(arm.coverage[1]) << ','
        << detail::full_precision(arm.bias[1]) << '\n';
  };
  row("frequentist", res.freq);
  if (res.bayes) row("bayesian", *res.bayes);
  return out.str();
}

inline nlohmann::json sim_report(const SimResult& res) {
  const auto arm = [](const ArmSummary& a) {
    return nlohmann::json{
        {"coverage", detail::vec(a.coverage)},   {"coverage_se", detail::vec(a.coverage_se)},
        {"bias", detail::vec(a.bias)},           {"bias_se", detail::vec(a.bias_se)},
        {"mean_point", detail::vec(a.mean_point)}, {"point_sd", detail::vec(a.point_sd)},
    };
  };
  nlohmann::json j{
      {"schema_version", kReportSchemaVersion},
      {"command", "simulate"},
      {"scenario", std::string(1, res.scenario)},
      {"n", res.n},
      {"reps_requested", res.reps_requested},
      {"kept", res.kept},
      {"failures", res.failures},
      {"failure_notes", res.failure_notes},
      {"beta_true", detail::vec(res.beta0)},
      {"max_eif_mean_norm", res.max_eif_mean_norm},
      {"frequentist", arm(res.freq)},
  };
  if (res.bayes) j["bayesian"] = arm(*res.bayes);
  detail::require_finite(j, "simulate");
  return j;
}

// ---------------------------------------------------------------------------
// Error reporting

inline nlohmann::json error_report(errc code, const std::string& message) {
  return nlohmann::json{{"error", {{"code", errc_name(code)}, {"message", message}}}};
}

}  // namespace tmsm
