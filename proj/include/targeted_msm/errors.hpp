#pragma once

#include <stdexcept>
#include <string>

namespace tmsm {

// Stable error codes; the CLI maps these onto machine-readable error reports.
enum class errc {
  config,
  parse,
  eval,
  nonconvergence,
  rank_deficient,
  singular_normalizer,
  positivity,
  insufficient_data,
  degenerate_map,
  harness,
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::config: return "config";
    case errc::parse: return "parse";
    case errc::eval: return "eval";
    case errc::nonconvergence: return "nonconvergence";
    case errc::rank_deficient: return "rank_deficient";
    case errc::singular_normalizer: return "singular_normalizer";
    case errc::positivity: return "positivity";
    case errc::insufficient_data: return "insufficient_data";
    case errc::degenerate_map: return "degenerate_map";
    case errc::harness: return "harness";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  errc code() const { return code_; }

 private:
  errc code_;
};

}  // namespace tmsm
