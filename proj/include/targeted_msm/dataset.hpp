#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "targeted_msm/errors.hpp"

namespace tmsm {

enum class Family { binary, continuous };

inline const char* family_name(Family f) {
  return f == Family::binary ? "binary" : "continuous";
}

inline Family parse_family(const std::string& s) {
  if (s == "binary") return Family::binary;
  if (s == "continuous") return Family::continuous;
  throw Error(errc::config, "unknown family '" + s + "' (expected binary or continuous)");
}

struct Dataset {
  Eigen::MatrixXd x;        // n x d covariates
  Eigen::VectorXd a;        // treatment indicator in {0,1}
  Eigen::VectorXd y;        // outcome
  std::vector<int> v_cols;  // effect-modifier columns of x (may be empty)
  Family family = Family::binary;

  Eigen::Index n() const { return a.size(); }

  Eigen::MatrixXd modifiers() const {
    Eigen::MatrixXd v(n(), static_cast<Eigen::Index>(v_cols.size()));
    for (std::size_t j = 0; j < v_cols.size(); ++j) v.col(static_cast<Eigen::Index>(j)) = x.col(v_cols[j]);
    return v;
  }

  void validate() const {
    if (x.rows() != n() || y.size() != n())
      throw Error(errc::config, "dataset dimensions disagree");
    if (n() == 0) throw Error(errc::config, "dataset is empty");
    for (Eigen::Index i = 0; i < n(); ++i) {
      if (a[i] != 0.0 && a[i] != 1.0)
        throw Error(errc::config, "treatment must be 0/1 (row " + std::to_string(i + 1) + ")");
      if (family == Family::binary && y[i] != 0.0 && y[i] != 1.0)
        throw Error(errc::config,
                    "binary-family outcome must be 0/1 (row " + std::to_string(i + 1) + ")");
    }
    for (int c : v_cols)
      if (c < 0 || c >= x.cols())
        throw Error(errc::config, "effect-modifier column index " + std::to_string(c) +
                                      " out of range");
  }
};

}  // namespace tmsm
