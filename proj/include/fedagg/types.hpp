#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedagg {

// Flat model parameters. Every client and round of one experiment shares a dimension.
using ParamVector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DimensionMismatch : public std::invalid_argument {
 public:
  DimensionMismatch(const std::string& what, Eigen::Index expected, Eigen::Index actual)
      : std::invalid_argument(what + ": expected dimension " + std::to_string(expected) + ", got " +
                              std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  Eigen::Index expected() const { return expected_; }
  Eigen::Index actual() const { return actual_; }

 private:
  Eigen::Index expected_;
  Eigen::Index actual_;
};

inline void require_dim(const char* what, Eigen::Index expected, Eigen::Index actual) {
  if (expected != actual) throw DimensionMismatch(what, expected, actual);
}

inline bool all_finite(const ParamVector& v) { return v.allFinite(); }

}  // namespace fedagg
