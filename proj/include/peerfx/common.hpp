#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace peerfx {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Exception carrying the name of the module that raised it, so the CLI can
/// report `<module>: <message>` in its machine-readable error output.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(what), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

/// Malformed input (bad adjacency, mismatched dimensions, bad CSV cells).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Numerical or statistical failure during estimation.
class EstimationError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or parameter values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-fatal message accumulated by estimators and reported by the CLI.
struct Warning {
  std::string module;
  std::string message;
};

using Warnings = std::vector<Warning>;

}  // namespace peerfx
