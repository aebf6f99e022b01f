// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>
#include <vector>

namespace mmae {

// Row-major dense types. All model math is 64-bit.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Arr = Eigen::ArrayXd;

// Error taxonomy. Every failure mode surfaced to the CLI carries one of
// these categories in its message prefix.
class Error : public std::runtime_error {
 public:
  Error(const std::string& category, const std::string& msg)
      : std::runtime_error(category + ": " + msg), category_(category) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape error", m) {}
};
struct IndexError : Error {
  explicit IndexError(const std::string& m) : Error("index error", m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract error", m) {}
};
struct DegenerateError : Error {
  explicit DegenerateError(const std::string& m) : Error("degenerate input", m) {}
};
struct CapacityError : Error {
  explicit CapacityError(const std::string& m) : Error("capacity error", m) {}
};
struct NumericalFault : Error {
  explicit NumericalFault(const std::string& m) : Error("numerical fault", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io error", m) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format error", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config error", m) {}
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline long numel_of(const std::vector<int>& shape) {
  long n = 1;
  for (int d : shape) n *= d;
  return n;
}

}  // namespace mmae
