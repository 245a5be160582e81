#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace gpsedf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/// Contract violation: the caller passed arguments outside the documented
/// preconditions (wrong enum, negative count, ...).
class ContractError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Input outside the mathematical domain of an operation (nonpositive
/// stretch, singular deformation gradient, ...).
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// A numerical procedure failed beyond recovery (factorization after jitter
/// escalation, divergent training loss, Newton non-convergence).
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// File-system level failure.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file; carries the 1-based line number when known.
class ParseError : public std::runtime_error {
public:
  ParseError(const std::string& what, long line = -1)
      : std::runtime_error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  long line() const { return line_; }

private:
  long line_;
};

/// Query outside the domain box of a fitted surrogate.
class ExtrapolationError : public DomainError {
public:
  using DomainError::DomainError;
};

/// A point in invariant space.
struct InvariantPoint {
  double I1 = 3.0;
  double I4 = 1.0;
};

/// Rectangular domain in invariant space.
struct DomainBox {
  double I1_min = 3.0, I1_max = 3.0;
  double I4_min = 1.0, I4_max = 1.0;

  bool contains(const InvariantPoint& p, double tol = 0.0) const {
    return p.I1 >= I1_min - tol && p.I1 <= I1_max + tol && p.I4 >= I4_min - tol &&
           p.I4 <= I4_max + tol;
  }
  double diagonal() const {
    const double d1 = I1_max - I1_min;
    const double d4 = I4_max - I4_min;
    return std::sqrt(d1 * d1 + d4 * d4);
  }
  DomainBox padded(double pad) const {
    return {I1_min - pad, I1_max + pad, I4_min - pad, I4_max + pad};
  }
};

// FNV-1a, used to fingerprint configs in output files.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace gpsedf
