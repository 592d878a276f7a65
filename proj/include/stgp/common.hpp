#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace stgp {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Bad arguments: shape mismatches, out-of-range counts, malformed options.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A file could not be parsed. Carries the offending line when known.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  /// Same error with `prefix` (e.g. a file name) prepended to the message.
  FormatError(const std::string& prefix, const FormatError& inner)
      : std::runtime_error(prefix + inner.what()), line_(inner.line_) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Factorization failed even after jitter escalation.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::vector<double> jitters = {})
      : std::runtime_error(what), jitters_(std::move(jitters)) {}
  const std::vector<double>& attempted_jitters() const { return jitters_; }

 private:
  std::vector<double> jitters_;
};

/// An evaluation protocol cannot be run on the given data.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

/// Uniform integer in [0, n). Rejection sampling, so results depend only on
/// the engine, not on the standard library's distribution implementation.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = Rng::max() - (Rng::max() % n);
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform_unit(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Standard normal via Box-Muller, engine-determined.
inline double standard_normal(Rng& rng) {
  double u1 = uniform_unit(rng);
  while (u1 <= 0.0) u1 = uniform_unit(rng);
  const double u2 = uniform_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace stgp
