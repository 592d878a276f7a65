#pragma once

#include "stgp/common.hpp"

namespace stgp {

/// Lower Cholesky factor of a symmetric matrix together with the diagonal
/// jitter that had to be added to obtain it.
struct Cholesky {
  MatrixXd lower;
  double jitter = 0.0;

  VectorXd solve(const VectorXd& b) const;
  MatrixXd solve(const MatrixXd& b) const;
  /// L^{-1} b
  MatrixXd solve_lower(const MatrixXd& b) const;
  double log_det() const;
  MatrixXd inverse() const;
};

/// Factor `a`; on failure retry with jitter 1e-8 * mean(diag), escalating by
/// 10x up to 1e-2 * mean(diag). Throws NumericalError listing every level tried.
Cholesky robust_cholesky(const MatrixXd& a);

/// Reverse-mode sensitivity of the Cholesky factorization: given dE/dL for
/// lower-triangular L = chol(K), return the symmetric dE/dK.
MatrixXd cholesky_backward(const MatrixXd& lower, const MatrixXd& lower_bar);

}  // namespace stgp
