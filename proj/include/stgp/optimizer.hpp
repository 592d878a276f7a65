#pragma once

#include "stgp/common.hpp"

#include <functional>

namespace stgp {

struct OptimizerOptions {
  int max_iterations = 500;
  double learning_rate = 0.05;
  /// Relative-improvement stopping tolerance; also the gradient-norm
  /// threshold below which a point is declared stationary.
  double tolerance = 1e-6;
  /// Consecutive accepted steps under `tolerance` before stopping.
  int patience = 5;
  std::uint64_t seed = 1;

  // Stochastic (minibatch) settings, used by the sparse variational backend.
  double stochastic_learning_rate = 0.01;
  int batch_size = 256;
  int stochastic_steps = 5000;
  int eval_every = 250;
};

struct FitResult {
  VectorXd params;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  /// Objective of the best iterate after each iteration (non-decreasing).
  std::vector<double> trace;
  VectorXd gradient;
};

/// Objective returning f(x) and, when `grad` is non-null, df/dx.
using Objective = std::function<double(const VectorXd& x, VectorXd* grad)>;

/// Gradient ascent with Adam-style per-parameter step sizes. A step is
/// accepted only if it does not lower the objective; a rejected step halves
/// the learning rate. Stops on the iteration budget, a stationary gradient,
/// or `patience` consecutive accepted steps with relative gain < tolerance.
/// Throws InputError if the objective is not finite at x0.
FitResult maximize(const Objective& f, const VectorXd& x0, const OptimizerOptions& opts);

/// Central finite-difference gradient of f (value-only calls).
VectorXd finite_difference_gradient(const Objective& f, const VectorXd& x, double step);

}  // namespace stgp
