#pragma once

#include "stgp/exact_gp.hpp"

namespace stgp {

/// Whitened variational distribution q(v) = N(m, R R^T) over v = L^{-1} u,
/// where L L^T = K(Z, Z) and u are the inducing values.
struct InducingSet {
  MatrixXd Z;         // M x d inducing inputs
  VectorXd m;         // M
  MatrixXd chol_cov;  // M x M lower triangular, positive diagonal
};

/// Sparse variational GP (uncollapsed bound, minibatch-ready).
///
/// Packed parameter order: kernel log-params, log noise variance, prior mean,
/// Z (row-major), m, then the lower triangle of R column by column with each
/// diagonal entry stored as its log.
struct SvgpModel {
  SvgpModel(Kernel kernel, MatrixXd Z, double noise_variance = 1.0, double mean = 0.0);

  Kernel kernel;
  double log_noise;
  double mean;
  InducingSet q;

  double noise_variance() const { return std::exp(log_noise); }
  Index num_inducing() const { return q.Z.rows(); }
  std::size_t num_params() const;
  VectorXd params() const;
  void set_params(const VectorXd& theta);
};

/// Evidence lower bound on a batch, with the data term rescaled by
/// full_n / batch size. With the full dataset as the batch it is the exact
/// bound. `grad`, when given, receives d ELBO / d params in packed order.
double elbo(const SvgpModel& model, const MatrixXd& X, const VectorXd& y, Index full_n,
            VectorXd* grad = nullptr);

/// Set q(v) to its optimum for fixed kernel, noise, mean and Z (full data).
void set_optimal_variational(SvgpModel& model, const MatrixXd& X, const VectorXd& y);

/// Minibatch Adam on all parameters. The full-batch ELBO is checked every
/// `eval_every` steps and the best iterate is kept.
FitResult fit_svgp(SvgpModel& model, const MatrixXd& X, const VectorXd& y,
                   const OptimizerOptions& opts = {}, bool optimal_init = true);
FitResult fit_svgp(SvgpModel& model, const Dataset& data, const OptimizerOptions& opts = {},
                   bool optimal_init = true);

PosteriorPrediction predict_svgp(const SvgpModel& model, const MatrixXd& Xq);

/// k-means++ seeding of M inducing inputs from the rows of X; falls back to a
/// uniform subsample when X has fewer than M distinct rows.
MatrixXd init_inducing(const MatrixXd& X, Index M, std::uint64_t seed);

}  // namespace stgp
