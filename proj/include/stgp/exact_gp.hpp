#pragma once

#include "stgp/common.hpp"
#include "stgp/data.hpp"
#include "stgp/kernels.hpp"
#include "stgp/linalg.hpp"
#include "stgp/optimizer.hpp"

#include <optional>

namespace stgp {

struct PosteriorPrediction {
  VectorXd mean;
  VectorXd latent_var;    // clamped at zero
  VectorXd observed_var;  // latent_var + noise variance
  std::optional<MatrixXd> latent_cov;
};

/// Exact GP regression with constant prior mean and Gaussian noise.
///
/// Parameter vector: kernel log-params (depth-first), log noise variance,
/// prior mean. The Cholesky factor of K + noise*I is recomputed eagerly on
/// every parameter change, so a const model is safe to share across threads.
class GPModel {
 public:
  GPModel(Kernel kernel, MatrixXd X, VectorXd y, double noise_variance = 1.0, double mean = 0.0);

  const Kernel& kernel() const { return kernel_; }
  double noise_variance() const { return std::exp(log_noise_); }
  double mean() const { return mean_; }
  const MatrixXd& inputs() const { return X_; }
  const VectorXd& targets() const { return y_; }
  const Cholesky& factor() const { return chol_; }
  /// (K + noise*I)^{-1} (y - mean)
  const VectorXd& alpha() const { return alpha_; }

  std::size_t num_params() const { return kernel_.num_params() + 2; }
  VectorXd params() const;
  void set_params(const VectorXd& theta);
  std::vector<std::string> param_names() const;

 private:
  void refactor();

  Kernel kernel_;
  double log_noise_;
  double mean_;
  MatrixXd X_;
  VectorXd y_;
  Cholesky chol_;
  VectorXd alpha_;
};

double log_marginal_likelihood(const GPModel& model);

/// Gradient in `GPModel::params` order, via
/// 0.5 * tr((alpha alpha^T - (K + noise*I)^{-1}) dK/dtheta).
VectorXd grad_log_marginal_likelihood(const GPModel& model);

/// Maximize the log marginal likelihood; leaves the model at the best iterate.
FitResult fit(GPModel& model, const OptimizerOptions& opts = {});

PosteriorPrediction predict(const GPModel& model, const MatrixXd& Xq, bool full_covariance = false);

/// Uniform sample of `n` rows without replacement, deterministic per seed.
/// Normalization statistics are inherited from the parent.
Dataset subsample(const Dataset& data, Index n, std::uint64_t seed);

}  // namespace stgp
