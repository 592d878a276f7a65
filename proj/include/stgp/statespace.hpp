#pragma once

#include "stgp/exact_gp.hpp"

namespace stgp {

enum class TemporalFamily { Matern12, Matern32 };

/// Matern-1/2 or Matern-3/2 covariance in time written as a linear SDE
///   dx = F x dt + L dW,  f = H x,  with white-noise spectral density q.
class StateSpaceKernel {
 public:
  explicit StateSpaceKernel(TemporalFamily family, double variance = 1.0, double lengthscale = 1.0);

  TemporalFamily family() const { return family_; }
  double variance() const { return std::exp(log_variance_); }
  double lengthscale() const { return std::exp(log_lengthscale_); }
  double log_variance() const { return log_variance_; }
  double log_lengthscale() const { return log_lengthscale_; }
  void set_log_params(double log_variance, double log_lengthscale);

  Index state_dim() const { return family_ == TemporalFamily::Matern12 ? 1 : 2; }
  MatrixXd feedback() const;        // F
  MatrixXd noise_effect() const;    // L (state_dim x 1)
  double diffusion() const;         // q
  MatrixXd stationary_cov() const;  // P_inf, solves F P + P F^T + L q L^T = 0
  Eigen::RowVectorXd observation() const;  // H

  /// Closed-form Matern covariance at lag tau.
  double covariance(double tau) const;

 private:
  TemporalFamily family_;
  double log_variance_;
  double log_lengthscale_;
};

struct Transition {
  MatrixXd A;  // exp(F dt)
  MatrixXd Q;  // P_inf - A P_inf A^T
};

/// Throws InputError unless dt > 0.
Transition discretize(const StateSpaceKernel& kernel, double dt);

/// Observations pivoted onto sites x time steps.
struct SpatioTemporalGrid {
  MatrixXd site_coords;  // S x ds
  std::vector<std::string> site_ids;
  VectorXd times;        // T, strictly increasing
  MatrixXd values;       // T x S; meaningful only where observed
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> observed;  // T x S
  Kernel spatial = Kernel::squared_exponential();
  std::size_t duplicates_averaged = 0;

  Index num_sites() const { return site_coords.rows(); }
  Index num_times() const { return times.size(); }
  std::size_t num_observed() const { return static_cast<std::size_t>(observed.count()); }
  void validate() const;
};

/// Pivot a dataset (columns: lat, lon, time) into grid form. Site coordinates
/// come from the first two columns, time from the third; repeated
/// (site, time) cells are averaged and counted.
SpatioTemporalGrid make_grid(const Dataset& data, Kernel spatial);

/// Posterior of f + mean at query rows (coordinates..., time). Query times
/// not on the grid become prediction-only filter steps; query locations that
/// are not sites are conditioned on the site posterior at the same time.
PosteriorPrediction kalman_fit_predict(const SpatioTemporalGrid& grid, const StateSpaceKernel& temporal,
                                       double noise_variance, double mean, const MatrixXd& queries);

/// Sum of innovation negative log-densities from the Kalman filter.
double negative_log_likelihood_ss(const SpatioTemporalGrid& grid, const StateSpaceKernel& temporal,
                                  double noise_variance, double mean);

/// Spatio-temporal model parameters bundled for fitting and serialization.
///
/// Parameter order: spatial kernel log-params, temporal log variance,
/// temporal log lengthscale, log noise variance, mean.
struct StateSpaceModel {
  SpatioTemporalGrid grid;
  StateSpaceKernel temporal{TemporalFamily::Matern32};
  double log_noise = 0.0;
  double mean = 0.0;

  double noise_variance() const { return std::exp(log_noise); }
  std::size_t num_params() const { return grid.spatial.num_params() + 4; }
  VectorXd params() const;
  void set_params(const VectorXd& theta);
};

/// Maximize -NLL with central finite-difference gradients.
FitResult fit_statespace(StateSpaceModel& model, const OptimizerOptions& opts = {});

PosteriorPrediction predict_statespace(const StateSpaceModel& model, const MatrixXd& queries);

}  // namespace stgp
