#include "stgp/exact_gp.hpp"

#include <numbers>

namespace stgp {

GPModel::GPModel(Kernel kernel, MatrixXd X, VectorXd y, double noise_variance, double mean)
    : kernel_(std::move(kernel)),
      log_noise_(std::log(noise_variance)),
      mean_(mean),
      X_(std::move(X)),
      y_(std::move(y)) {
  if (X_.rows() == 0) throw InputError("GPModel: empty training set");
  if (X_.rows() != y_.size()) throw InputError("GPModel: X and y row counts differ");
  if (!(noise_variance > 0.0)) throw InputError("GPModel: noise variance must be positive");
  kernel_.validate(X_.cols());
  refactor();
}

VectorXd GPModel::params() const {
  VectorXd theta(static_cast<Index>(num_params()));
  const auto nk = static_cast<Index>(kernel_.num_params());
  theta.head(nk) = kernel_.log_params();
  theta[nk] = log_noise_;
  theta[nk + 1] = mean_;
  return theta;
}

void GPModel::set_params(const VectorXd& theta) {
  if (static_cast<std::size_t>(theta.size()) != num_params())
    throw InputError("GPModel: wrong parameter count");
  const auto nk = static_cast<Index>(kernel_.num_params());
  kernel_.set_log_params(theta.head(nk));
  log_noise_ = theta[nk];
  mean_ = theta[nk + 1];
  refactor();
}

std::vector<std::string> GPModel::param_names() const {
  auto names = kernel_.param_names();
  names.emplace_back("log_noise_variance");
  names.emplace_back("mean");
  return names;
}

void GPModel::refactor() {
  MatrixXd k = gram(kernel_, X_);
  k.diagonal().array() += noise_variance();
  chol_ = robust_cholesky(k);
  alpha_ = chol_.solve((y_.array() - mean_).matrix().eval());
}

double log_marginal_likelihood(const GPModel& model) {
  const VectorXd r = model.targets().array() - model.mean();
  const auto n = static_cast<double>(r.size());
  return -0.5 * r.dot(model.alpha()) - 0.5 * model.factor().log_det() -
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

VectorXd grad_log_marginal_likelihood(const GPModel& model) {
  const VectorXd& a = model.alpha();
  MatrixXd w = -model.factor().inverse();
  w.noalias() += a * a.transpose();

  const auto nk = static_cast<Index>(model.kernel().num_params());
  VectorXd g(nk + 2);
  g.head(nk) = 0.5 * grad_gram_contracted(model.kernel(), model.inputs(), model.inputs(), w);
  g[nk] = 0.5 * model.noise_variance() * w.trace();
  g[nk + 1] = a.sum();
  return g;
}

FitResult fit(GPModel& model, const OptimizerOptions& opts) {
  GPModel work = model;
  const Objective objective = [&work](const VectorXd& theta, VectorXd* grad) {
    work.set_params(theta);
    if (grad) *grad = grad_log_marginal_likelihood(work);
    return log_marginal_likelihood(work);
  };
  FitResult result = maximize(objective, model.params(), opts);
  model.set_params(result.params);
  return result;
}

PosteriorPrediction predict(const GPModel& model, const MatrixXd& Xq, bool full_covariance) {
  if (Xq.cols() != model.inputs().cols()) {
    throw InputError("predict: query has " + std::to_string(Xq.cols()) + " columns, model expects " +
                     std::to_string(model.inputs().cols()));
  }
  const MatrixXd kqx = gram(model.kernel(), Xq, model.inputs());
  PosteriorPrediction p;
  p.mean = (kqx * model.alpha()).array() + model.mean();
  const MatrixXd v = model.factor().solve_lower(kqx.transpose());
  const double prior = model.kernel().diag_value();
  p.latent_var = (prior - v.colwise().squaredNorm().transpose().array()).cwiseMax(0.0);
  p.observed_var = p.latent_var.array() + model.noise_variance();
  if (full_covariance) {
    MatrixXd cov = gram(model.kernel(), Xq, Xq);
    cov.noalias() -= v.transpose() * v;
    p.latent_cov = std::move(cov);
  }
  return p;
}

Dataset subsample(const Dataset& data, Index n, std::uint64_t seed) {
  if (n < 0 || n > data.size())
    throw InputError("subsample: requested " + std::to_string(n) + " rows from a dataset of " +
                     std::to_string(data.size()));
  std::vector<Index> idx(static_cast<std::size_t>(data.size()));
  for (Index i = 0; i < data.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  for (Index i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(i) +
                   uniform_index(rng, static_cast<std::uint64_t>(data.size() - i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(n));
  return data.subset(idx);
}

}  // namespace stgp
