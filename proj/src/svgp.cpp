#include "stgp/svgp.hpp"

#include <algorithm>
#include <numbers>
#include <set>

namespace stgp {

namespace {

constexpr Index kChunk = 4096;

Index tri_size(Index m) { return m * (m + 1) / 2; }

}  // namespace

SvgpModel::SvgpModel(Kernel k, MatrixXd Z, double noise_variance, double mu)
    : kernel(std::move(k)), log_noise(std::log(noise_variance)), mean(mu) {
  if (Z.rows() < 1) throw InputError("SVGP needs at least one inducing point");
  if (!(noise_variance > 0.0)) throw InputError("SVGP: noise variance must be positive");
  kernel.validate(Z.cols());
  q.m = VectorXd::Zero(Z.rows());
  q.chol_cov = MatrixXd::Identity(Z.rows(), Z.rows());
  q.Z = std::move(Z);
}

std::size_t SvgpModel::num_params() const {
  const Index M = q.Z.rows();
  return kernel.num_params() + 2 + static_cast<std::size_t>(M * q.Z.cols() + M + tri_size(M));
}

VectorXd SvgpModel::params() const {
  VectorXd theta(static_cast<Index>(num_params()));
  Index o = static_cast<Index>(kernel.num_params());
  theta.head(o) = kernel.log_params();
  theta[o++] = log_noise;
  theta[o++] = mean;
  const Index M = q.Z.rows(), d = q.Z.cols();
  for (Index i = 0; i < M; ++i)
    for (Index c = 0; c < d; ++c) theta[o++] = q.Z(i, c);
  theta.segment(o, M) = q.m;
  o += M;
  for (Index c = 0; c < M; ++c)
    for (Index r = c; r < M; ++r) theta[o++] = r == c ? std::log(q.chol_cov(r, c)) : q.chol_cov(r, c);
  return theta;
}

void SvgpModel::set_params(const VectorXd& theta) {
  if (static_cast<std::size_t>(theta.size()) != num_params())
    throw InputError("SvgpModel: wrong parameter count");
  Index o = static_cast<Index>(kernel.num_params());
  kernel.set_log_params(theta.head(o));
  log_noise = theta[o++];
  mean = theta[o++];
  const Index M = q.Z.rows(), d = q.Z.cols();
  for (Index i = 0; i < M; ++i)
    for (Index c = 0; c < d; ++c) q.Z(i, c) = theta[o++];
  q.m = theta.segment(o, M);
  o += M;
  q.chol_cov.setZero();
  for (Index c = 0; c < M; ++c)
    for (Index r = c; r < M; ++r) q.chol_cov(r, c) = r == c ? std::exp(theta[o++]) : theta[o++];
}

namespace {

double kl_term(const InducingSet& q) {
  const auto M = static_cast<double>(q.m.size());
  return 0.5 * (q.chol_cov.squaredNorm() + q.m.squaredNorm() - M -
                2.0 * q.chol_cov.diagonal().array().abs().log().sum());
}

// Sum over points of the expected Gaussian log-likelihood (unscaled).
double expected_loglik_chunked(const SvgpModel& model, const Cholesky& kzz, const MatrixXd& X,
                               const VectorXd& y) {
  const double s2 = model.noise_variance();
  const double kdiag = model.kernel.diag_value();
  const auto& R = model.q.chol_cov;
  double total = 0.0;
  for (Index start = 0; start < X.rows(); start += kChunk) {
    const Index b = std::min(kChunk, X.rows() - start);
    const MatrixXd a = kzz.solve_lower(gram(model.kernel, model.q.Z, X.middleRows(start, b)));
    const MatrixXd rta = R.triangularView<Eigen::Lower>().transpose() * a;
    const VectorXd mu = (a.transpose() * model.q.m).array() + model.mean;
    const VectorXd var =
        kdiag - a.colwise().squaredNorm().transpose().array() + rta.colwise().squaredNorm().transpose().array();
    const VectorXd e = y.segment(start, b) - mu;
    total += (-0.5 * std::log(2.0 * std::numbers::pi * s2) - (e.array().square() + var.array()) / (2.0 * s2)).sum();
  }
  return total;
}

}  // namespace

double elbo(const SvgpModel& model, const MatrixXd& X, const VectorXd& y, Index full_n,
            VectorXd* grad) {
  const Index B = X.rows();
  if (B == 0) throw InputError("elbo: empty batch");
  if (X.rows() != y.size()) throw InputError("elbo: X and y row counts differ");
  if (X.cols() != model.q.Z.cols()) throw InputError("elbo: input dimensionality mismatch");
  if (full_n < B) throw InputError("elbo: full_n smaller than the batch");

  const Cholesky kzz = robust_cholesky(gram(model.kernel, model.q.Z));
  const double scale = static_cast<double>(full_n) / static_cast<double>(B);

  if (!grad) return scale * expected_loglik_chunked(model, kzz, X, y) - kl_term(model.q);

  const Index M = model.q.Z.rows(), d = X.cols();
  const double s2 = model.noise_variance();
  const auto R = model.q.chol_cov.triangularView<Eigen::Lower>();
  const MatrixXd kzx = gram(model.kernel, model.q.Z, X);
  const MatrixXd a = kzz.solve_lower(kzx);
  const MatrixXd rta = R.transpose() * a;
  const VectorXd mu = (a.transpose() * model.q.m).array() + model.mean;
  const VectorXd var = model.kernel.diag_value() - a.colwise().squaredNorm().transpose().array() +
                       rta.colwise().squaredNorm().transpose().array();
  const VectorXd e = y - mu;
  const double loglik =
      (-0.5 * std::log(2.0 * std::numbers::pi * s2) - (e.array().square() + var.array()) / (2.0 * s2)).sum();
  const double value = scale * loglik - kl_term(model.q);

  const VectorXd g_mu = scale * e / s2;
  const double g_var = -scale / (2.0 * s2);

  grad->resize(static_cast<Index>(model.num_params()));
  Index o = static_cast<Index>(model.kernel.num_params());

  // A-bar, then back through A = L^{-1} Kzx.
  MatrixXd a_bar = model.q.m * g_mu.transpose();
  a_bar.noalias() += 2.0 * g_var * (R * rta - a);
  const MatrixXd kzx_bar = kzz.lower.triangularView<Eigen::Lower>().transpose().solve(a_bar);
  MatrixXd l_bar = -(kzx_bar * a.transpose());
  l_bar = l_bar.triangularView<Eigen::Lower>();
  const MatrixXd kzz_bar = cholesky_backward(kzz.lower, l_bar);

  grad->head(o) = grad_gram_contracted(model.kernel, model.q.Z, X, kzx_bar) +
                  grad_gram_contracted(model.kernel, model.q.Z, model.q.Z, kzz_bar) +
                  static_cast<double>(B) * g_var * grad_diag(model.kernel);
  (*grad)[o++] = scale * (-0.5 * static_cast<double>(B) + (e.array().square() + var.array()).sum() / (2.0 * s2));
  (*grad)[o++] = g_mu.sum();

  const MatrixXd z_bar = grad_inputs_contracted(model.kernel, model.q.Z, X, kzx_bar) +
                         2.0 * grad_inputs_contracted(model.kernel, model.q.Z, model.q.Z, kzz_bar);
  for (Index i = 0; i < M; ++i)
    for (Index c = 0; c < d; ++c) (*grad)[o++] = z_bar(i, c);

  grad->segment(o, M) = a * g_mu - model.q.m;
  o += M;

  MatrixXd r_bar = 2.0 * g_var * (a * rta.transpose()) - model.q.chol_cov;
  for (Index c = 0; c < M; ++c)
    for (Index r = c; r < M; ++r) {
      if (r == c) {
        const double rc = model.q.chol_cov(r, c);
        (*grad)[o++] = (r_bar(r, c) + 1.0 / rc) * rc;
      } else {
        (*grad)[o++] = r_bar(r, c);
      }
    }
  return value;
}

void set_optimal_variational(SvgpModel& model, const MatrixXd& X, const VectorXd& y) {
  const Index M = model.q.Z.rows();
  const double s2 = model.noise_variance();
  const Cholesky kzz = robust_cholesky(gram(model.kernel, model.q.Z));
  MatrixXd precision = MatrixXd::Identity(M, M);
  VectorXd rhs = VectorXd::Zero(M);
  for (Index start = 0; start < X.rows(); start += kChunk) {
    const Index b = std::min(kChunk, X.rows() - start);
    const MatrixXd a = kzz.solve_lower(gram(model.kernel, model.q.Z, X.middleRows(start, b)));
    precision.noalias() += a * a.transpose() / s2;
    rhs.noalias() += a * (y.segment(start, b).array() - model.mean).matrix() / s2;
  }
  const Cholesky p = robust_cholesky(precision);
  model.q.m = p.solve(rhs);
  // S = precision^{-1}; R = chol(S)
  model.q.chol_cov = robust_cholesky(p.inverse()).lower;
}

FitResult fit_svgp(SvgpModel& model, const MatrixXd& X, const VectorXd& y,
                   const OptimizerOptions& opts, bool optimal_init) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const Index N = X.rows();
  if (model.num_inducing() > N) throw InputError("fit_svgp: more inducing points than data");
  if (opts.batch_size < 1) throw InputError("fit_svgp: batch size must be positive");
  if (optimal_init) set_optimal_variational(model, X, y);

  const Index batch = std::min<Index>(opts.batch_size, N);
  Rng rng(opts.seed);
  std::vector<Index> perm(static_cast<std::size_t>(N));
  for (Index i = 0; i < N; ++i) perm[static_cast<std::size_t>(i)] = i;
  Index cursor = N;  // forces a shuffle on the first step

  VectorXd theta = model.params();
  FitResult result;
  result.params = theta;
  result.objective = elbo(model, X, y, N);
  if (!std::isfinite(result.objective)) throw InputError("fit_svgp: ELBO not finite at initialization");
  result.trace.push_back(result.objective);

  VectorXd m = VectorXd::Zero(theta.size()), v = VectorXd::Zero(theta.size());
  double lr = opts.stochastic_learning_rate;
  int t = 0;
  MatrixXd xb(batch, X.cols());
  VectorXd yb(batch);
  VectorXd g;

  for (int step = 1; step <= opts.stochastic_steps; ++step) {
    if (cursor + batch > N) {
      for (Index i = N - 1; i > 0; --i)
        std::swap(perm[static_cast<std::size_t>(i)],
                  perm[static_cast<std::size_t>(uniform_index(rng, static_cast<std::uint64_t>(i + 1)))]);
      cursor = 0;
    }
    for (Index b = 0; b < batch; ++b) {
      const Index r = perm[static_cast<std::size_t>(cursor + b)];
      xb.row(b) = X.row(r);
      yb[b] = y[r];
    }
    cursor += batch;

    bool ok = true;
    try {
      elbo(model, xb, yb, N, &g);
      ok = g.allFinite();
    } catch (const NumericalError&) {
      ok = false;
    }
    if (!ok) {
      // Back off to the best iterate with a smaller step.
      lr *= 0.5;
      theta = result.params;
      model.set_params(theta);
      m.setZero();
      v.setZero();
      t = 0;
      continue;
    }
    ++t;
    m = kBeta1 * m + (1.0 - kBeta1) * g;
    v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseAbs2();
    theta += lr * ((m / (1.0 - std::pow(kBeta1, t))).array() /
                   ((v / (1.0 - std::pow(kBeta2, t))).array().sqrt() + kEps))
                      .matrix();
    model.set_params(theta);
    result.iterations = step;

    if (step % std::max(1, opts.eval_every) == 0 || step == opts.stochastic_steps) {
      double full = -std::numeric_limits<double>::infinity();
      try {
        full = elbo(model, X, y, N);
      } catch (const NumericalError&) {
      }
      if (std::isfinite(full) && full > result.objective) {
        const double gain = (full - result.objective) / std::max(1.0, std::abs(result.objective));
        result.objective = full;
        result.params = theta;
        if (gain < opts.tolerance) result.converged = true;
      }
      result.trace.push_back(result.objective);
    }
  }
  model.set_params(result.params);
  elbo(model, X.topRows(std::min<Index>(N, batch)), y.head(std::min<Index>(N, batch)), N, &result.gradient);
  return result;
}

FitResult fit_svgp(SvgpModel& model, const Dataset& data, const OptimizerOptions& opts,
                   bool optimal_init) {
  return fit_svgp(model, data.X, data.y, opts, optimal_init);
}

PosteriorPrediction predict_svgp(const SvgpModel& model, const MatrixXd& Xq) {
  if (Xq.cols() != model.q.Z.cols())
    throw InputError("predict_svgp: query has " + std::to_string(Xq.cols()) +
                     " columns, model expects " + std::to_string(model.q.Z.cols()));
  const Cholesky kzz = robust_cholesky(gram(model.kernel, model.q.Z));
  PosteriorPrediction p;
  p.mean.resize(Xq.rows());
  p.latent_var.resize(Xq.rows());
  const double kdiag = model.kernel.diag_value();
  const auto R = model.q.chol_cov.triangularView<Eigen::Lower>();
  for (Index start = 0; start < Xq.rows(); start += kChunk) {
    const Index b = std::min(kChunk, Xq.rows() - start);
    const MatrixXd a = kzz.solve_lower(gram(model.kernel, model.q.Z, Xq.middleRows(start, b)));
    const MatrixXd rta = R.transpose() * a;
    p.mean.segment(start, b) = (a.transpose() * model.q.m).array() + model.mean;
    p.latent_var.segment(start, b) =
        (kdiag - a.colwise().squaredNorm().transpose().array() + rta.colwise().squaredNorm().transpose().array())
            .cwiseMax(0.0);
  }
  p.observed_var = p.latent_var.array() + model.noise_variance();
  return p;
}

MatrixXd init_inducing(const MatrixXd& X, Index M, std::uint64_t seed) {
  const Index n = X.rows();
  if (M <= 0) throw InputError("init_inducing: M must be positive");
  if (M > n) throw InputError("init_inducing: M exceeds the number of rows");
  Rng rng(seed);

  std::set<std::vector<double>> distinct;
  std::vector<double> row(static_cast<std::size_t>(X.cols()));
  for (Index i = 0; i < n && static_cast<Index>(distinct.size()) < M; ++i) {
    for (Index c = 0; c < X.cols(); ++c) row[static_cast<std::size_t>(c)] = X(i, c);
    distinct.insert(row);
  }
  MatrixXd Z(M, X.cols());
  if (static_cast<Index>(distinct.size()) < M) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (Index i = 0; i < M; ++i) {
      const auto j = static_cast<std::size_t>(i) + uniform_index(rng, static_cast<std::uint64_t>(n - i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
      Z.row(i) = X.row(idx[static_cast<std::size_t>(i)]);
    }
    return Z;
  }

  VectorXd d2 = VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  Index pick = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(n)));
  for (Index k = 0; k < M; ++k) {
    Z.row(k) = X.row(pick);
    d2 = d2.cwiseMin((X.rowwise() - X.row(pick)).rowwise().squaredNorm());
    if (k + 1 == M) break;
    const double total = d2.sum();
    const double target = uniform_unit(rng) * total;
    double acc = 0.0;
    pick = -1;
    for (Index i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      acc += d2[i];
      if (acc > target) {
        pick = i;
        break;
      }
    }
    if (pick < 0) {  // rounding at the tail: take the last candidate
      for (Index i = n - 1; i >= 0; --i)
        if (d2[i] > 0.0) {
          pick = i;
          break;
        }
    }
  }
  return Z;
}

}  // namespace stgp
