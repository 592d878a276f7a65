#include "stgp/statespace.hpp"

#include <algorithm>
#include <map>
#include <numbers>

namespace stgp {

StateSpaceKernel::StateSpaceKernel(TemporalFamily family, double variance, double lengthscale)
    : family_(family), log_variance_(std::log(variance)), log_lengthscale_(std::log(lengthscale)) {
  if (!(variance > 0.0) || !(lengthscale > 0.0))
    throw InputError("state-space kernel: variance and lengthscale must be positive");
}

void StateSpaceKernel::set_log_params(double log_variance, double log_lengthscale) {
  log_variance_ = log_variance;
  log_lengthscale_ = log_lengthscale;
}

MatrixXd StateSpaceKernel::feedback() const {
  const double l = lengthscale();
  if (family_ == TemporalFamily::Matern12) return MatrixXd::Constant(1, 1, -1.0 / l);
  const double lam = std::sqrt(3.0) / l;
  MatrixXd f(2, 2);
  f << 0.0, 1.0, -lam * lam, -2.0 * lam;
  return f;
}

MatrixXd StateSpaceKernel::noise_effect() const {
  MatrixXd l = MatrixXd::Zero(state_dim(), 1);
  l(state_dim() - 1, 0) = 1.0;
  return l;
}

double StateSpaceKernel::diffusion() const {
  const double l = lengthscale();
  if (family_ == TemporalFamily::Matern12) return 2.0 * variance() / l;
  const double lam = std::sqrt(3.0) / l;
  return 4.0 * lam * lam * lam * variance();
}

MatrixXd StateSpaceKernel::stationary_cov() const {
  if (family_ == TemporalFamily::Matern12) return MatrixXd::Constant(1, 1, variance());
  const double lam = std::sqrt(3.0) / lengthscale();
  MatrixXd p = MatrixXd::Zero(2, 2);
  p(0, 0) = variance();
  p(1, 1) = lam * lam * variance();
  return p;
}

Eigen::RowVectorXd StateSpaceKernel::observation() const {
  Eigen::RowVectorXd h = Eigen::RowVectorXd::Zero(state_dim());
  h[0] = 1.0;
  return h;
}

double StateSpaceKernel::covariance(double tau) const {
  const double r = std::abs(tau) / lengthscale();
  if (family_ == TemporalFamily::Matern12) return variance() * std::exp(-r);
  const double s3 = std::sqrt(3.0) * r;
  return variance() * (1.0 + s3) * std::exp(-s3);
}

Transition discretize(const StateSpaceKernel& kernel, double dt) {
  if (!(dt > 0.0)) throw InputError("discretize: time step must be positive");
  Transition t;
  const double l = kernel.lengthscale();
  if (kernel.family() == TemporalFamily::Matern12) {
    t.A = MatrixXd::Constant(1, 1, std::exp(-dt / l));
  } else {
    const double lam = std::sqrt(3.0) / l;
    const double e = std::exp(-lam * dt);
    t.A.resize(2, 2);
    t.A << e * (1.0 + lam * dt), e * dt, -e * lam * lam * dt, e * (1.0 - lam * dt);
  }
  const MatrixXd pinf = kernel.stationary_cov();
  t.Q = pinf - t.A * pinf * t.A.transpose();
  t.Q = 0.5 * (t.Q + t.Q.transpose());
  return t;
}

void SpatioTemporalGrid::validate() const {
  const Index S = num_sites(), T = num_times();
  if (values.rows() != T || values.cols() != S || observed.rows() != T || observed.cols() != S)
    throw InputError("grid: value/mask shape does not match sites x times");
  for (Index t = 1; t < T; ++t)
    if (!(times[t] > times[t - 1])) throw InputError("grid: times must be strictly increasing");
  if (S > 0) spatial.validate(site_coords.cols());
}

SpatioTemporalGrid make_grid(const Dataset& data, Kernel spatial) {
  if (data.X.cols() < 3) throw InputError("make_grid: dataset needs latitude, longitude, time columns");
  if (data.X.cols() > 3)
    throw InputError("make_grid: the state-space backend accepts space and time inputs only");
  SpatioTemporalGrid g;
  g.spatial = std::move(spatial);

  std::map<int, Index> site_col;
  for (Index r = 0; r < data.size(); ++r) site_col.emplace(data.site[static_cast<std::size_t>(r)], 0);
  g.site_coords.resize(static_cast<Index>(site_col.size()), 2);
  Index next = 0;
  for (auto& [site, col] : site_col) {
    col = next++;
    g.site_ids.push_back(data.site_names[static_cast<std::size_t>(site)]);
  }
  std::vector<double> times(data.X.col(2).data(), data.X.col(2).data() + data.size());
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  g.times = Eigen::Map<VectorXd>(times.data(), static_cast<Index>(times.size()));

  const Index S = g.num_sites(), T = g.num_times();
  g.values = MatrixXd::Zero(T, S);
  g.observed.setConstant(T, S, false);
  Eigen::MatrixXi counts = Eigen::MatrixXi::Zero(T, S);
  std::vector<bool> placed(static_cast<std::size_t>(S), false);
  for (Index r = 0; r < data.size(); ++r) {
    const Index s = site_col[data.site[static_cast<std::size_t>(r)]];
    if (!placed[static_cast<std::size_t>(s)]) {
      g.site_coords.row(s) = data.X.block(r, 0, 1, 2);
      placed[static_cast<std::size_t>(s)] = true;
    }
    const auto t = static_cast<Index>(std::lower_bound(times.begin(), times.end(), data.X(r, 2)) - times.begin());
    g.values(t, s) += data.y[r];
    if (counts(t, s)++ > 0) ++g.duplicates_averaged;
    g.observed(t, s) = true;
  }
  for (Index t = 0; t < T; ++t)
    for (Index s = 0; s < S; ++s)
      if (counts(t, s) > 1) g.values(t, s) /= counts(t, s);
  return g;
}

namespace {

/// Joint-state Kalman machinery over S sites with state dimension s each.
/// State index of (site j, component c) is j * s + c.
class JointFilter {
 public:
  JointFilter(const SpatioTemporalGrid& grid, const StateSpaceKernel& temporal, double noise, double mean)
      : grid_(grid), temporal_(temporal), noise_(noise), mean_(mean) {
    if (!(noise > 0.0)) throw InputError("state-space: noise variance must be positive");
    grid.validate();
    s_ = temporal.state_dim();
    S_ = grid.num_sites();
    D_ = s_ * S_;
    spatial_chol_ = robust_cholesky(gram(grid.spatial, grid.site_coords));
    ks_ = spatial_chol_.lower * spatial_chol_.lower.transpose();
    p0_ = kron(ks_, temporal.stationary_cov());
  }

  Index state_size() const { return D_; }
  Index site_state(Index site) const { return site * s_; }
  const MatrixXd& spatial_cov() const { return ks_; }
  const Cholesky& spatial_chol() const { return spatial_chol_; }

  /// Filter over `times`; row[k] is the grid row observed at step k or -1.
  /// When `keep` is set, filtered moments are stored per step.
  double filter(const std::vector<double>& times, const std::vector<Index>& row,
                std::vector<VectorXd>* m_keep, std::vector<MatrixXd>* p_keep) {
    VectorXd m = VectorXd::Zero(D_);
    MatrixXd P = p0_;
    double nll = 0.0;
    std::vector<Index> obs_state;
    std::vector<Index> obs_site;
    for (std::size_t k = 0; k < times.size(); ++k) {
      if (k > 0) predict(m, P, times[k] - times[k - 1]);
      if (row[k] >= 0) {
        obs_state.clear();
        obs_site.clear();
        for (Index j = 0; j < S_; ++j) {
          if (grid_.observed(row[k], j)) {
            obs_state.push_back(site_state(j));
            obs_site.push_back(j);
          }
        }
        if (!obs_state.empty()) nll += update(m, P, obs_state, obs_site, row[k]);
      }
      if (m_keep) m_keep->push_back(m);
      if (p_keep) p_keep->push_back(P);
    }
    return nll;
  }

  void predict(VectorXd& m, MatrixXd& P, double dt) {
    const auto& [A, Qj] = transition(dt);
    apply_block(A, m);
    apply_block_both(A, P);
    P += Qj;
  }

  const std::pair<MatrixXd, MatrixXd>& transition(double dt) {
    auto it = cache_.find(dt);
    if (it == cache_.end()) {
      const Transition t = discretize(temporal_, dt);
      it = cache_.emplace(dt, std::make_pair(t.A, kron(ks_, t.Q))).first;
    }
    return it->second;
  }

  // m <- (I (x) A) m
  void apply_block(const MatrixXd& A, VectorXd& m) const {
    for (Index j = 0; j < S_; ++j) m.segment(j * s_, s_) = A * m.segment(j * s_, s_);
  }

  // P <- (I (x) A) P (I (x) A)^T
  void apply_block_both(const MatrixXd& A, MatrixXd& P) const {
    if (s_ == 1) {
      P *= A(0, 0) * A(0, 0);
      return;
    }
    for (Index bi = 0; bi < S_; ++bi)
      for (Index bj = 0; bj < S_; ++bj) {
        auto blk = P.block(bi * s_, bj * s_, s_, s_);
        blk = (A * blk * A.transpose()).eval();
      }
  }

  static MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
    MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i)
      for (Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
  }

 private:
  double update(VectorXd& m, MatrixXd& P, const std::vector<Index>& idx,
                const std::vector<Index>& sites, Index row) {
    const auto k = static_cast<Index>(idx.size());
    const MatrixXd pobs = P(Eigen::all, idx);  // D x k
    MatrixXd innov = pobs(idx, Eigen::all);
    innov.diagonal().array() += noise_;
    const Cholesky chol = robust_cholesky(innov);
    VectorXd v(k);
    for (Index i = 0; i < k; ++i) v[i] = grid_.values(row, sites[static_cast<std::size_t>(i)]) - mean_ - m[idx[static_cast<std::size_t>(i)]];
    const VectorXd w = chol.solve_lower(v);
    const MatrixXd lw = chol.solve_lower(pobs.transpose());  // k x D
    m.noalias() += lw.transpose() * w;
    P.noalias() -= lw.transpose() * lw;
    P = 0.5 * (P + P.transpose()).eval();
    return 0.5 * (w.squaredNorm() + chol.log_det() + static_cast<double>(k) * std::log(2.0 * std::numbers::pi));
  }

  const SpatioTemporalGrid& grid_;
  const StateSpaceKernel& temporal_;
  double noise_;
  double mean_;
  Index s_ = 1, S_ = 0, D_ = 0;
  Cholesky spatial_chol_;
  MatrixXd ks_;
  MatrixXd p0_;
  std::map<double, std::pair<MatrixXd, MatrixXd>> cache_;
};

std::vector<Index> grid_rows(const SpatioTemporalGrid& grid) {
  std::vector<Index> rows(static_cast<std::size_t>(grid.num_times()));
  for (Index t = 0; t < grid.num_times(); ++t) rows[static_cast<std::size_t>(t)] = t;
  return rows;
}

}  // namespace

double negative_log_likelihood_ss(const SpatioTemporalGrid& grid, const StateSpaceKernel& temporal,
                                  double noise_variance, double mean) {
  if (grid.num_sites() == 0 || grid.num_times() == 0) return 0.0;
  JointFilter f(grid, temporal, noise_variance, mean);
  const std::vector<double> times(grid.times.data(), grid.times.data() + grid.num_times());
  return f.filter(times, grid_rows(grid), nullptr, nullptr);
}

PosteriorPrediction kalman_fit_predict(const SpatioTemporalGrid& grid, const StateSpaceKernel& temporal,
                                       double noise_variance, double mean, const MatrixXd& queries) {
  const Index ds = grid.site_coords.cols();
  if (queries.cols() != ds + 1)
    throw InputError("kalman_fit_predict: queries need " + std::to_string(ds) +
                     " coordinate columns plus time");
  if (grid.num_sites() == 0) throw InputError("kalman_fit_predict: grid has no sites");
  JointFilter f(grid, temporal, noise_variance, mean);

  // Merge grid times with query times.
  std::map<double, Index> step_of;
  for (Index t = 0; t < grid.num_times(); ++t) step_of.emplace(grid.times[t], t);
  for (Index q = 0; q < queries.rows(); ++q) step_of.emplace(queries(q, ds), -1);
  std::vector<double> times;
  std::vector<Index> rows;
  for (auto& [time, row] : step_of) {
    times.push_back(time);
    rows.push_back(row);
  }
  std::map<double, std::size_t> step_index;
  for (std::size_t k = 0; k < times.size(); ++k) step_index[times[k]] = k;

  std::vector<VectorXd> mf;
  std::vector<MatrixXd> pf;
  f.filter(times, rows, &mf, &pf);

  const std::size_t K = times.size();
  std::vector<bool> wanted(K, false);
  for (Index q = 0; q < queries.rows(); ++q) wanted[step_index[queries(q, ds)]] = true;

  const Index S = grid.num_sites();
  std::vector<Index> site_idx(static_cast<std::size_t>(S));
  for (Index j = 0; j < S; ++j) site_idx[static_cast<std::size_t>(j)] = f.site_state(j);

  // RTS backward pass, keeping site marginals at the wanted steps.
  std::vector<VectorXd> site_mean(K);
  std::vector<MatrixXd> site_cov(K);
  VectorXd ms = mf[K - 1];
  MatrixXd ps = pf[K - 1];
  auto keep = [&](std::size_t k) {
    if (!wanted[k]) return;
    site_mean[k] = ms(site_idx);
    site_cov[k] = ps(site_idx, site_idx);
  };
  keep(K - 1);
  for (std::size_t kk = K - 1; kk-- > 0;) {
    const auto& [A, Qj] = f.transition(times[kk + 1] - times[kk]);
    VectorXd mp = mf[kk];
    f.apply_block(A, mp);
    MatrixXd pp = pf[kk];
    f.apply_block_both(A, pp);
    pp += Qj;
    // G = P_f A^T P_p^{-1}  =>  P_p G^T = A P_f
    MatrixXd apf = pf[kk];
    {
      // rows of (I (x) A) P_f
      const Index s = temporal.state_dim();
      for (Index j = 0; j < S; ++j) apf.middleRows(j * s, s) = (A * apf.middleRows(j * s, s)).eval();
    }
    const Cholesky chol = robust_cholesky(pp);
    const MatrixXd gain = chol.solve(apf).transpose();
    ms = mf[kk] + gain * (ms - mp);
    ps = pf[kk] + gain * (ps - pp) * gain.transpose();
    ps = 0.5 * (ps + ps.transpose()).eval();
    keep(kk);
  }

  PosteriorPrediction out;
  out.mean.resize(queries.rows());
  out.latent_var.resize(queries.rows());
  const double tvar = temporal.variance();
  for (Index q = 0; q < queries.rows(); ++q) {
    const std::size_t k = step_index[queries(q, ds)];
    const VectorXd& mu = site_mean[k];
    const MatrixXd& cov = site_cov[k];
    const Eigen::RowVectorXd coord = queries.row(q).head(ds);
    Index match = -1;
    for (Index j = 0; j < S && match < 0; ++j)
      if (grid.site_coords.row(j) == coord) match = j;
    if (match >= 0) {
      out.mean[q] = mean + mu[match];
      out.latent_var[q] = std::max(0.0, cov(match, match));
      continue;
    }
    const VectorXd kstar = gram(grid.spatial, grid.site_coords, coord).col(0);
    const VectorXd w = f.spatial_chol().solve(kstar);
    const double cond = grid.spatial.diag_value() - kstar.dot(w);
    out.mean[q] = mean + w.dot(mu);
    out.latent_var[q] = std::max(0.0, tvar * std::max(0.0, cond) + w.dot(cov * w));
  }
  out.observed_var = out.latent_var.array() + noise_variance;
  return out;
}

VectorXd StateSpaceModel::params() const {
  const auto nk = static_cast<Index>(grid.spatial.num_params());
  VectorXd theta(nk + 4);
  theta.head(nk) = grid.spatial.log_params();
  theta[nk] = temporal.log_variance();
  theta[nk + 1] = temporal.log_lengthscale();
  theta[nk + 2] = log_noise;
  theta[nk + 3] = mean;
  return theta;
}

void StateSpaceModel::set_params(const VectorXd& theta) {
  if (static_cast<std::size_t>(theta.size()) != num_params())
    throw InputError("StateSpaceModel: wrong parameter count");
  const auto nk = static_cast<Index>(grid.spatial.num_params());
  grid.spatial.set_log_params(theta.head(nk));
  temporal.set_log_params(theta[nk], theta[nk + 1]);
  log_noise = theta[nk + 2];
  mean = theta[nk + 3];
}

FitResult fit_statespace(StateSpaceModel& model, const OptimizerOptions& opts) {
  StateSpaceModel work = model;
  const Objective value = [&work](const VectorXd& theta, VectorXd*) {
    work.set_params(theta);
    return -negative_log_likelihood_ss(work.grid, work.temporal, work.noise_variance(), work.mean);
  };
  const Objective objective = [&](const VectorXd& theta, VectorXd* grad) {
    const double f = value(theta, nullptr);
    if (grad) *grad = finite_difference_gradient(value, theta, 1e-5);
    return f;
  };
  FitResult result = maximize(objective, model.params(), opts);
  model.set_params(result.params);
  return result;
}

PosteriorPrediction predict_statespace(const StateSpaceModel& model, const MatrixXd& queries) {
  return kalman_fit_predict(model.grid, model.temporal, model.noise_variance(), model.mean, queries);
}

}  // namespace stgp
