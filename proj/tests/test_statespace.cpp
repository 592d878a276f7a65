#include "stgp/statespace.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <numbers>

using namespace stgp;

namespace {

// Dense separable GP with explicit inverse, used as the reference.
struct DenseOracle {
  MatrixXd coords;       // n x ds
  VectorXd times;        // n
  VectorXd y;            // n
  Kernel spatial;
  StateSpaceKernel temporal;
  double noise;
  double mean;

  double k(const Eigen::RowVectorXd& c1, double t1, const Eigen::RowVectorXd& c2, double t2) const {
    return eval(spatial, c1.transpose(), c2.transpose()) * temporal.covariance(t1 - t2);
  }
  MatrixXd cov() const {
    const Index n = y.size();
    MatrixXd K(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) K(i, j) = k(coords.row(i), times[i], coords.row(j), times[j]);
    return K;
  }
  double nll() const {
    MatrixXd K = cov();
    K.diagonal().array() += noise;
    const VectorXd r = y.array() - mean;
    const double logdet = std::log(K.determinant());
    return 0.5 * (r.dot(K.inverse() * r) + logdet + static_cast<double>(y.size()) * std::log(2 * std::numbers::pi));
  }
  void predict(const MatrixXd& q, VectorXd& mu, VectorXd& var) const {
    const Index ds = coords.cols();
    MatrixXd K = cov();
    K.diagonal().array() += noise;
    const MatrixXd Kinv = K.inverse();
    const VectorXd r = y.array() - mean;
    mu.resize(q.rows());
    var.resize(q.rows());
    for (Index a = 0; a < q.rows(); ++a) {
      VectorXd ks(y.size());
      for (Index i = 0; i < y.size(); ++i) ks[i] = k(q.row(a).head(ds), q(a, ds), coords.row(i), times[i]);
      mu[a] = mean + ks.dot(Kinv * r);
      var[a] = k(q.row(a).head(ds), q(a, ds), q.row(a).head(ds), q(a, ds)) - ks.dot(Kinv * ks);
    }
  }
};

SpatioTemporalGrid random_grid(Index S, Index T, Rng& rng, double missing) {
  SpatioTemporalGrid g;
  g.site_coords.resize(S, 2);
  for (Index s = 0; s < S; ++s) {
    g.site_coords(s, 0) = 2.0 * uniform_unit(rng);
    g.site_coords(s, 1) = 2.0 * uniform_unit(rng);
    g.site_ids.push_back("s" + std::to_string(s));
  }
  g.times.resize(T);
  double t = 0.0;
  for (Index i = 0; i < T; ++i) {
    t += 0.2 + uniform_unit(rng);
    g.times[i] = t;
  }
  g.values.resize(T, S);
  g.observed.setConstant(T, S, true);
  for (Index i = 0; i < T; ++i)
    for (Index s = 0; s < S; ++s) {
      g.values(i, s) = std::sin(g.times[i]) + g.site_coords(s, 0) + 0.3 * standard_normal(rng);
      if (uniform_unit(rng) < missing) g.observed(i, s) = false;
    }
  g.spatial = Kernel::squared_exponential(1.0, 0.8);
  return g;
}

DenseOracle oracle_from(const SpatioTemporalGrid& g, const StateSpaceKernel& temporal, double noise,
                        double mean) {
  DenseOracle o{MatrixXd(g.num_observed(), 2), VectorXd(g.num_observed()), VectorXd(g.num_observed()),
                g.spatial, temporal, noise, mean};
  Index r = 0;
  for (Index t = 0; t < g.num_times(); ++t)
    for (Index s = 0; s < g.num_sites(); ++s)
      if (g.observed(t, s)) {
        o.coords.row(r) = g.site_coords.row(s);
        o.times[r] = g.times[t];
        o.y[r] = g.values(t, s);
        ++r;
      }
  return o;
}

}  // namespace

TEST(StateSpaceKernel, StationaryCovSolvesLyapunov) {
  for (auto fam : {TemporalFamily::Matern12, TemporalFamily::Matern32}) {
    const StateSpaceKernel k(fam, 1.7, 0.6);
    const MatrixXd F = k.feedback(), P = k.stationary_cov(), L = k.noise_effect();
    const MatrixXd lyap = F * P + P * F.transpose() + L * k.diffusion() * L.transpose();
    EXPECT_LT(lyap.cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(StateSpaceKernel, InducedCovarianceMatchesClosedForm) {
  for (auto fam : {TemporalFamily::Matern12, TemporalFamily::Matern32}) {
    const StateSpaceKernel k(fam, 2.0, 1.3);
    for (double tau : {0.1, 0.5, 1.0, 3.0, 7.0}) {
      const Transition tr = discretize(k, tau);
      const double induced = (k.observation() * tr.A * k.stationary_cov() * k.observation().transpose())(0, 0);
      EXPECT_NEAR(induced, k.covariance(tau), 1e-12);
    }
  }
}

TEST(StateSpaceKernel, TransitionIsMatrixExponential) {
  const StateSpaceKernel k(TemporalFamily::Matern32, 1.0, 0.7);
  const double dt = 0.9;
  // Taylor series oracle for exp(F dt).
  const MatrixXd F = k.feedback() * dt;
  MatrixXd term = MatrixXd::Identity(2, 2), sum = term;
  for (int i = 1; i < 40; ++i) {
    term = term * F / i;
    sum += term;
  }
  EXPECT_LT((discretize(k, dt).A - sum).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Discretize, OrnsteinUhlenbeckClosedForm) {
  const StateSpaceKernel k(TemporalFamily::Matern12, 1.5, 1.0);
  const Transition t = discretize(k, 1.0);
  EXPECT_NEAR(t.A(0, 0), std::exp(-1.0), 1e-14);
  EXPECT_NEAR(t.Q(0, 0), 1.5 * (1 - std::exp(-2.0)), 1e-14);
}

TEST(Discretize, LargeStepDecorrelates) {
  const StateSpaceKernel k(TemporalFamily::Matern12, 1.0, 0.5);
  const Transition t = discretize(k, 20.0);
  EXPECT_LT(std::abs(t.A(0, 0)), 1e-8);
  EXPECT_NEAR(t.Q(0, 0), 1.0, 1e-8);
}

TEST(Discretize, ProcessNoiseIsPsd) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const StateSpaceKernel k(TemporalFamily::Matern32, 1.0, 0.05 + 3 * uniform_unit(rng));
    const Transition t = discretize(k, 0.01 + 5 * uniform_unit(rng));
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(t.Q);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
    EXPECT_LT((t.Q - t.Q.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Discretize, RejectsNonPositiveStep) {
  const StateSpaceKernel k(TemporalFamily::Matern32);
  EXPECT_THROW(discretize(k, 0.0), InputError);
  EXPECT_THROW(discretize(k, -1.0), InputError);
}

TEST(Kalman, SingleSiteMatchesExactGp) {
  Rng rng(11);
  for (auto fam : {TemporalFamily::Matern12, TemporalFamily::Matern32}) {
    for (Index T : {5, 50, 200}) {
      SpatioTemporalGrid g = random_grid(1, T, rng, 0.0);
      const StateSpaceKernel temporal(fam, 1.3, 1.1);
      const double noise = 0.2, mean = 0.4;
      const DenseOracle o = oracle_from(g, temporal, noise, mean);
      EXPECT_NEAR(negative_log_likelihood_ss(g, temporal, noise, mean), o.nll(), 1e-6);

      MatrixXd q(T + 2, 3);
      for (Index i = 0; i < T; ++i) q.row(i) << g.site_coords.row(0), g.times[i];
      q.row(T) << g.site_coords.row(0), g.times[T / 2] + 0.05;   // between steps
      q.row(T + 1) << g.site_coords.row(0), g.times[T - 1] + 2;  // beyond the end
      const PosteriorPrediction p = kalman_fit_predict(g, temporal, noise, mean, q);
      VectorXd mu, var;
      o.predict(q, mu, var);
      EXPECT_LT((p.mean - mu).cwiseAbs().maxCoeff(), 1e-6) << "T=" << T;
      EXPECT_LT((p.latent_var - var).cwiseAbs().maxCoeff(), 1e-6) << "T=" << T;
      EXPECT_LT((p.observed_var - p.latent_var).array().abs().maxCoeff() - noise, 1e-12);
    }
  }
}

TEST(Kalman, KroneckerGridMatchesExactGp) {
  Rng rng(5);
  for (Index S : {2, 3, 4}) {
    SpatioTemporalGrid g = random_grid(S, 100, rng, 0.0);
    const StateSpaceKernel temporal(TemporalFamily::Matern32, 0.9, 1.5);
    const double noise = 0.1, mean = -0.2;
    const DenseOracle o = oracle_from(g, temporal, noise, mean);
    EXPECT_NEAR(negative_log_likelihood_ss(g, temporal, noise, mean), o.nll(), 1e-5);

    MatrixXd q(3 * S + 1, 3);
    Index r = 0;
    for (Index s = 0; s < S; ++s)
      for (Index t : {Index{0}, Index{37}, Index{99}}) q.row(r++) << g.site_coords.row(s), g.times[t];
    q.row(r) << 1.0, 1.0, g.times[50] + 0.1;  // off-grid site, between steps
    const PosteriorPrediction p = kalman_fit_predict(g, temporal, noise, mean, q);
    VectorXd mu, var;
    o.predict(q, mu, var);
    EXPECT_LT((p.mean - mu).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_LT((p.latent_var - var).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Kalman, MissingCellsMatchHeldOutPosterior) {
  Rng rng(8);
  SpatioTemporalGrid g = random_grid(3, 30, rng, 0.3);
  g.observed(10, 1) = false;
  const StateSpaceKernel temporal(TemporalFamily::Matern32, 1.0, 2.0);
  const DenseOracle o = oracle_from(g, temporal, 0.05, 0.0);
  EXPECT_NEAR(negative_log_likelihood_ss(g, temporal, 0.05, 0.0), o.nll(), 1e-6);
  MatrixXd q(1, 3);
  q << g.site_coords.row(1), g.times[10];
  const PosteriorPrediction p = kalman_fit_predict(g, temporal, 0.05, 0.0, q);
  VectorXd mu, var;
  o.predict(q, mu, var);
  EXPECT_NEAR(p.mean[0], mu[0], 1e-6);
  EXPECT_NEAR(p.latent_var[0], var[0], 1e-6);
}

TEST(Kalman, AllMissingRevertsToPrior) {
  Rng rng(2);
  SpatioTemporalGrid g = random_grid(2, 10, rng, 0.0);
  g.observed.setConstant(false);
  const StateSpaceKernel temporal(TemporalFamily::Matern12, 2.5, 1.0);
  EXPECT_EQ(negative_log_likelihood_ss(g, temporal, 0.1, 3.0), 0.0);
  MatrixXd q(2, 3);
  q << g.site_coords.row(0), g.times[3], 5.0, 5.0, 1.234;
  const PosteriorPrediction p = kalman_fit_predict(g, temporal, 0.1, 3.0, q);
  for (Index i = 0; i < 2; ++i) {
    EXPECT_NEAR(p.mean[i], 3.0, 1e-12);
    EXPECT_NEAR(p.latent_var[i], 2.5 * g.spatial.diag_value(), 1e-6);
  }
}

TEST(Kalman, SiteOrderDoesNotChangeLikelihood) {
  Rng rng(9);
  SpatioTemporalGrid g = random_grid(4, 40, rng, 0.2);
  const StateSpaceKernel temporal(TemporalFamily::Matern32, 1.0, 1.0);
  const double a = negative_log_likelihood_ss(g, temporal, 0.1, 0.0);
  SpatioTemporalGrid h = g;
  const std::vector<Index> perm{2, 0, 3, 1};
  for (Index s = 0; s < 4; ++s) {
    h.site_coords.row(s) = g.site_coords.row(perm[s]);
    h.values.col(s) = g.values.col(perm[s]);
    h.observed.col(s) = g.observed.col(perm[s]);
  }
  EXPECT_NEAR(negative_log_likelihood_ss(h, temporal, 0.1, 0.0), a, 1e-8);
}

TEST(Kalman, ValidatesGrid) {
  Rng rng(1);
  SpatioTemporalGrid g = random_grid(2, 5, rng, 0.0);
  g.times[3] = g.times[2];
  const StateSpaceKernel temporal(TemporalFamily::Matern32);
  EXPECT_THROW(negative_log_likelihood_ss(g, temporal, 0.1, 0.0), InputError);
}

TEST(MakeGrid, PivotsAndAveragesDuplicates) {
  std::vector<SensorReading> rs;
  std::size_t id = 0;
  for (int s = 0; s < 3; ++s)
    for (int h = 0; h < 4; ++h) {
      if (s == 2 && h == 1) continue;
      rs.push_back({"site" + std::to_string(s), 0.3 + 0.01 * s, 32.5 + 0.02 * s, 1000 + h, 10.0 + s + h, {}, id++});
    }
  rs.push_back({"site0", 0.3, 32.5, 1002, 20.0, {}, id++});  // duplicate of (site0, 1002), value 12
  const Dataset d = build_dataset(rs);
  const SpatioTemporalGrid g = make_grid(d, Kernel::squared_exponential());
  EXPECT_EQ(g.num_sites(), 3);
  EXPECT_EQ(g.num_times(), 4);
  EXPECT_EQ(g.num_observed(), 11u);
  EXPECT_EQ(g.duplicates_averaged, 1u);
  EXPECT_FALSE(g.observed(1, 2));
  const VectorXd normed = d.stats.normalize_targets((VectorXd(1) << 16.0).finished());
  EXPECT_NEAR(g.values(2, 0), normed[0], 1e-12);
}

TEST(FitStateSpace, ObjectiveNonDecreasingAndRecoversLengthscale) {
  // Sample a single-site Matern-3/2 path with known lengthscale.
  int within = 0;
  const int seeds = 10;
  for (int seed = 1; seed <= seeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    const Index T = 400;
    const double true_l = 3.0;
    const StateSpaceKernel truth(TemporalFamily::Matern32, 1.0, true_l);
    const Transition tr = discretize(truth, 1.0);
    Eigen::LLT<MatrixXd> qc(tr.Q);
    Eigen::LLT<MatrixXd> pc(truth.stationary_cov());
    VectorXd x = pc.matrixL() * VectorXd{{standard_normal(rng), standard_normal(rng)}};
    SpatioTemporalGrid g;
    g.site_coords = MatrixXd::Zero(1, 2);
    g.site_ids = {"a"};
    g.times = VectorXd::LinSpaced(T, 0.0, static_cast<double>(T - 1));
    g.values.resize(T, 1);
    g.observed.setConstant(T, 1, true);
    for (Index t = 0; t < T; ++t) {
      if (t > 0) x = tr.A * x + qc.matrixL() * VectorXd{{standard_normal(rng), standard_normal(rng)}};
      g.values(t, 0) = x[0] + 0.1 * standard_normal(rng);
    }
    StateSpaceModel model{g, StateSpaceKernel(TemporalFamily::Matern32, 1.0, 1.0), std::log(0.05), 0.0};
    OptimizerOptions opts;
    opts.max_iterations = 300;
    const FitResult r = fit_statespace(model, opts);
    for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_GE(r.trace[i], r.trace[i - 1]);
    const double l = model.temporal.lengthscale();
    if (std::abs(l - true_l) <= 0.3 * true_l) ++within;
  }
  EXPECT_EQ(within, seeds);
}

TEST(Kalman, RuntimeLinearInTime) {
  Rng rng(4);
  const StateSpaceKernel temporal(TemporalFamily::Matern32, 1.0, 3.0);
  auto time_of = [&](Index T) {
    const SpatioTemporalGrid g = random_grid(8, T, rng, 0.1);
    double best = 1e300;
    for (int rep = 0; rep < 5; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      volatile double v = negative_log_likelihood_ss(g, temporal, 0.1, 0.0);
      (void)v;
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
  };
  const double ratio = time_of(1600) / time_of(800);
  EXPECT_GT(ratio, 1.5);
  EXPECT_LT(ratio, 2.5);
}
