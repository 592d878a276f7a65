#include "stgp/linalg.hpp"
#include "stgp/optimizer.hpp"

#include <gtest/gtest.h>

using namespace stgp;

namespace {

MatrixXd random_spd(Index n, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd A(n, n);
  for (Index i = 0; i < A.size(); ++i) A.data()[i] = standard_normal(rng);
  MatrixXd S = A * A.transpose();
  S.diagonal().array() += 0.5;
  return S;
}

}  // namespace

TEST(Cholesky, SolveAndLogDet) {
  const MatrixXd K = random_spd(12, 1);
  const Cholesky c = robust_cholesky(K);
  EXPECT_EQ(c.jitter, 0.0);
  EXPECT_LE((c.lower * c.lower.transpose() - K).cwiseAbs().maxCoeff(), 1e-10);
  const VectorXd b = VectorXd::LinSpaced(12, -1.0, 2.0);
  EXPECT_LE((K * c.solve(b) - b).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_NEAR(c.log_det(), std::log(K.determinant()), 1e-9);
  EXPECT_LE((c.inverse() - K.inverse()).cwiseAbs().maxCoeff(), 1e-9);
  const MatrixXd inv = c.inverse();
  EXPECT_EQ(inv, inv.transpose());
  EXPECT_LE((c.lower * c.solve_lower(MatrixXd::Identity(12, 12)) - MatrixXd::Identity(12, 12))
                .cwiseAbs()
                .maxCoeff(),
            1e-10);
}

TEST(Cholesky, JitterRescuesSingularMatrix) {
  // Rank one with a tiny negative shift: plain factorization fails, the
  // smallest jitter level makes it positive definite.
  const VectorXd v = VectorXd::LinSpaced(6, 1.0, 2.0);
  MatrixXd K = v * v.transpose();
  K.diagonal().array() -= 1e-12;
  const Cholesky c = robust_cholesky(K);
  const double mean_diag = K.diagonal().mean();
  EXPECT_GE(c.jitter, 1e-8 * mean_diag * (1 - 1e-12));
  EXPECT_LE(c.jitter, 1e-2 * mean_diag * (1 + 1e-12));
  MatrixXd Kj = K;
  Kj.diagonal().array() += c.jitter;
  EXPECT_LE((c.lower * c.lower.transpose() - Kj).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Cholesky, IndefiniteMatrixReportsJitterLevels) {
  // Eigenvalues -1 and 3: no jitter up to 1e-2 * mean(diag) can fix it.
  MatrixXd K(2, 2);
  K << 1.0, 2.0, 2.0, 1.0;
  try {
    robust_cholesky(K);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const auto& j = e.attempted_jitters();
    ASSERT_EQ(j.size(), 7u);  // 1e-8 .. 1e-2
    const double mean_diag = K.diagonal().mean();
    EXPECT_NEAR(j.front(), 1e-8 * mean_diag, 1e-20);
    for (std::size_t i = 1; i < j.size(); ++i) EXPECT_NEAR(j[i] / j[i - 1], 10.0, 1e-9);
  }
}

TEST(Cholesky, NonFiniteInputThrows) {
  MatrixXd K = MatrixXd::Identity(3, 3);
  K(1, 1) = std::nan("");
  EXPECT_THROW(robust_cholesky(K), NumericalError);
}

TEST(Cholesky, BackwardMatchesFiniteDifferences) {
  // E(K) = sum(W .* chol(K)); compare dE/dK against symmetric perturbations.
  const Index n = 5;
  const MatrixXd K = random_spd(n, 2);
  Rng rng(3);
  MatrixXd W(n, n);
  for (Index i = 0; i < W.size(); ++i) W.data()[i] = standard_normal(rng);
  W = W.triangularView<Eigen::Lower>();
  const auto energy = [&](const MatrixXd& A) { return robust_cholesky(A).lower.cwiseProduct(W).sum(); };
  const MatrixXd G = cholesky_backward(robust_cholesky(K).lower, W);
  EXPECT_LE((G - G.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  const double h = 1e-6;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) {
      MatrixXd up = K, dn = K;
      up(i, j) += h;
      dn(i, j) -= h;
      if (i != j) {
        up(j, i) += h;
        dn(j, i) -= h;
      }
      const double fd = (energy(up) - energy(dn)) / (2 * h);
      const double analytic = i == j ? G(i, i) : G(i, j) + G(j, i);
      EXPECT_NEAR(analytic, fd, 1e-6 * std::max(1.0, std::abs(fd))) << i << "," << j;
    }
}

TEST(Optimizer, FindsMaximumOfConcaveQuadratic) {
  const VectorXd target = (VectorXd(3) << 1.0, -2.0, 0.5).finished();
  const Objective f = [&](const VectorXd& x, VectorXd* g) {
    const VectorXd d = x - target;
    if (g) *g = -2.0 * d;
    return -d.squaredNorm();
  };
  OptimizerOptions o;
  o.max_iterations = 2000;
  o.learning_rate = 0.1;
  const FitResult r = maximize(f, VectorXd::Zero(3), o);
  EXPECT_LE((r.params - target).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_TRUE(r.converged);
  for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_GE(r.trace[i], r.trace[i - 1]);
  EXPECT_GE(r.objective, f(VectorXd::Zero(3), nullptr));
}

TEST(Optimizer, StationaryStartStopsImmediately) {
  const Objective f = [](const VectorXd& x, VectorXd* g) {
    if (g) *g = -2.0 * x;
    return -x.squaredNorm();
  };
  const FitResult r = maximize(f, VectorXd::Zero(2), {});
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations, 1);
  EXPECT_EQ(r.params, VectorXd::Zero(2));
}

TEST(Optimizer, NonFiniteStartThrows) {
  const Objective f = [](const VectorXd&, VectorXd* g) {
    if (g) g->setZero(1);
    return std::nan("");
  };
  EXPECT_THROW(maximize(f, VectorXd::Zero(1), {}), InputError);
}

TEST(Optimizer, RejectsStepsIntoNonFiniteRegion) {
  // log barrier: objective is -inf for x <= 0; steps there must be rejected.
  const Objective f = [](const VectorXd& x, VectorXd* g) {
    if (x[0] <= 0) {
      if (g) g->setZero(1);
      return -std::numeric_limits<double>::infinity();
    }
    if (g) (*g)[0] = 1.0 / x[0] - 1.0;
    return std::log(x[0]) - x[0];
  };
  OptimizerOptions o;
  o.learning_rate = 0.5;
  o.max_iterations = 3000;
  const FitResult r = maximize(f, VectorXd::Constant(1, 0.05), o);
  EXPECT_NEAR(r.params[0], 1.0, 1e-2);
  EXPECT_TRUE(std::isfinite(r.objective));
}

TEST(Optimizer, DeterministicAndFiniteDifferenceHelper) {
  const Objective f = [](const VectorXd& x, VectorXd* g) {
    if (g) *g = (VectorXd(2) << std::cos(x[0]), -2 * x[1]).finished();
    return std::sin(x[0]) - x[1] * x[1];
  };
  const VectorXd x0 = (VectorXd(2) << 0.3, 0.7).finished();
  VectorXd g;
  f(x0, &g);
  EXPECT_LE((finite_difference_gradient(f, x0, 1e-5) - g).cwiseAbs().maxCoeff(), 1e-8);
  const FitResult a = maximize(f, x0, {});
  const FitResult b = maximize(f, x0, {});
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.trace, b.trace);
}
