#include "stgp/optimizer.hpp"

namespace stgp {

FitResult maximize(const Objective& f, const VectorXd& x0, const OptimizerOptions& opts) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;

  FitResult result;
  VectorXd x = x0;
  VectorXd g(x.size());
  double fx = f(x, &g);
  if (!std::isfinite(fx) || !g.allFinite())
    throw InputError("objective is not finite at the initial parameters");

  VectorXd m = VectorXd::Zero(x.size());
  VectorXd v = VectorXd::Zero(x.size());
  double lr = opts.learning_rate;
  int t = 0;
  int quiet = 0;

  result.params = x;
  result.objective = fx;
  result.gradient = g;

  for (int it = 0; it < opts.max_iterations; ++it) {
    result.iterations = it + 1;
    if (x.size() == 0 || g.lpNorm<Eigen::Infinity>() <= opts.tolerance) {
      result.converged = true;
      result.trace.push_back(fx);
      break;
    }
    ++t;
    m = kBeta1 * m + (1.0 - kBeta1) * g;
    v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseAbs2();
    const VectorXd mhat = m / (1.0 - std::pow(kBeta1, t));
    const VectorXd vhat = v / (1.0 - std::pow(kBeta2, t));
    const VectorXd candidate = x + lr * (mhat.array() / (vhat.array().sqrt() + kEps)).matrix();

    VectorXd gc(x.size());
    double fc = -std::numeric_limits<double>::infinity();
    try {
      fc = f(candidate, &gc);
    } catch (const NumericalError&) {
      fc = -std::numeric_limits<double>::infinity();
    }

    if (std::isfinite(fc) && gc.allFinite() && fc >= fx) {
      const double gain = (fc - fx) / std::max(1.0, std::abs(fx));
      x = candidate;
      fx = fc;
      g = gc;
      quiet = gain < opts.tolerance ? quiet + 1 : 0;
    } else {
      lr *= 0.5;
      m.setZero();
      v.setZero();
      t = 0;
    }
    result.trace.push_back(fx);
    if (quiet >= opts.patience || lr < opts.learning_rate * 1e-10) {
      result.converged = true;
      break;
    }
  }
  result.params = x;
  result.objective = fx;
  result.gradient = g;
  return result;
}

VectorXd finite_difference_gradient(const Objective& f, const VectorXd& x, double step) {
  VectorXd g(x.size());
  VectorXd xp = x;
  for (Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + step;
    const double up = f(xp, nullptr);
    xp[i] = x[i] - step;
    const double down = f(xp, nullptr);
    xp[i] = x[i];
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

}  // namespace stgp
