// Acceptance checks: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include "stgp/config.hpp"
#include "stgp/eval.hpp"
#include "stgp/statespace.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

using namespace stgp;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& title, bool pass, const std::string& detail, double secs) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << title << "  [" << detail << "; "
            << std::fixed << std::setprecision(1) << secs << " s]" << std::endl;
  std::cout.unsetf(std::ios::fixed);
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

MatrixXd random_inputs(Index n, Index d, Rng& rng, double scale) {
  MatrixXd X(n, d);
  for (Index i = 0; i < X.size(); ++i) X.data()[i] = scale * uniform_unit(rng);
  return X;
}

VectorXd random_vector(Index n, Rng& rng) {
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = standard_normal(rng);
  return v;
}

double log_uniform(Rng& rng, double lo, double hi) { return std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * uniform_unit(rng)); }

// A random expression over d columns drawn from the supported families.
Kernel random_kernel(Index d, Rng& rng) {
  auto se = [&] { return Kernel::squared_exponential(log_uniform(rng, 0.5, 2.0), log_uniform(rng, 0.5, 2.0)); };
  auto ard = [&] {
    std::vector<double> ls;
    for (Index j = 0; j < d; ++j) ls.push_back(log_uniform(rng, 0.5, 2.5));
    return Kernel::squared_exponential_ard(ls, log_uniform(rng, 0.5, 2.0));
  };
  auto per = [&](bool learn) {
    const auto col = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(d)));
    return Kernel::active_dims({col}, Kernel::periodic(log_uniform(rng, 1.0, 3.0), log_uniform(rng, 0.5, 2.0),
                                                       log_uniform(rng, 0.7, 2.0), learn));
  };
  switch (uniform_index(rng, 5)) {
    case 0: return se();
    case 1: return ard();
    case 2: return per(true);
    case 3: return Kernel::sum({ard(), per(false)});
    default: return Kernel::product({se(), Kernel::sum({per(true), per(false)})});
  }
}

// Explicit-inverse exact GP.
struct DenseGp {
  MatrixXd X;
  VectorXd y;
  Kernel k;
  double noise;
  double mean;

  MatrixXd cov() const {
    MatrixXd K = gram_serial(k, X, X);
    K.diagonal().array() += noise;
    return K;
  }
  double log_density() const {
    const MatrixXd K = cov();
    const VectorXd r = y.array() - mean;
    return -0.5 * r.dot(K.inverse() * r) - 0.5 * std::log(K.determinant()) -
           0.5 * static_cast<double>(y.size()) * std::log(2 * std::numbers::pi);
  }
  void predict(const MatrixXd& Xq, VectorXd& mu, VectorXd& var) const {
    const MatrixXd Kinv = cov().inverse();
    const MatrixXd Kq = gram_serial(k, Xq, X);
    mu = (Kq * (Kinv * (y.array() - mean).matrix())).array() + mean;
    var = (gram_serial(k, Xq, Xq) - Kq * Kinv * Kq.transpose()).diagonal();
  }
};

// Explicit-inverse separable spatial x Matern GP.
struct DenseSeparable {
  MatrixXd coords;
  VectorXd times;
  VectorXd y;
  Kernel spatial;
  StateSpaceKernel temporal;
  double noise;
  double mean;

  double k(const VectorXd& c1, double t1, const VectorXd& c2, double t2) const {
    return eval(spatial, c1, c2) * temporal.covariance(t1 - t2);
  }
  MatrixXd cov() const {
    const Index n = y.size();
    MatrixXd K(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) K(i, j) = k(coords.row(i).transpose(), times[i], coords.row(j).transpose(), times[j]);
    K.diagonal().array() += noise;
    return K;
  }
  double nll() const {
    const MatrixXd K = cov();
    const VectorXd r = y.array() - mean;
    return 0.5 * (r.dot(K.inverse() * r) + std::log(K.determinant()) +
                  static_cast<double>(y.size()) * std::log(2 * std::numbers::pi));
  }
  void predict(const MatrixXd& q, VectorXd& mu, VectorXd& var) const {
    const Index ds = coords.cols();
    const MatrixXd Kinv = cov().inverse();
    const VectorXd w = Kinv * (y.array() - mean).matrix();
    mu.resize(q.rows());
    var.resize(q.rows());
    for (Index a = 0; a < q.rows(); ++a) {
      const VectorXd qc = q.row(a).head(ds).transpose();
      VectorXd ks(y.size());
      for (Index i = 0; i < y.size(); ++i) ks[i] = k(qc, q(a, ds), coords.row(i).transpose(), times[i]);
      mu[a] = mean + ks.dot(w);
      var[a] = k(qc, q(a, ds), qc, q(a, ds)) - ks.dot(Kinv * ks);
    }
  }
};

SpatioTemporalGrid random_grid(Index S, Index T, Rng& rng) {
  SpatioTemporalGrid g;
  g.site_coords = random_inputs(S, 2, rng, 2.0);
  for (Index s = 0; s < S; ++s) g.site_ids.push_back("s" + std::to_string(s));
  g.times.resize(T);
  double t = 0.0;
  for (Index i = 0; i < T; ++i) g.times[i] = (t += 0.2 + uniform_unit(rng));
  g.values.resize(T, S);
  g.observed.setConstant(T, S, true);
  for (Index i = 0; i < T; ++i)
    for (Index s = 0; s < S; ++s) g.values(i, s) = std::sin(g.times[i]) + g.site_coords(s, 0) + 0.3 * standard_normal(rng);
  g.spatial = Kernel::squared_exponential(log_uniform(rng, 0.5, 1.5), log_uniform(rng, 0.5, 1.5));
  return g;
}

DenseSeparable dense_from(const SpatioTemporalGrid& g, const StateSpaceKernel& temporal, double noise, double mean) {
  const auto n = static_cast<Index>(g.num_observed());
  DenseSeparable o{MatrixXd(n, 2), VectorXd(n), VectorXd(n), g.spatial, temporal, noise, mean};
  Index r = 0;
  for (Index t = 0; t < g.num_times(); ++t)
    for (Index s = 0; s < g.num_sites(); ++s) {
      o.coords.row(r) = g.site_coords.row(s);
      o.times[r] = g.times[t];
      o.y[r++] = g.values(t, s);
    }
  return o;
}

double max_abs(const VectorXd& a, const VectorXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

// Worst |analytic - central difference| / max(|central difference|, floor).
double relative_gap(const VectorXd& analytic, const VectorXd& fd, double floor) {
  double worst = 0.0;
  for (Index i = 0; i < fd.size(); ++i)
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / std::max(std::abs(fd[i]), floor));
  return worst;
}

// ---------------------------------------------------------------------------

void criterion1() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const auto n = static_cast<Index>(1 + uniform_index(rng, 10));
    const auto d = static_cast<Index>(1 + uniform_index(rng, 4));
    const Kernel k = random_kernel(d, rng);
    const MatrixXd X = random_inputs(n, d, rng, 4.0);
    const VectorXd y = random_vector(n, rng);
    const double noise = log_uniform(rng, 0.01, 1.0), mean = standard_normal(rng);
    const GPModel m(k, X, y, noise, mean);
    const DenseGp o{X, y, k, noise, mean};
    worst = std::max(worst, std::abs(log_marginal_likelihood(m) - o.log_density()));
    const MatrixXd Xq = random_inputs(7, d, rng, 5.0);
    const PosteriorPrediction p = predict(m, Xq);
    VectorXd mu, var;
    o.predict(Xq, mu, var);
    worst = std::max({worst, max_abs(p.mean, mu), max_abs(p.latent_var, var.cwiseMax(0.0))});
  }
  report(1, "exact GP matches explicit-inverse oracle (50 instances, n<=10, d<=4)", worst <= 1e-8,
         "max abs diff " + sci(worst), seconds_since(t0));
}

void criterion2() {
  const auto t0 = Clock::now();
  Rng rng(202);
  constexpr double h = 1e-5;
  double worst = 0.0;
  for (int setting = 0; setting < 20; ++setting) {
    const Index d = 3, n = 25;
    const MatrixXd X = random_inputs(n, d, rng, 4.0);
    const MatrixXd X2 = random_inputs(9, d, rng, 4.0);
    // Every kernel family, each at fresh random hyperparameters.
    std::vector<Kernel> kernels;
    for (int i = 0; i < 6; ++i) kernels.push_back(random_kernel(d, rng));
    kernels.push_back(Kernel::product({Kernel::active_dims({0, 1}, Kernel::squared_exponential(log_uniform(rng, 0.5, 2), log_uniform(rng, 0.5, 2))),
                                       Kernel::active_dims({2}, Kernel::sum({Kernel::periodic(2.0, log_uniform(rng, 0.5, 2), 1.0, true),
                                                                             Kernel::periodic(5.0, 1.0, log_uniform(rng, 0.7, 2))}))}));
    for (const Kernel& k : kernels) {
      const VectorXd theta = k.log_params();
      const auto dK = grad_gram(k, X, X2);
      for (Index t = 0; t < theta.size(); ++t) {
        Kernel kp = k, km = k;
        VectorXd tp = theta, tm = theta;
        tp[t] += h;
        tm[t] -= h;
        kp.set_log_params(tp);
        km.set_log_params(tm);
        const MatrixXd fd = (gram_serial(kp, X, X2) - gram_serial(km, X, X2)) / (2 * h);
        const Eigen::Map<const VectorXd> a(dK[static_cast<std::size_t>(t)].data(), fd.size());
        const Eigen::Map<const VectorXd> b(fd.data(), fd.size());
        worst = std::max(worst, relative_gap(a, b, 1e-3));
      }
      // Input gradient, contracted against random weights.
      const MatrixXd W = MatrixXd::Random(n, X2.rows());
      const MatrixXd gx = grad_inputs_contracted(k, X, X2, W);
      for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < d; ++j) {
          MatrixXd Xp = X, Xm = X;
          Xp(i, j) += h;
          Xm(i, j) -= h;
          const double fd = ((gram_serial(k, Xp, X2) - gram_serial(k, Xm, X2)).cwiseProduct(W)).sum() / (2 * h);
          worst = std::max(worst, std::abs(gx(i, j) - fd) / std::max(std::abs(fd), 1e-3));
        }
      // Marginal-likelihood gradient.
      GPModel m(k, X, random_vector(n, rng), log_uniform(rng, 0.05, 0.5), standard_normal(rng));
      const VectorXd p0 = m.params();
      const VectorXd g = grad_log_marginal_likelihood(m);
      const Objective f = [&m](const VectorXd& p, VectorXd*) {
        m.set_params(p);
        return log_marginal_likelihood(m);
      };
      const VectorXd fd = finite_difference_gradient(f, p0, h);
      m.set_params(p0);
      worst = std::max(worst, relative_gap(g, fd, 1e-3));
    }
  }
  report(2, "kernel, input and marginal-likelihood gradients vs central differences (20 settings)", worst <= 1e-4,
         "max relative gap " + sci(worst), seconds_since(t0));
}

void criterion3() {
  const auto t0 = Clock::now();
  Rng rng(303);
  const Index n = 100;
  const MatrixXd X = random_inputs(n, 2, rng, 10.0);
  const Kernel k = Kernel::squared_exponential_ard({1.2, 0.9}, 1.5);
  const VectorXd y = random_vector(n, rng);
  const double noise = 0.2, mean = 0.3;
  const GPModel exact(k, X, y, noise, mean);
  SvgpModel s(k, X, noise, mean);
  set_optimal_variational(s, X, y);
  const double gap = std::abs(elbo(s, X, y, n) - log_marginal_likelihood(exact));
  const MatrixXd Xq = random_inputs(50, 2, rng, 12.0);
  const PosteriorPrediction a = predict(exact, Xq), b = predict_svgp(s, Xq);
  const double pred = std::max(max_abs(a.mean, b.mean), max_abs(a.latent_var, b.latent_var));
  report(3, "SVGP with Z=X and optimal q(u) collapses to the exact GP (n=100)", gap <= 1e-6 && pred <= 1e-6,
         "|ELBO-LML| " + sci(gap) + ", max prediction diff " + sci(pred), seconds_since(t0));
}

void criterion4() {
  const auto t0 = Clock::now();
  Rng rng(404);
  double worst = -1e300;
  for (int inst = 0; inst < 20; ++inst) {
    const auto n = static_cast<Index>(20 + uniform_index(rng, 181));
    const auto d = static_cast<Index>(1 + uniform_index(rng, 3));
    const auto M = static_cast<Index>(1 + uniform_index(rng, static_cast<std::uint64_t>(std::min<Index>(n, 40))));
    const Kernel k = random_kernel(d, rng);
    const MatrixXd X = random_inputs(n, d, rng, 5.0);
    const VectorXd y = random_vector(n, rng);
    const double noise = log_uniform(rng, 0.05, 1.0), mean = 0.5 * standard_normal(rng);
    SvgpModel s(k, random_inputs(M, d, rng, 5.0), noise, mean);
    if (inst % 2 == 0) {
      set_optimal_variational(s, X, y);
    } else {
      s.q.m = random_vector(M, rng);
      s.q.chol_cov = MatrixXd::Identity(M, M) * 0.5;
      for (Index i = 0; i < M; ++i)
        for (Index j = 0; j < i; ++j) s.q.chol_cov(i, j) = 0.2 * standard_normal(rng);
    }
    worst = std::max(worst, elbo(s, X, y, n) - log_marginal_likelihood(GPModel(k, X, y, noise, mean)));
  }
  report(4, "full-batch ELBO <= exact LML (20 instances, n<=200)", worst <= 1e-8,
         "max ELBO-LML " + sci(worst), seconds_since(t0));
}

void criterion5() {
  const auto t0 = Clock::now();
  Rng rng(505);
  double single = 0.0, grid = 0.0;
  for (auto fam : {TemporalFamily::Matern12, TemporalFamily::Matern32})
    for (Index T : {20, 100, 200}) {
      const SpatioTemporalGrid g = random_grid(1, T, rng);
      const StateSpaceKernel temporal(fam, log_uniform(rng, 0.5, 2), log_uniform(rng, 0.5, 3));
      const double noise = log_uniform(rng, 0.05, 0.5), mean = standard_normal(rng);
      const DenseSeparable o = dense_from(g, temporal, noise, mean);
      single = std::max(single, std::abs(negative_log_likelihood_ss(g, temporal, noise, mean) - o.nll()));
      MatrixXd q(T + 1, 3);
      for (Index i = 0; i < T; ++i) q.row(i) << g.site_coords.row(0), g.times[i];
      q.row(T) << g.site_coords.row(0), g.times[T / 2] + 0.1;
      const PosteriorPrediction p = kalman_fit_predict(g, temporal, noise, mean, q);
      VectorXd mu, var;
      o.predict(q, mu, var);
      single = std::max({single, max_abs(p.mean, mu), max_abs(p.latent_var, var)});
    }
  for (Index S : {2, 3, 4})
    for (auto fam : {TemporalFamily::Matern12, TemporalFamily::Matern32}) {
      const SpatioTemporalGrid g = random_grid(S, 100, rng);
      const StateSpaceKernel temporal(fam, log_uniform(rng, 0.5, 2), log_uniform(rng, 0.5, 3));
      const double noise = log_uniform(rng, 0.05, 0.5), mean = standard_normal(rng);
      const DenseSeparable o = dense_from(g, temporal, noise, mean);
      grid = std::max(grid, std::abs(negative_log_likelihood_ss(g, temporal, noise, mean) - o.nll()));
      MatrixXd q(2 * S + 1, 3);
      Index r = 0;
      for (Index s = 0; s < S; ++s)
        for (Index t : {Index{10}, Index{99}}) q.row(r++) << g.site_coords.row(s), g.times[t];
      q.row(r) << 1.0, 1.0, g.times[40] + 0.1;
      const PosteriorPrediction p = kalman_fit_predict(g, temporal, noise, mean, q);
      VectorXd mu, var;
      o.predict(q, mu, var);
      grid = std::max({grid, max_abs(p.mean, mu), max_abs(p.latent_var, var)});
    }
  // Fit + smooth wall-clock at fixed S when T doubles.
  const StateSpaceKernel temporal(TemporalFamily::Matern32, 1.0, 3.0);
  auto time_of = [&](Index T) {
    const SpatioTemporalGrid g = random_grid(4, T, rng);
    MatrixXd q(T, 3);
    for (Index i = 0; i < T; ++i) q.row(i) << g.site_coords.row(i % 4), g.times[i];
    double best = 1e300;
    for (int rep = 0; rep < 5; ++rep) {
      const auto s0 = Clock::now();
      const PosteriorPrediction p = kalman_fit_predict(g, temporal, 0.1, 0.0, q);
      volatile double sink = p.mean[0];
      (void)sink;
      best = std::min(best, seconds_since(s0));
    }
    return best;
  };
  const double ratio = time_of(4000) / time_of(2000);
  const bool pass = single <= 1e-6 && grid <= 1e-5 && ratio >= 1.0 && ratio <= 3.0;
  std::ostringstream detail;
  detail << "single-site " << sci(single) << ", grid " << sci(grid) << ", time(2T)/time(T) " << std::setprecision(3)
         << ratio;
  report(5, "Kalman/RTS equals dense Matern GP; linear in T", pass, detail.str(), seconds_since(t0));
}

void criterion6() {
  const auto t0 = Clock::now();
  std::vector<SensorReading> rs;
  for (double v : {1.0, 2.0, 3.0, 4.0, 100.0}) {
    SensorReading r;
    r.site_id = "a";
    r.hour = 454368 + static_cast<std::int64_t>(rs.size());
    r.pm25 = v;
    r.id = rs.size();
    rs.push_back(r);
  }
  const OutlierResult once = remove_outliers(rs);
  std::vector<double> kept;
  for (const auto& r : once.readings) kept.push_back(r.pm25);
  const GroupFences& g = once.report.groups.at(0);
  const auto again = apply_fences(once.readings, once.report);
  const bool pass = kept == std::vector<double>{1, 2, 3, 4} && g.q1 == 2.0 && g.q3 == 4.0 && g.lower == -1.0 &&
                    g.upper == 7.0 && again.size() == once.readings.size();
  std::ostringstream detail;
  detail << "fences [" << g.lower << ", " << g.upper << "], removed " << once.report.removed
         << ", second pass removed " << once.readings.size() - again.size();
  report(6, "Tukey filter on [1,2,3,4,100]", pass, detail.str(), seconds_since(t0));
}

void criterion7() {
  const auto t0 = Clock::now();
  SynthConfig sc;  // 66 sites x 30 days
  sc.weekly_amplitude = 8.0;  // daily 15 and weekly 8 against noise std 4
  sc.spike_rate = 0.005;
  sc.spike_mean = 300.0;
  const SynthOutput data = synth_generate(sc);
  std::vector<double> avg;
  std::ostringstream detail;
  const std::vector<ExperimentConfig> matrix = default_matrix();
  for (std::size_t i = 0; i < 3; ++i) {
    ExperimentConfig c = matrix[i];  // base, periodic, periodic + outliers; seeds 1..4
    c.optimizer.max_iterations = 150;
    const ExperimentReport r = forecast_holdout(data.readings, c);
    avg.push_back(r.avg_rmse);
    detail << (avg.size() > 1 ? " > " : "") << c.name << ' ' << std::setprecision(4) << r.avg_rmse;
  }
  report(7, "synthetic forecast ordering base > periodic > periodic+outliers (mean of 4 seeds)",
         avg[0] > avg[1] && avg[1] > avg[2], detail.str(), seconds_since(t0));
}

std::optional<fs::path> airqo_dir() {
  if (const char* env = std::getenv("STGP_AIRQO_DIR")) return fs::path(env);
  const fs::path local = fs::path(STGP_SOURCE_DIR) / "data" / "airqo";
  if (fs::exists(local / "sensors.csv")) return local;
  return std::nullopt;
}

void criterion8() {
  const auto t0 = Clock::now();
  const auto dir = airqo_dir();
  if (!dir) {
    report(8, "six-row matrix on the real network (conditional)", true,
           "not applicable: no dataset at data/airqo or $STGP_AIRQO_DIR", seconds_since(t0));
    return;
  }
  RunConfig rc;
  rc.sensors = *dir / "sensors.csv";
  rc.weather = *dir / "weather.csv";
  const PreparedData d = prepare_data(rc);
  const auto reports = run_matrix(d.readings, default_matrix());
  auto find = [&](Protocol p, const std::string& name) -> const ExperimentReport& {
    for (const auto& r : reports)
      if (r.protocol == p && r.config.name == name) return r;
    throw ProtocolError("missing row " + name);
  };
  const auto& fb = find(Protocol::Forecast, "base");
  const auto& fp = find(Protocol::Forecast, "periodic");
  const auto& fo = find(Protocol::Forecast, "outliers");
  const bool periodic_helps = fp.avg_rmse < fb.avg_rmse;
  const bool outliers_cut_max = fo.max_rmse < fp.max_rmse;
  bool sparse_helps = true;
  for (Protocol p : {Protocol::Nowcast, Protocol::Forecast})
    sparse_helps = sparse_helps && find(p, "svgp").avg_rmse < find(p, "inputs").avg_rmse;
  std::ostringstream detail;
  detail << "periodicity helps forecasting " << periodic_helps << ", outlier removal lowers forecast max "
         << outliers_cut_max << ", sparse beats subsampling " << sparse_helps;
  report(8, "six-row matrix on the real network: directional claims", periodic_helps && outliers_cut_max && sparse_helps,
         detail.str(), seconds_since(t0));
}

void criterion9() {
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.sites = 6;
  sc.days = 5;
  sc.seed = 9;
  const SynthOutput s = synth_generate(sc);
  const std::vector<SensorReading> rs = join_weather(s.readings, s.weather).readings;
  std::vector<ExperimentConfig> matrix = default_matrix();
  for (auto& c : matrix) {
    c.subsample = 300;
    c.inducing = 30;
    c.max_parallel = 4;  // folds run concurrently
    c.optimizer.max_iterations = c.backend == Backend::StateSpace ? 15 : 40;
    c.optimizer.stochastic_steps = 200;
    c.optimizer.eval_every = 50;
  }
  auto run_once = [&] {
    const auto reports = run_matrix(rs, matrix);
    std::ostringstream a, b, t;
    write_summary_csv(a, reports);
    write_sites_csv(b, reports);
    write_table(t, reports);
    return a.str() + '\x1e' + b.str() + '\x1e' + t.str();
  };
  const std::string first = run_once(), second = run_once();
  report(9, "fixed-seed benchmark gives byte-identical report CSVs across two runs", first == second,
         std::to_string(first.size()) + " bytes compared", seconds_since(t0));
}

}  // namespace

int main() {
  const std::vector<std::function<void()>> criteria = {criterion1, criterion2, criterion3, criterion4, criterion5,
                                                       criterion6, criterion7, criterion8, criterion9};
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    try {
      criteria[i]();
    } catch (const std::exception& e) {
      report(static_cast<int>(i + 1), "raised an exception", false, e.what(), 0.0);
    }
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criterion(s) failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
