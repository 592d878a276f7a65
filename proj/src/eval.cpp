#include "stgp/eval.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <exception>
#include <iomanip>
#include <ostream>
#include <set>
#include <span>

namespace stgp {

std::string to_string(Backend b) {
  switch (b) {
    case Backend::Exact: return "exact";
    case Backend::SVGP: return "svgp";
    case Backend::StateSpace: return "statespace";
    case Backend::Mean: return "mean";
  }
  return "?";
}

std::string to_string(Protocol p) { return p == Protocol::Nowcast ? "nowcast" : "forecast"; }

Backend parse_backend(const std::string& s) {
  if (s == "exact") return Backend::Exact;
  if (s == "svgp") return Backend::SVGP;
  if (s == "statespace") return Backend::StateSpace;
  if (s == "mean") return Backend::Mean;
  throw InputError("unknown backend '" + s + "' (expected exact, svgp, statespace or mean)");
}

Protocol parse_protocol(const std::string& s) {
  if (s == "nowcast") return Protocol::Nowcast;
  if (s == "forecast") return Protocol::Forecast;
  throw InputError("unknown protocol '" + s + "' (expected nowcast or forecast)");
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw InputError("config '" + name + "': at least one seed is required");
  if (backend == Backend::StateSpace && (periodic || additional_inputs))
    throw InputError("config '" + name + "': the statespace backend supports neither periodic kernels nor additional inputs");
  if (backend == Backend::StateSpace && kernel)
    throw InputError("config '" + name + "': the statespace backend does not take a kernel expression");
  if (backend == Backend::Exact && subsample < 1)
    throw InputError("config '" + name + "': subsample must be positive");
  if (backend == Backend::SVGP && inducing < 1)
    throw InputError("config '" + name + "': inducing must be positive");
  if (!(daily_period > 0.0) || !(weekly_period > 0.0))
    throw InputError("config '" + name + "': periods must be positive");
  if (!(outlier.factor >= 0.0)) throw InputError("config '" + name + "': outlier factor must be non-negative");
  if (max_parallel < 0) throw InputError("config '" + name + "': max_parallel must be non-negative");
}

ExperimentConfig default_config(Backend backend) {
  ExperimentConfig c;
  c.backend = backend;
  c.name = to_string(backend);
  if (backend != Backend::Exact) c.seeds = {1};
  if (backend == Backend::StateSpace) c.optimizer.max_iterations = 60;
  return c;
}

std::vector<ExperimentConfig> default_matrix() {
  std::vector<ExperimentConfig> rows;
  ExperimentConfig c = default_config(Backend::Exact);
  c.name = "base";
  rows.push_back(c);
  c.name = "periodic";
  c.periodic = true;
  rows.push_back(c);
  c.name = "outliers";
  c.outliers_removed = true;
  rows.push_back(c);
  c.name = "inputs";
  c.additional_inputs = true;
  rows.push_back(c);
  ExperimentConfig s = default_config(Backend::SVGP);
  s.name = "svgp";
  s.periodic = s.outliers_removed = s.additional_inputs = true;
  rows.push_back(s);
  ExperimentConfig t = default_config(Backend::StateSpace);
  t.name = "statespace";
  t.outliers_removed = true;
  rows.push_back(t);
  return rows;
}

std::vector<Fold> nowcast_folds(const std::vector<SensorReading>& readings) {
  std::set<std::string> sites;
  for (const auto& r : readings) sites.insert(r.site_id);
  if (sites.size() < 2)
    throw ProtocolError("nowcast: leave-one-site-out needs at least 2 sites, found " + std::to_string(sites.size()));
  std::vector<Fold> folds;
  for (const auto& s : sites) {
    Fold f;
    f.label = s;
    for (const auto& r : readings) (r.site_id == s ? f.test : f.train).push_back(r);
    folds.push_back(std::move(f));
  }
  return folds;
}

Fold forecast_fold(const std::vector<SensorReading>& readings, std::optional<std::int64_t> end_hour) {
  if (readings.empty()) throw ProtocolError("forecast: no readings");
  std::int64_t end = readings.front().hour;
  for (const auto& r : readings) end = std::max(end, r.hour);
  if (end_hour) end = *end_hour;
  const std::int64_t cut = end - 24;
  Fold f;
  f.label = "forecast";
  for (const auto& r : readings) {
    if (r.hour > cut && r.hour <= end) f.test.push_back(r);
    else if (r.hour <= cut) f.train.push_back(r);
  }
  if (f.test.empty())
    throw ProtocolError("forecast: no readings in the window ending " + format_iso8601_hour(end));
  if (f.train.empty())
    throw ProtocolError("forecast: no readings before the window ending " + format_iso8601_hour(end));
  return f;
}

double rmse(const VectorXd& predictions, const VectorXd& truths) {
  if (predictions.size() != truths.size() || predictions.size() == 0)
    throw InputError("rmse: need equal, non-zero lengths (got " + std::to_string(predictions.size()) + " and " +
                     std::to_string(truths.size()) + ")");
  return std::sqrt((predictions - truths).squaredNorm() / static_cast<double>(predictions.size()));
}

Kernel experiment_kernel(const ExperimentConfig& cfg, const Dataset& train) {
  const Index d = train.X.cols();
  const std::span<const double> scales(train.stats.column_scale.data(), static_cast<std::size_t>(d));
  if (cfg.kernel) return kernel_from_json(*cfg.kernel, scales);
  if (!cfg.periodic) return Kernel::squared_exponential_ard(std::vector<double>(static_cast<std::size_t>(d), 1.0));

  std::vector<Index> other;
  for (Index c = 0; c < d; ++c)
    if (c != 2) other.push_back(c);
  const double ts = train.stats.column_scale[2];
  Kernel spatial = Kernel::active_dims(other, Kernel::squared_exponential_ard(std::vector<double>(other.size(), 1.0)));
  Kernel temporal = Kernel::active_dims(
      {2}, Kernel::product({Kernel::periodic(cfg.daily_period / ts), Kernel::periodic(cfg.weekly_period / ts)}));
  return Kernel::sum({std::move(spatial), std::move(temporal)});
}

VectorXd fit_and_predict(const ExperimentConfig& cfg, const Dataset& train, const Dataset& test,
                         std::uint64_t seed) {
  OptimizerOptions opts = cfg.optimizer;
  opts.seed = seed;
  VectorXd mean;
  switch (cfg.backend) {
    case Backend::Mean:
      mean = VectorXd::Constant(test.size(), train.y.mean());
      break;
    case Backend::Exact: {
      const Dataset sub = train.size() > cfg.subsample ? subsample(train, cfg.subsample, seed) : train;
      GPModel model(experiment_kernel(cfg, train), sub.X, sub.y, 0.1, 0.0);
      fit(model, opts);
      mean = predict(model, test.X).mean;
      break;
    }
    case Backend::SVGP: {
      const Index M = std::min(cfg.inducing, train.size());
      SvgpModel model(experiment_kernel(cfg, train), init_inducing(train.X, M, seed), 0.1, 0.0);
      fit_svgp(model, train, opts);
      mean = predict_svgp(model, test.X).mean;
      break;
    }
    case Backend::StateSpace: {
      const double ts = train.stats.column_scale[2];
      StateSpaceModel model{make_grid(train, Kernel::squared_exponential()),
                            StateSpaceKernel(cfg.temporal_family, 1.0, 12.0 / ts), std::log(0.1), 0.0};
      fit_statespace(model, opts);
      mean = predict_statespace(model, test.X).mean;
      break;
    }
  }
  return train.stats.denormalize_targets(mean);
}

namespace {

struct FoldOutcome {
  std::vector<VectorXd> predictions;  // per repetition, original units
  double seconds = 0.0;
  std::size_t training_size = 0;
};

FoldOutcome run_fold(const Fold& fold, const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<SensorReading> train = fold.train;
  if (cfg.outliers_removed) train = remove_outliers(std::move(train), cfg.outlier).readings;
  if (train.empty()) throw ProtocolError("fold '" + fold.label + "': empty training set");
  const Dataset tr = build_dataset(train, {cfg.additional_inputs});
  const Dataset te = encode_like(fold.test, tr);
  FoldOutcome out;
  out.training_size = train.size();
  for (std::uint64_t seed : cfg.seeds) out.predictions.push_back(fit_and_predict(cfg, tr, te, seed));
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

ExperimentReport evaluate(const std::vector<Fold>& folds, const ExperimentConfig& cfg, Protocol protocol,
                          const std::vector<std::string>& all_sites) {
  const auto nf = static_cast<int>(folds.size());
  std::vector<FoldOutcome> outcomes(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());
  const int threads = cfg.max_parallel > 0 ? cfg.max_parallel : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (int f = 0; f < nf; ++f) {
    try {
      outcomes[static_cast<std::size_t>(f)] = run_fold(folds[static_cast<std::size_t>(f)], cfg);
    } catch (...) {
      errors[static_cast<std::size_t>(f)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  const std::size_t R = cfg.repetitions();
  struct Acc {
    std::size_t count = 0;
    std::vector<double> sse;
  };
  std::map<std::string, Acc> acc;
  std::vector<double> pooled_sse(R, 0.0);
  std::size_t pooled_n = 0;
  ExperimentReport rep;
  rep.config = cfg;
  rep.protocol = protocol;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto& test = folds[f].test;
    rep.fold_seconds.push_back(outcomes[f].seconds);
    rep.training_size = std::max(rep.training_size, outcomes[f].training_size);
    pooled_n += test.size();
    for (std::size_t i = 0; i < test.size(); ++i) {
      Acc& a = acc[test[i].site_id];
      if (a.sse.empty()) a.sse.assign(R, 0.0);
      ++a.count;
      for (std::size_t r = 0; r < R; ++r) {
        const double e = outcomes[f].predictions[r][static_cast<Index>(i)] - test[i].pm25;
        a.sse[r] += e * e;
        pooled_sse[r] += e * e;
      }
    }
  }
  rep.repetition_avg_rmse.assign(R, 0.0);
  for (auto& [site, a] : acc) {
    SiteResult s;
    s.site = site;
    s.test_count = a.count;
    for (std::size_t r = 0; r < R; ++r) {
      const double v = std::sqrt(a.sse[r] / static_cast<double>(a.count));
      s.per_repetition.push_back(v);
      rep.repetition_avg_rmse[r] += v;
    }
    double total = 0.0;
    for (double v : s.per_repetition) total += v;
    s.rmse = total / static_cast<double>(R);
    rep.sites.push_back(std::move(s));
  }
  const auto ns = static_cast<double>(rep.sites.size());
  for (double& v : rep.repetition_avg_rmse) v /= ns;
  rep.min_rmse = rep.sites.front().rmse;
  rep.max_rmse = rep.sites.front().rmse;
  double total = 0.0;
  for (const auto& s : rep.sites) {
    rep.min_rmse = std::min(rep.min_rmse, s.rmse);
    rep.max_rmse = std::max(rep.max_rmse, s.rmse);
    total += s.rmse;
  }
  rep.avg_rmse = total / ns;
  for (double v : pooled_sse) rep.pooled_rmse += std::sqrt(v / static_cast<double>(pooled_n));
  rep.pooled_rmse /= static_cast<double>(R);
  for (const auto& s : all_sites)
    if (!acc.count(s)) rep.omitted_sites.push_back(s);
  return rep;
}

std::vector<std::string> site_list(const std::vector<SensorReading>& readings) {
  std::set<std::string> s;
  for (const auto& r : readings) s.insert(r.site_id);
  return {s.begin(), s.end()};
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string yes_no(bool b) { return b ? "yes" : "no"; }

std::string sparse_label(Backend b) {
  switch (b) {
    case Backend::SVGP: return "SVGP";
    case Backend::StateSpace: return "state-space";
    case Backend::Mean: return "-";
    case Backend::Exact: break;
  }
  return "no";
}

}  // namespace

ExperimentReport nowcast_loo(const std::vector<SensorReading>& readings, const ExperimentConfig& cfg) {
  cfg.validate();
  return evaluate(nowcast_folds(readings), cfg, Protocol::Nowcast, site_list(readings));
}

ExperimentReport forecast_holdout(const std::vector<SensorReading>& readings, const ExperimentConfig& cfg) {
  cfg.validate();
  return evaluate({forecast_fold(readings, cfg.forecast_end_hour)}, cfg, Protocol::Forecast, site_list(readings));
}

std::vector<ExperimentReport> run_matrix(const std::vector<SensorReading>& readings,
                                         const std::vector<ExperimentConfig>& configs,
                                         const std::vector<Protocol>& protocols) {
  if (configs.empty()) throw InputError("run_matrix: no configs");
  if (protocols.empty()) throw InputError("run_matrix: no protocols");
  for (const auto& c : configs) c.validate();
  std::vector<ExperimentReport> out;
  for (Protocol p : protocols)
    for (const auto& c : configs)
      out.push_back(p == Protocol::Nowcast ? nowcast_loo(readings, c) : forecast_holdout(readings, c));
  return out;
}

void write_summary_csv(std::ostream& out, const std::vector<ExperimentReport>& reports) {
  out << "protocol,name,backend,periodic,outliers_removed,additional_inputs,sparse,repetitions,sites,"
         "min_rmse,avg_rmse,max_rmse,pooled_rmse,omitted_sites\n";
  for (const auto& r : reports) {
    const auto& c = r.config;
    std::string omitted;
    for (const auto& s : r.omitted_sites) omitted += (omitted.empty() ? "" : ";") + s;
    out << to_string(r.protocol) << ',' << c.name << ',' << to_string(c.backend) << ',' << yes_no(c.periodic)
        << ',' << yes_no(c.outliers_removed) << ',' << yes_no(c.additional_inputs) << ','
        << sparse_label(c.backend) << ',' << c.repetitions() << ',' << r.sites.size() << ','
        << num(r.min_rmse) << ',' << num(r.avg_rmse) << ',' << num(r.max_rmse) << ',' << num(r.pooled_rmse)
        << ',' << omitted << '\n';
  }
}

void write_sites_csv(std::ostream& out, const std::vector<ExperimentReport>& reports) {
  out << "protocol,name,site,test_count,rmse,per_repetition\n";
  for (const auto& r : reports)
    for (const auto& s : r.sites) {
      std::string reps;
      for (double v : s.per_repetition) reps += (reps.empty() ? "" : ";") + num(v);
      out << to_string(r.protocol) << ',' << r.config.name << ',' << s.site << ',' << s.test_count << ','
          << num(s.rmse) << ',' << reps << '\n';
    }
}

void write_table(std::ostream& out, const std::vector<ExperimentReport>& reports) {
  const std::vector<std::string> head{"Model", "Periodic", "Outliers Removed", "Additional Inputs",
                                      "Sparse", "Min RMSE", "Average RMSE", "Max RMSE"};
  bool first = true;
  for (Protocol p : {Protocol::Nowcast, Protocol::Forecast}) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : reports) {
      if (r.protocol != p) continue;
      const auto& c = r.config;
      rows.push_back({c.name, yes_no(c.periodic), yes_no(c.outliers_removed), yes_no(c.additional_inputs),
                      sparse_label(c.backend), num(r.min_rmse), num(r.avg_rmse), num(r.max_rmse)});
    }
    if (rows.empty()) continue;
    std::vector<std::size_t> width;
    for (const auto& h : head) width.push_back(h.size());
    for (const auto& row : rows)
      for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const bool numeric = i >= 5;
        out << (i ? "  " : "") << (numeric ? std::right : std::left) << std::setw(static_cast<int>(width[i]))
            << cells[i];
      }
      out << '\n';
    };
    if (!first) out << '\n';
    first = false;
    out << (p == Protocol::Nowcast ? "Nowcasting" : "Forecasting") << '\n';
    line(head);
    std::size_t total = head.size() * 2 - 2;
    for (auto w : width) total += w;
    out << std::string(total, '-') << '\n';
    for (const auto& row : rows) line(row);
  }
  out << std::left;
}

nlohmann::json config_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["backend"] = to_string(c.backend);
  j["periodic"] = c.periodic;
  j["outliers_removed"] = c.outliers_removed;
  j["additional_inputs"] = c.additional_inputs;
  j["subsample"] = c.subsample;
  j["seeds"] = c.seeds;
  j["inducing"] = c.inducing;
  j["optimizer"] = {{"max_iterations", c.optimizer.max_iterations},
                    {"learning_rate", c.optimizer.learning_rate},
                    {"tolerance", c.optimizer.tolerance},
                    {"patience", c.optimizer.patience},
                    {"stochastic_learning_rate", c.optimizer.stochastic_learning_rate},
                    {"batch_size", c.optimizer.batch_size},
                    {"stochastic_steps", c.optimizer.stochastic_steps},
                    {"eval_every", c.optimizer.eval_every}};
  j["outlier"] = {{"factor", c.outlier.factor},
                  {"mode", c.outlier.mode == FenceMode::Tukey ? "tukey" : "mean_centered"},
                  {"scope", c.outlier.scope == OutlierScope::PerSite ? "per_site" : "global"}};
  j["temporal_family"] = c.temporal_family == TemporalFamily::Matern12 ? "matern12" : "matern32";
  j["daily_period"] = c.daily_period;
  j["weekly_period"] = c.weekly_period;
  if (c.kernel) j["kernel"] = *c.kernel;
  if (c.forecast_end_hour) j["forecast_end"] = format_iso8601_hour(*c.forecast_end_hour);
  j["max_parallel"] = c.max_parallel;
  return j;
}

nlohmann::json report_json(const ExperimentReport& r) {
  nlohmann::json j;
  j["protocol"] = to_string(r.protocol);
  j["config"] = config_json(r.config);
  j["min_rmse"] = r.min_rmse;
  j["avg_rmse"] = r.avg_rmse;
  j["max_rmse"] = r.max_rmse;
  j["pooled_rmse"] = r.pooled_rmse;
  j["repetition_avg_rmse"] = r.repetition_avg_rmse;
  j["training_size"] = r.training_size;
  j["omitted_sites"] = r.omitted_sites;
  j["fold_seconds"] = r.fold_seconds;
  auto& sites = j["sites"] = nlohmann::json::array();
  for (const auto& s : r.sites)
    sites.push_back({{"site", s.site}, {"test_count", s.test_count}, {"rmse", s.rmse}, {"per_repetition", s.per_repetition}});
  return j;
}

}  // namespace stgp
