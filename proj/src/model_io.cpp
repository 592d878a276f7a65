#include "stgp/model_io.hpp"

#include "stgp/config.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>

namespace stgp {

using nlohmann::json;

namespace {

json matrix_json(const MatrixXd& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

MatrixXd matrix_from(const json& j, Index cols) {
  MatrixXd m(static_cast<Index>(j.size()), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto r = j[i].get<std::vector<double>>();
    if (static_cast<Index>(r.size()) != cols) throw FormatError("model file: ragged matrix");
    for (Index c = 0; c < cols; ++c) m(static_cast<Index>(i), c) = r[static_cast<std::size_t>(c)];
  }
  return m;
}

std::vector<double> vec(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

VectorXd vec_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace

TrainedModel train_model(const std::vector<SensorReading>& readings, const ExperimentConfig& cfg,
                         std::uint64_t seed) {
  cfg.validate();
  if (cfg.backend == Backend::Mean) throw InputError("the mean baseline cannot be fitted as a model");
  std::vector<SensorReading> train = readings;
  if (cfg.outliers_removed) train = remove_outliers(std::move(train), cfg.outlier).readings;
  const Dataset tr = build_dataset(train, {cfg.additional_inputs});

  TrainedModel m;
  m.config = cfg;
  m.stats = tr.stats;
  m.columns = tr.columns;
  OptimizerOptions opts = cfg.optimizer;
  opts.seed = seed;
  switch (cfg.backend) {
    case Backend::Exact: {
      const Dataset sub = tr.size() > cfg.subsample ? subsample(tr, cfg.subsample, seed) : tr;
      m.exact = std::make_shared<GPModel>(experiment_kernel(cfg, tr), sub.X, sub.y, 0.1, 0.0);
      m.fit = fit(*m.exact, opts);
      break;
    }
    case Backend::SVGP: {
      const Index M = std::min(cfg.inducing, tr.size());
      m.svgp = std::make_shared<SvgpModel>(experiment_kernel(cfg, tr), init_inducing(tr.X, M, seed), 0.1, 0.0);
      m.fit = fit_svgp(*m.svgp, tr, opts);
      break;
    }
    case Backend::StateSpace: {
      const double ts = tr.stats.column_scale[2];
      m.statespace = std::make_shared<StateSpaceModel>(
          StateSpaceModel{make_grid(tr, Kernel::squared_exponential()),
                          StateSpaceKernel(cfg.temporal_family, 1.0, 12.0 / ts), std::log(0.1), 0.0});
      m.fit = fit_statespace(*m.statespace, opts);
      break;
    }
    case Backend::Mean: break;
  }
  return m;
}

ServedPrediction predict_model(const TrainedModel& model, const std::vector<SensorReading>& queries) {
  const MatrixXd Xq = model.stats.normalize(raw_inputs(queries, model.needs_covariates(), model.stats.time_origin));
  PosteriorPrediction p;
  if (model.exact) p = predict(*model.exact, Xq);
  else if (model.svgp) p = predict_svgp(*model.svgp, Xq);
  else if (model.statespace) p = predict_statespace(*model.statespace, Xq);
  else throw InputError("model has no fitted backend");
  const double s = model.stats.target_scale;
  return {model.stats.denormalize_targets(p.mean), p.latent_var.array().sqrt() * s,
          p.observed_var.array().sqrt() * s};
}

json model_to_json(const TrainedModel& m) {
  json j;
  j["format"] = "stgp-model";
  j["version"] = 1;
  j["config"] = config_json(m.config);
  j["columns"] = m.columns;
  j["normalization"] = {{"column_mean", vec(m.stats.column_mean)},
                        {"column_scale", vec(m.stats.column_scale)},
                        {"target_mean", m.stats.target_mean},
                        {"target_scale", m.stats.target_scale},
                        {"time_origin", format_iso8601_hour(m.stats.time_origin)}};
  j["fit"] = {{"objective", m.fit.objective}, {"iterations", m.fit.iterations}, {"converged", m.fit.converged}};
  if (m.exact) {
    const GPModel& g = *m.exact;
    j["kernel"] = kernel_to_json(g.kernel());
    j["log_noise"] = std::log(g.noise_variance());
    j["mean"] = g.mean();
    j["inputs"] = matrix_json(g.inputs());
    j["targets"] = vec(g.targets());
  } else if (m.svgp) {
    const SvgpModel& s = *m.svgp;
    j["kernel"] = kernel_to_json(s.kernel);
    j["log_noise"] = s.log_noise;
    j["mean"] = s.mean;
    j["inducing_inputs"] = matrix_json(s.q.Z);
    j["variational_mean"] = vec(s.q.m);
    j["variational_chol"] = matrix_json(s.q.chol_cov);
  } else if (m.statespace) {
    const StateSpaceModel& s = *m.statespace;
    j["kernel"] = kernel_to_json(s.grid.spatial);
    j["log_noise"] = s.log_noise;
    j["mean"] = s.mean;
    j["temporal"] = {{"family", s.temporal.family() == TemporalFamily::Matern12 ? "matern12" : "matern32"},
                     {"log_variance", s.temporal.log_variance()},
                     {"log_lengthscale", s.temporal.log_lengthscale()}};
    MatrixXd observed = s.grid.observed.cast<double>();
    j["grid"] = {{"site_ids", s.grid.site_ids},
                 {"site_coords", matrix_json(s.grid.site_coords)},
                 {"times", vec(s.grid.times)},
                 {"values", matrix_json(s.grid.values)},
                 {"observed", matrix_json(observed)}};
  }
  return j;
}

TrainedModel model_from_json(const json& j) {
  try {
    if (j.value("format", "") != "stgp-model") throw FormatError("not a model file");
    TrainedModel m;
    m.config = experiment_from_json(j.at("config"), default_config(parse_backend(j.at("config").at("backend"))));
    m.columns = j.at("columns").get<std::vector<std::string>>();
    const json& n = j.at("normalization");
    m.stats.column_mean = vec_from(n.at("column_mean"));
    m.stats.column_scale = vec_from(n.at("column_scale"));
    m.stats.target_mean = n.at("target_mean");
    m.stats.target_scale = n.at("target_scale");
    m.stats.time_origin = parse_iso8601_hour(n.at("time_origin").get<std::string>());
    m.fit.objective = j.at("fit").at("objective");
    m.fit.iterations = j.at("fit").at("iterations");
    m.fit.converged = j.at("fit").at("converged");
    const auto d = static_cast<Index>(m.columns.size());
    const Kernel kernel = kernel_from_json(j.at("kernel"));
    const double log_noise = j.at("log_noise");
    const double mean = j.at("mean");
    switch (m.config.backend) {
      case Backend::Exact:
        m.exact = std::make_shared<GPModel>(kernel, matrix_from(j.at("inputs"), d), vec_from(j.at("targets")),
                                            std::exp(log_noise), mean);
        break;
      case Backend::SVGP: {
        auto s = std::make_shared<SvgpModel>(kernel, matrix_from(j.at("inducing_inputs"), d), std::exp(log_noise), mean);
        s->q.m = vec_from(j.at("variational_mean"));
        s->q.chol_cov = matrix_from(j.at("variational_chol"), s->num_inducing());
        if (s->q.m.size() != s->num_inducing()) throw FormatError("model file: variational mean size");
        m.svgp = s;
        break;
      }
      case Backend::StateSpace: {
        const json& t = j.at("temporal");
        const TemporalFamily fam = t.at("family") == "matern12" ? TemporalFamily::Matern12 : TemporalFamily::Matern32;
        StateSpaceKernel temporal(fam);
        temporal.set_log_params(t.at("log_variance"), t.at("log_lengthscale"));
        const json& g = j.at("grid");
        SpatioTemporalGrid grid;
        grid.site_ids = g.at("site_ids").get<std::vector<std::string>>();
        const auto S = static_cast<Index>(grid.site_ids.size());
        grid.site_coords = matrix_from(g.at("site_coords"), 2);
        grid.times = vec_from(g.at("times"));
        grid.values = matrix_from(g.at("values"), S);
        grid.observed = matrix_from(g.at("observed"), S).array() != 0.0;
        grid.spatial = kernel;
        grid.validate();
        m.statespace = std::make_shared<StateSpaceModel>(StateSpaceModel{grid, temporal, log_noise, mean});
        break;
      }
      case Backend::Mean: throw FormatError("model file: mean backend is not servable");
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("model file: ") + e.what());
  }
}

void save_model(const TrainedModel& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write model file " + path.string());
  out << model_to_json(model).dump(1) << '\n';
}

TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open model file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("model file " + path.string() + ": " + e.what());
  }
  return model_from_json(j);
}

QueryLoad parse_query_csv(std::istream& in, bool require_covariates) {
  static const std::vector<std::string> weather{"windspeed", "winddir", "windgust", "humidity", "temp", "precip"};
  std::string line;
  if (!std::getline(in, line)) throw InputError("query file is empty");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const auto names = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < names.size(); ++i) col[names[i]] = i;
  std::string missing;
  for (const char* req : {"latitude", "longitude", "timestamp"})
    if (!col.count(req)) missing += (missing.empty() ? "" : ", ") + std::string(req);
  QueryLoad out;
  std::string missing_weather;
  for (const auto& w : weather) {
    if (col.count(w)) out.covariate_columns.push_back(w);
    else missing_weather += (missing_weather.empty() ? "" : ", ") + w;
  }
  if (require_covariates && !missing_weather.empty())
    missing += (missing.empty() ? "" : ", ") + missing_weather;
  if (!missing.empty()) throw InputError("query file is missing column(s): " + missing);
  const bool with_cov = require_covariates;

  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    if (f.size() != names.size())
      throw FormatError("query file: expected " + std::to_string(names.size()) + " fields, got " +
                            std::to_string(f.size()),
                        lineno);
    auto number = [&](const std::string& name) {
      const auto v = parse_double(f[col[name]]);
      if (!v) throw FormatError("query file: bad " + name + " value '" + f[col[name]] + "'", lineno);
      return *v;
    };
    SensorReading q;
    q.site_id = col.count("site_id") ? f[col["site_id"]] : std::string();
    q.latitude = number("latitude");
    q.longitude = number("longitude");
    try {
      q.hour = parse_iso8601_hour(f[col["timestamp"]]);
    } catch (const InputError& e) {
      throw FormatError(std::string("query file: ") + e.what(), lineno);
    }
    if (with_cov) {
      Covariates c;
      c.windspeed = number("windspeed");
      c.winddir = number("winddir");
      c.windgust = number("windgust");
      c.humidity = number("humidity");
      c.temp = number("temp");
      c.precip = number("precip");
      q.covariates = c;
    }
    q.id = out.queries.size();
    out.queries.push_back(std::move(q));
  }
  return out;
}

void write_predictions_csv(std::ostream& out, const std::vector<SensorReading>& queries,
                           const ServedPrediction& p) {
  out << "latitude,longitude,timestamp,mean,latent_std,observed_std\n";
  out << std::setprecision(10);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto k = static_cast<Index>(i);
    out << queries[i].latitude << ',' << queries[i].longitude << ',' << format_iso8601_hour(queries[i].hour) << ','
        << p.mean[k] << ',' << p.latent_std[k] << ',' << p.observed_std[k] << '\n';
  }
}

}  // namespace stgp
