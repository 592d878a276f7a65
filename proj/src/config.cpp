#include "stgp/config.hpp"

#include <algorithm>
#include <fstream>

namespace stgp {

using nlohmann::json;

void check_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw InputError(where + ": expected an object");
  for (const auto& [key, value] : obj.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw InputError("unknown key '" + key + "' in " + where);
}

namespace {

template <class T>
T get(const json& j, const std::string& key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InputError("bad value for '" + key + "' in " + where);
  }
}

OptimizerOptions optimizer_from_json(const json& j, OptimizerOptions o, const std::string& where) {
  check_keys(j, {"max_iterations", "learning_rate", "tolerance", "patience", "stochastic_learning_rate",
                 "batch_size", "stochastic_steps", "eval_every"},
             where);
  if (j.contains("max_iterations")) o.max_iterations = get<int>(j, "max_iterations", where);
  if (j.contains("learning_rate")) o.learning_rate = get<double>(j, "learning_rate", where);
  if (j.contains("tolerance")) o.tolerance = get<double>(j, "tolerance", where);
  if (j.contains("patience")) o.patience = get<int>(j, "patience", where);
  if (j.contains("stochastic_learning_rate"))
    o.stochastic_learning_rate = get<double>(j, "stochastic_learning_rate", where);
  if (j.contains("batch_size")) o.batch_size = get<int>(j, "batch_size", where);
  if (j.contains("stochastic_steps")) o.stochastic_steps = get<int>(j, "stochastic_steps", where);
  if (j.contains("eval_every")) o.eval_every = get<int>(j, "eval_every", where);
  if (o.max_iterations < 0 || o.batch_size < 1 || o.stochastic_steps < 0 || o.eval_every < 1 || o.patience < 1 ||
      !(o.learning_rate > 0.0) || !(o.stochastic_learning_rate > 0.0))
    throw InputError(where + ": optimizer settings out of range");
  return o;
}

OutlierOptions outlier_from_json(const json& j, OutlierOptions o, const std::string& where) {
  check_keys(j, {"factor", "mode", "scope"}, where);
  if (j.contains("factor")) o.factor = get<double>(j, "factor", where);
  if (j.contains("mode")) {
    const auto m = get<std::string>(j, "mode", where);
    if (m == "tukey") o.mode = FenceMode::Tukey;
    else if (m == "mean_centered") o.mode = FenceMode::MeanCentered;
    else throw InputError(where + ": mode must be tukey or mean_centered");
  }
  if (j.contains("scope")) {
    const auto s = get<std::string>(j, "scope", where);
    if (s == "per_site") o.scope = OutlierScope::PerSite;
    else if (s == "global") o.scope = OutlierScope::Global;
    else throw InputError(where + ": scope must be per_site or global");
  }
  return o;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

}  // namespace

ExperimentConfig experiment_from_json(const json& j, ExperimentConfig c) {
  const std::string where = "experiment" + (j.is_object() && j.contains("name") && j["name"].is_string()
                                                ? " '" + j["name"].get<std::string>() + "'"
                                                : std::string());
  check_keys(j, {"name", "backend", "periodic", "outliers_removed", "additional_inputs", "subsample", "seeds",
                 "inducing", "optimizer", "outlier", "temporal_family", "daily_period", "weekly_period", "kernel",
                 "forecast_end", "max_parallel"},
             where);
  if (j.contains("backend")) {
    const Backend b = parse_backend(get<std::string>(j, "backend", where));
    if (b != c.backend) {
      const ExperimentConfig d = default_config(b);
      c.backend = b;
      c.seeds = d.seeds;
      c.optimizer = d.optimizer;
    }
  }
  if (j.contains("name")) c.name = get<std::string>(j, "name", where);
  if (j.contains("periodic")) c.periodic = get<bool>(j, "periodic", where);
  if (j.contains("outliers_removed")) c.outliers_removed = get<bool>(j, "outliers_removed", where);
  if (j.contains("additional_inputs")) c.additional_inputs = get<bool>(j, "additional_inputs", where);
  if (j.contains("subsample")) c.subsample = get<Index>(j, "subsample", where);
  if (j.contains("seeds")) c.seeds = get<std::vector<std::uint64_t>>(j, "seeds", where);
  if (j.contains("inducing")) c.inducing = get<Index>(j, "inducing", where);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j["optimizer"], c.optimizer, where + " optimizer");
  if (j.contains("outlier")) c.outlier = outlier_from_json(j["outlier"], c.outlier, where + " outlier");
  if (j.contains("temporal_family")) {
    const auto f = get<std::string>(j, "temporal_family", where);
    if (f == "matern12") c.temporal_family = TemporalFamily::Matern12;
    else if (f == "matern32") c.temporal_family = TemporalFamily::Matern32;
    else throw InputError(where + ": temporal_family must be matern12 or matern32");
  }
  if (j.contains("daily_period")) c.daily_period = get<double>(j, "daily_period", where);
  if (j.contains("weekly_period")) c.weekly_period = get<double>(j, "weekly_period", where);
  if (j.contains("kernel")) {
    kernel_from_json(j["kernel"]);  // validate structure now
    c.kernel = j["kernel"];
  }
  if (j.contains("forecast_end")) c.forecast_end_hour = parse_iso8601_hour(get<std::string>(j, "forecast_end", where));
  if (j.contains("max_parallel")) c.max_parallel = get<int>(j, "max_parallel", where);
  c.validate();
  return c;
}

SynthConfig synth_from_json(const json& j, SynthConfig c) {
  const std::string where = "synth";
  check_keys(j, {"sites", "days", "seed", "spike_rate", "spike_mean", "noise_std", "base_level", "spatial_std",
                 "spatial_lengthscale", "daily_amplitude", "weekly_amplitude", "regional_std",
                 "regional_lengthscale", "missing_fraction", "wind_effect", "start", "lat_min", "lat_max",
                 "lon_min", "lon_max", "utc_offset_hours"},
             where);
  auto num = [&](const char* key, double& field) {
    if (j.contains(key)) field = get<double>(j, key, where);
  };
  if (j.contains("sites")) c.sites = get<int>(j, "sites", where);
  if (j.contains("days")) c.days = get<int>(j, "days", where);
  if (j.contains("seed")) c.seed = get<std::uint64_t>(j, "seed", where);
  num("spike_rate", c.spike_rate);
  num("spike_mean", c.spike_mean);
  num("noise_std", c.noise_std);
  num("base_level", c.base_level);
  num("spatial_std", c.spatial_std);
  num("spatial_lengthscale", c.spatial_lengthscale);
  num("daily_amplitude", c.daily_amplitude);
  num("weekly_amplitude", c.weekly_amplitude);
  num("regional_std", c.regional_std);
  num("regional_lengthscale", c.regional_lengthscale);
  num("missing_fraction", c.missing_fraction);
  num("wind_effect", c.wind_effect);
  num("lat_min", c.lat_min);
  num("lat_max", c.lat_max);
  num("lon_min", c.lon_min);
  num("lon_max", c.lon_max);
  if (j.contains("utc_offset_hours")) c.utc_offset_hours = get<int>(j, "utc_offset_hours", where);
  if (j.contains("start")) c.start_hour = parse_iso8601_hour(get<std::string>(j, "start", where));
  return c;
}

json synth_to_json(const SynthConfig& c) {
  return {{"sites", c.sites},
          {"days", c.days},
          {"seed", c.seed},
          {"spike_rate", c.spike_rate},
          {"spike_mean", c.spike_mean},
          {"noise_std", c.noise_std},
          {"base_level", c.base_level},
          {"spatial_std", c.spatial_std},
          {"spatial_lengthscale", c.spatial_lengthscale},
          {"daily_amplitude", c.daily_amplitude},
          {"weekly_amplitude", c.weekly_amplitude},
          {"regional_std", c.regional_std},
          {"regional_lengthscale", c.regional_lengthscale},
          {"missing_fraction", c.missing_fraction},
          {"wind_effect", c.wind_effect},
          {"start", format_iso8601_hour(c.start_hour ? c.start_hour : parse_iso8601_hour("2021-11-01T00"))},
          {"lat_min", c.lat_min},
          {"lat_max", c.lat_max},
          {"lon_min", c.lon_min},
          {"lon_max", c.lon_max},
          {"utc_offset_hours", c.utc_offset_hours}};
}

RunConfig parse_run_config(const json& j, const std::filesystem::path& base_dir) {
  check_keys(j, {"data", "output_dir", "protocols", "experiment_defaults", "experiments", "model", "synth", "stats"},
             "config");
  RunConfig rc;
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, {"sensors", "weather", "min_site_readings"}, "data");
    if (d.contains("sensors")) rc.sensors = resolve(base_dir, get<std::string>(d, "sensors", "data"));
    if (d.contains("weather")) rc.weather = resolve(base_dir, get<std::string>(d, "weather", "data"));
    if (d.contains("min_site_readings")) rc.min_site_readings = get<std::size_t>(d, "min_site_readings", "data");
  }
  if (j.contains("output_dir")) rc.output_dir = resolve(base_dir, get<std::string>(j, "output_dir", "config"));
  else rc.output_dir = (base_dir / rc.output_dir).lexically_normal();
  if (j.contains("protocols")) {
    rc.protocols.clear();
    for (const auto& p : get<std::vector<std::string>>(j, "protocols", "config")) rc.protocols.push_back(parse_protocol(p));
    if (rc.protocols.empty()) throw InputError("config: protocols must not be empty");
  }
  const json defaults = j.contains("experiment_defaults") ? j["experiment_defaults"] : json::object();
  if (defaults.contains("backend") || defaults.contains("name"))
    throw InputError("experiment_defaults: backend and name are set per experiment");
  auto with_defaults = [&](ExperimentConfig base) {
    return experiment_from_json(defaults, std::move(base));
  };
  if (j.contains("experiments") && !(j["experiments"].is_string() && j["experiments"] == "default")) {
    const json& e = j["experiments"];
    if (!e.is_array() || e.empty()) throw InputError("config: experiments must be \"default\" or a non-empty array");
    rc.experiments.clear();
    for (const auto& item : e) {
      const Backend b = item.contains("backend") && item["backend"].is_string()
                            ? parse_backend(item["backend"].get<std::string>())
                            : Backend::Exact;
      rc.experiments.push_back(experiment_from_json(item, with_defaults(default_config(b))));
    }
  } else {
    rc.experiments.clear();
    for (auto& row : default_matrix()) {
      ExperimentConfig c = with_defaults(row);
      // Backend-specific seed counts survive a defaults block that does not set seeds.
      if (!defaults.contains("seeds")) c.seeds = row.seeds;
      if (row.backend == Backend::StateSpace && !(defaults.contains("optimizer") &&
                                                  defaults["optimizer"].contains("max_iterations")))
        c.optimizer.max_iterations = row.optimizer.max_iterations;
      rc.experiments.push_back(std::move(c));
    }
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    const Backend b = m.is_object() && m.contains("backend") && m["backend"].is_string()
                          ? parse_backend(m["backend"].get<std::string>())
                          : Backend::Exact;
    rc.model = experiment_from_json(m, with_defaults(default_config(b)));
  } else {
    rc.model = with_defaults(default_config(Backend::Exact));
    rc.model.name = "model";
  }
  if (j.contains("synth")) rc.synth = synth_from_json(j["synth"]);
  if (j.contains("stats")) {
    check_keys(j["stats"], {"utc_offset_hours"}, "stats");
    if (j["stats"].contains("utc_offset_hours"))
      rc.utc_offset_hours = get<int>(j["stats"], "utc_offset_hours", "stats");
  }
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

void override_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.synth.seed = seed;
  auto shift = [seed](ExperimentConfig& c) {
    for (std::size_t i = 0; i < c.seeds.size(); ++i) c.seeds[i] = seed + i;
  };
  for (auto& e : cfg.experiments) shift(e);
  shift(cfg.model);
}

PreparedData prepare_data(const RunConfig& cfg) {
  if (!cfg.sensors) throw InputError("config: data.sensors is not set");
  PreparedData out;
  SensorLoad load = load_sensor_csv(*cfg.sensors);
  out.load = load.report;
  SiteFilter f = drop_sparse_sites(std::move(load.readings), cfg.min_site_readings);
  out.dropped_sites = std::move(f.dropped_sites);
  out.readings = std::move(f.readings);
  if (cfg.weather) {
    WeatherJoin w = join_weather(std::move(out.readings), load_weather_csv(*cfg.weather));
    out.readings = std::move(w.readings);
    out.dropped_without_weather = w.dropped;
  }
  if (out.readings.empty()) throw InputError("no readings left after dropping sparse sites");
  return out;
}

}  // namespace stgp
