// stgp: benchmark, fit, predict, stats and synth commands.

#include "stgp/config.hpp"
#include "stgp/model_io.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace stgp;

namespace {

struct Globals {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string protocol = "both";
  std::string backend;
};

RunConfig load(const Globals& g) {
  RunConfig rc = g.config.empty() ? parse_run_config(nlohmann::json::object(), fs::current_path())
                                  : load_run_config(g.config);
  if (!g.out_dir.empty()) rc.output_dir = g.out_dir;
  if (g.seed) override_seed(rc, *g.seed);
  if (g.protocol == "nowcast") rc.protocols = {Protocol::Nowcast};
  else if (g.protocol == "forecast") rc.protocols = {Protocol::Forecast};
  return rc;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  return out;
}

void log_data(const PreparedData& d) {
  std::cerr << "loaded " << d.load.rows_read << " rows; dropped " << d.load.dropped_missing_value
            << " without a pm2_5 value; merged " << d.load.duplicates_merged << " duplicates\n";
  if (!d.dropped_sites.empty()) {
    std::cerr << "dropped " << d.dropped_sites.size() << " sparse site(s):";
    for (const auto& s : d.dropped_sites) std::cerr << ' ' << s;
    std::cerr << '\n';
  }
  if (d.dropped_without_weather) std::cerr << "dropped " << d.dropped_without_weather << " rows with no weather\n";
}

int cmd_benchmark(const Globals& g) {
  RunConfig rc = load(g);
  if (!g.backend.empty()) {
    const Backend b = parse_backend(g.backend);
    std::erase_if(rc.experiments, [b](const ExperimentConfig& c) { return c.backend != b; });
    if (rc.experiments.empty()) throw InputError("no experiment uses backend '" + g.backend + "'");
  }
  for (const auto& e : rc.experiments)
    if (e.additional_inputs && !rc.weather)
      throw InputError("experiment '" + e.name + "' needs additional inputs but data.weather is not set");
  const PreparedData data = prepare_data(rc);
  log_data(data);

  std::vector<ExperimentReport> reports;
  for (Protocol p : rc.protocols)
    for (const auto& e : rc.experiments) {
      std::cerr << to_string(p) << ": " << e.name << " ..." << std::flush;
      reports.push_back(p == Protocol::Nowcast ? nowcast_loo(data.readings, e) : forecast_holdout(data.readings, e));
      std::cerr << " avg RMSE " << reports.back().avg_rmse << '\n';
    }

  fs::create_directories(rc.output_dir);
  {
    auto out = open_out(rc.output_dir / "summary.csv");
    write_summary_csv(out, reports);
  }
  {
    auto out = open_out(rc.output_dir / "sites.csv");
    write_sites_csv(out, reports);
  }
  {
    auto out = open_out(rc.output_dir / "table.txt");
    write_table(out, reports);
  }
  {
    nlohmann::json j;
    j["data"] = {{"readings", data.readings.size()},
                 {"rows_read", data.load.rows_read},
                 {"dropped_missing_value", data.load.dropped_missing_value},
                 {"duplicates_merged", data.load.duplicates_merged},
                 {"dropped_sites", data.dropped_sites},
                 {"dropped_without_weather", data.dropped_without_weather}};
    j["reports"] = nlohmann::json::array();
    for (const auto& r : reports) j["reports"].push_back(report_json(r));
    auto out = open_out(rc.output_dir / "report.json");
    out << j.dump(1) << '\n';
  }
  write_table(std::cout, reports);
  std::cerr << "wrote " << (rc.output_dir / "summary.csv").string() << ", sites.csv, table.txt, report.json\n";
  return 0;
}

int cmd_fit(const Globals& g, const std::string& model_path) {
  RunConfig rc = load(g);
  if (!g.backend.empty()) {
    const Backend b = parse_backend(g.backend);
    if (b != rc.model.backend) {
      ExperimentConfig c = default_config(b);
      c.name = rc.model.name;
      c.outliers_removed = rc.model.outliers_removed;
      if (b != Backend::StateSpace) {
        c.periodic = rc.model.periodic;
        c.additional_inputs = rc.model.additional_inputs;
      }
      rc.model = c;
    }
  }
  if (rc.model.additional_inputs && !rc.weather)
    throw InputError("model needs additional inputs but data.weather is not set");
  const PreparedData data = prepare_data(rc);
  log_data(data);
  const TrainedModel m = train_model(data.readings, rc.model, rc.model.seeds.front());
  save_model(m, model_path);
  std::cerr << "fitted " << to_string(rc.model.backend) << " model on " << data.readings.size()
            << " readings (objective " << m.fit.objective << ", " << m.fit.iterations << " iterations); wrote "
            << model_path << '\n';
  return 0;
}

int cmd_predict(const Globals& g, const std::string& model_path, const std::string& query_path,
                const std::string& output) {
  const TrainedModel m = load_model(model_path);
  std::ifstream in(query_path);
  if (!in) throw InputError("cannot open query file " + query_path);
  const QueryLoad q = parse_query_csv(in, m.needs_covariates());
  if (!m.needs_covariates() && !q.covariate_columns.empty())
    std::cerr << "warning: model takes no weather inputs; ignoring query columns";
  if (!m.needs_covariates())
    for (const auto& c : q.covariate_columns) std::cerr << ' ' << c;
  if (!m.needs_covariates() && !q.covariate_columns.empty()) std::cerr << '\n';
  const ServedPrediction p = predict_model(m, q.queries);
  fs::path out_path = output;
  if (out_path.is_relative() && !g.out_dir.empty()) out_path = fs::path(g.out_dir) / out_path;
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  auto out = open_out(out_path);
  write_predictions_csv(out, q.queries, p);
  std::cerr << "wrote " << q.queries.size() << " predictions to " << out_path.string() << '\n';
  return 0;
}

int cmd_stats(const Globals& g, const std::string& data_path) {
  RunConfig rc = load(g);
  if (!data_path.empty()) rc.sensors = data_path;
  if (!rc.sensors) throw InputError("stats needs --data or data.sensors in the config");
  const SensorLoad load = load_sensor_csv(*rc.sensors);
  const SummaryTables t = summary_stats(load.readings, rc.utc_offset_hours);
  fs::create_directories(rc.output_dir);
  {
    auto out = open_out(rc.output_dir / "box_stats.csv");
    write_box_csv(out, t);
  }
  {
    auto out = open_out(rc.output_dir / "hourly_means.csv");
    write_hourly_csv(out, t);
  }
  std::cerr << "wrote box_stats.csv and hourly_means.csv to " << rc.output_dir.string() << '\n';
  return 0;
}

int cmd_synth(const Globals& g) {
  const RunConfig rc = load(g);
  const SynthOutput s = synth_generate(rc.synth);
  fs::create_directories(rc.output_dir);
  {
    auto out = open_out(rc.output_dir / "sensors.csv");
    write_sensor_csv(out, s.readings);
  }
  {
    auto out = open_out(rc.output_dir / "weather.csv");
    write_weather_csv(out, s.weather);
  }
  {
    auto out = open_out(rc.output_dir / "latent.csv");
    out << "site_id,timestamp,latent\n" << std::setprecision(10);
    for (std::size_t i = 0; i < s.readings.size(); ++i)
      out << s.readings[i].site_id << ',' << format_iso8601_hour(s.readings[i].hour) << ',' << s.latent[i] << '\n';
  }
  {
    nlohmann::json meta = synth_to_json(rc.synth);
    meta["readings"] = s.readings.size();
    auto out = open_out(rc.output_dir / "synth_metadata.json");
    out << meta.dump(1) << '\n';
  }
  std::cerr << "wrote " << s.readings.size() << " readings to " << (rc.output_dir / "sensors.csv").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal Gaussian-process regression for sensor networks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--out-dir", g.out_dir, "Output directory (overrides output_dir)");
  app.add_option("--seed", g.seed, "Base seed for experiments and synthetic data");
  app.add_option("--protocol", g.protocol, "Evaluation protocol")
      ->check(CLI::IsMember({"nowcast", "forecast", "both"}));
  app.add_option("--backend", g.backend, "Inference backend")->check(CLI::IsMember({"exact", "svgp", "statespace"}));

  auto* bench = app.add_subcommand("benchmark", "Run the experiment matrix under both protocols");
  std::string model_path, query_path, output = "predictions.csv", data_path;
  auto* fitc = app.add_subcommand("fit", "Fit one model on all data and save it");
  fitc->add_option("--model", model_path, "Model file to write")->required();
  auto* pred = app.add_subcommand("predict", "Predict at query points with a saved model");
  pred->add_option("--model", model_path, "Model file from `fit`")->required()->check(CLI::ExistingFile);
  pred->add_option("--query", query_path, "CSV with latitude, longitude, timestamp")->required();
  pred->add_option("--output", output, "Predictions CSV (relative to --out-dir when given)");
  auto* stats = app.add_subcommand("stats", "Hour-of-day box-plot and mean tables");
  stats->add_option("--data", data_path, "Sensor CSV (overrides data.sensors)");
  auto* synth = app.add_subcommand("synth", "Generate a synthetic sensor network");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (bench->parsed()) return cmd_benchmark(g);
    if (fitc->parsed()) return cmd_fit(g, model_path);
    if (pred->parsed()) return cmd_predict(g, model_path, query_path, output);
    if (stats->parsed()) return cmd_stats(g, data_path);
    if (synth->parsed()) return cmd_synth(g);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
