#pragma once

#include "stgp/eval.hpp"

#include <filesystem>

namespace stgp {

/// Everything a CLI run needs, read from one JSON file. Relative paths are
/// resolved against the config file's directory.
struct RunConfig {
  std::optional<std::filesystem::path> sensors;
  std::optional<std::filesystem::path> weather;
  std::size_t min_site_readings = 100;
  std::filesystem::path output_dir = "results";
  std::vector<Protocol> protocols{Protocol::Nowcast, Protocol::Forecast};
  std::vector<ExperimentConfig> experiments = default_matrix();
  ExperimentConfig model;  // used by `fit`
  SynthConfig synth;
  int utc_offset_hours = 3;  // hour-of-day bucketing for `stats`
};

/// Throws InputError naming the first key of `obj` not in `allowed`.
void check_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed, const std::string& where);

/// Overlay the keys of `j` on `base`. Unknown keys are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j, ExperimentConfig base);
SynthConfig synth_from_json(const nlohmann::json& j, SynthConfig base = {});
nlohmann::json synth_to_json(const SynthConfig& c);

RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

/// Replace every experiment's seeds with seed, seed+1, ... (same count).
void override_seed(RunConfig& cfg, std::uint64_t seed);

struct PreparedData {
  std::vector<SensorReading> readings;
  LoadReport load;
  std::vector<std::string> dropped_sites;
  std::size_t dropped_without_weather = 0;
};

/// Load sensors, drop sparse sites, and join weather when configured.
PreparedData prepare_data(const RunConfig& cfg);

}  // namespace stgp
