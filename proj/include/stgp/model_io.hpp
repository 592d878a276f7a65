#pragma once

#include "stgp/eval.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>

namespace stgp {

/// A fitted model plus the schema and normalization it was trained with.
struct TrainedModel {
  ExperimentConfig config;
  NormalizationStats stats;
  std::vector<std::string> columns;
  std::shared_ptr<GPModel> exact;
  std::shared_ptr<SvgpModel> svgp;
  std::shared_ptr<StateSpaceModel> statespace;
  FitResult fit;

  bool needs_covariates() const { return columns.size() > 3; }
};

/// Clean (per config), encode and fit on all readings. The Mean backend is
/// not servable and is rejected.
TrainedModel train_model(const std::vector<SensorReading>& readings, const ExperimentConfig& cfg,
                         std::uint64_t seed);

struct ServedPrediction {
  VectorXd mean;          // ug/m^3
  VectorXd latent_std;    // ug/m^3
  VectorXd observed_std;  // ug/m^3
};

ServedPrediction predict_model(const TrainedModel& model, const std::vector<SensorReading>& queries);

nlohmann::json model_to_json(const TrainedModel& model);
TrainedModel model_from_json(const nlohmann::json& j);
void save_model(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel load_model(const std::filesystem::path& path);

struct QueryLoad {
  std::vector<SensorReading> queries;
  /// Weather columns present in the header.
  std::vector<std::string> covariate_columns;
};

/// Query CSV: latitude, longitude, timestamp, optionally the six weather
/// columns (windspeed, winddir, windgust, humidity, temp, precip) and any
/// other columns, which are ignored. When `require_covariates` is set, a
/// header lacking any weather column raises InputError naming the missing
/// columns.
QueryLoad parse_query_csv(std::istream& in, bool require_covariates);

void write_predictions_csv(std::ostream& out, const std::vector<SensorReading>& queries,
                           const ServedPrediction& p);

}  // namespace stgp
