#pragma once

#include "stgp/data.hpp"
#include "stgp/exact_gp.hpp"
#include "stgp/statespace.hpp"
#include "stgp/svgp.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <map>
#include <optional>

namespace stgp {

enum class Backend { Exact, SVGP, StateSpace, Mean };
enum class Protocol { Nowcast, Forecast };

std::string to_string(Backend b);
std::string to_string(Protocol p);
Backend parse_backend(const std::string& s);
Protocol parse_protocol(const std::string& s);

/// One row of the experiment matrix.
///
/// `Mean` predicts the training mean; it has no hyperparameters and exists as
/// a reference baseline.
struct ExperimentConfig {
  std::string name = "base";
  Backend backend = Backend::Exact;
  bool periodic = false;
  bool outliers_removed = false;
  bool additional_inputs = false;

  Index subsample = 1000;  // Exact only; training sets at most this large are used whole
  std::vector<std::uint64_t> seeds{1, 2, 3, 4};
  Index inducing = 100;    // SVGP
  OptimizerOptions optimizer;
  OutlierOptions outlier;
  TemporalFamily temporal_family = TemporalFamily::Matern32;
  double daily_period = 24.0;    // hours
  double weekly_period = 168.0;  // hours
  /// Replaces the default kernel. Lengthscales are in normalized input units,
  /// periods in raw units of their column.
  std::optional<nlohmann::json> kernel;
  /// Forecast window is (end - 24, end] in hours since epoch; defaults to the
  /// last reading's hour.
  std::optional<std::int64_t> forecast_end_hour;
  int max_parallel = 0;  // fold concurrency; 0 = OpenMP default

  std::size_t repetitions() const { return seeds.size(); }
  /// Throws InputError on an invalid combination.
  void validate() const;
};

/// Defaults per backend: four seeds for Exact, one for the full-data backends.
ExperimentConfig default_config(Backend backend);

/// The six comparison rows: base, +periodic, +outliers, +inputs, SVGP, state space.
std::vector<ExperimentConfig> default_matrix();

struct SiteResult {
  std::string site;
  std::size_t test_count = 0;
  double rmse = 0.0;                   // mean over repetitions
  std::vector<double> per_repetition;  // one per seed
};

struct ExperimentReport {
  ExperimentConfig config;
  Protocol protocol = Protocol::Nowcast;
  std::vector<SiteResult> sites;  // sorted by site id
  double min_rmse = 0.0;
  double avg_rmse = 0.0;   // unweighted mean of per-site RMSE
  double max_rmse = 0.0;
  double pooled_rmse = 0.0;  // over all test points, averaged over repetitions
  std::vector<double> repetition_avg_rmse;  // site-mean RMSE for each seed
  std::vector<double> fold_seconds;
  std::vector<std::string> omitted_sites;  // forecast: sites with no test readings
  std::size_t training_size = 0;  // largest cleaned training fold
};

struct Fold {
  std::string label;  // held-out site, or "forecast"
  std::vector<SensorReading> train;
  std::vector<SensorReading> test;
};

/// One fold per site: train on all other sites, test on the held-out site.
std::vector<Fold> nowcast_folds(const std::vector<SensorReading>& readings);

/// Single fold: test on the 24 hours ending at `end_hour` (default: the last
/// reading), train on everything earlier.
Fold forecast_fold(const std::vector<SensorReading>& readings, std::optional<std::int64_t> end_hour = {});

double rmse(const VectorXd& predictions, const VectorXd& truths);

/// The kernel the config implies for a training set with the given columns.
Kernel experiment_kernel(const ExperimentConfig& cfg, const Dataset& train);

/// Fit on `train` and return predicted means for `test` in original units.
VectorXd fit_and_predict(const ExperimentConfig& cfg, const Dataset& train, const Dataset& test,
                         std::uint64_t seed);

ExperimentReport nowcast_loo(const std::vector<SensorReading>& readings, const ExperimentConfig& cfg);
ExperimentReport forecast_holdout(const std::vector<SensorReading>& readings, const ExperimentConfig& cfg);

/// Every config under every requested protocol, protocol-major.
std::vector<ExperimentReport> run_matrix(const std::vector<SensorReading>& readings,
                                         const std::vector<ExperimentConfig>& configs,
                                         const std::vector<Protocol>& protocols = {Protocol::Nowcast,
                                                                                   Protocol::Forecast});

/// Summary rows (one per report) as CSV.
void write_summary_csv(std::ostream& out, const std::vector<ExperimentReport>& reports);
/// Per-site rows as CSV.
void write_sites_csv(std::ostream& out, const std::vector<ExperimentReport>& reports);
/// Aligned plain-text comparison table, one block per protocol.
void write_table(std::ostream& out, const std::vector<ExperimentReport>& reports);
nlohmann::json report_json(const ExperimentReport& report);
nlohmann::json config_json(const ExperimentConfig& cfg);

}  // namespace stgp
