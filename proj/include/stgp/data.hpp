#pragma once

#include "stgp/common.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace stgp {

/// Single-station hourly weather, broadcast to every site.
struct Covariates {
  double windspeed = 0.0;  // km/h
  double winddir = 0.0;    // degrees
  double windgust = 0.0;   // km/h
  double humidity = 0.0;   // %
  double temp = 0.0;       // deg C
  double precip = 0.0;     // mm
};

struct SensorReading {
  std::string site_id;
  double latitude = 0.0;
  double longitude = 0.0;
  std::int64_t hour = 0;  // whole hours since 1970-01-01T00:00Z
  double pm25 = 0.0;      // ug/m^3
  std::optional<Covariates> covariates;
  /// Stable identity assigned at load; used to prove train/test disjointness.
  std::size_t id = 0;
};

/// Parse an ISO-8601 timestamp ("2021-11-01T08:30:00Z", "2021-11-01 08:00",
/// optional fractional seconds and +HH:MM offset) and floor it to the hour.
/// Throws InputError on anything else.
std::int64_t parse_iso8601_hour(std::string_view text);
std::string format_iso8601_hour(std::int64_t hour);

/// Split one CSV record (RFC 4180 quoting), trimming blanks around fields.
std::vector<std::string> split_csv_line(const std::string& line);
/// Whole-field decimal parse; nullopt on empty or malformed text.
std::optional<double> parse_double(std::string_view s);

// --- loading ---------------------------------------------------------------

struct LoadReport {
  std::size_t rows_read = 0;
  std::size_t dropped_missing_value = 0;
  std::vector<std::size_t> dropped_lines;
  /// Rows folded into an earlier (site, hour) reading by averaging.
  std::size_t duplicates_merged = 0;
};

struct SensorLoad {
  std::vector<SensorReading> readings;
  LoadReport report;
};

/// Header must contain site_id, latitude, longitude, timestamp, pm2_5 (any
/// order; extra columns ignored). Rows with an empty or unparseable pm2_5
/// are dropped and counted; duplicate (site, hour) rows are averaged.
SensorLoad parse_sensor_csv(std::istream& in);
SensorLoad load_sensor_csv(const std::filesystem::path& path);

struct WeatherRow {
  std::int64_t hour = 0;
  Covariates values;
};

/// Header: timestamp,windspeed,winddir,windgust,humidity,temp,precip.
/// Rows with any empty value are skipped (the hour counts as missing).
std::vector<WeatherRow> parse_weather_csv(std::istream& in);
std::vector<WeatherRow> load_weather_csv(const std::filesystem::path& path);

void write_sensor_csv(std::ostream& out, const std::vector<SensorReading>& readings);
void write_weather_csv(std::ostream& out, const std::vector<WeatherRow>& rows);

// --- cleaning --------------------------------------------------------------

struct SiteFilter {
  std::vector<SensorReading> readings;
  std::vector<std::string> dropped_sites;
};

/// Remove every reading of sites with fewer than `min_count` readings.
SiteFilter drop_sparse_sites(std::vector<SensorReading> readings, std::size_t min_count = 100);

enum class FenceMode {
  Tukey,         // [Q1 - f*IQR, Q3 + f*IQR]
  MeanCentered,  // [mean - f*IQR, mean + f*IQR]
};
enum class OutlierScope { PerSite, Global };

struct OutlierOptions {
  double factor = 1.5;
  FenceMode mode = FenceMode::Tukey;
  OutlierScope scope = OutlierScope::PerSite;
};

struct GroupFences {
  std::string group;  // site id, or "*" for global scope
  std::size_t count = 0;
  double q1 = 0.0, q3 = 0.0, iqr = 0.0, mean = 0.0;
  double lower = 0.0, upper = 0.0;
  std::size_t removed = 0;
  bool skipped = false;  // fewer than 4 readings; nothing removed
};

struct OutlierReport {
  OutlierOptions options;
  std::vector<GroupFences> groups;
  std::size_t total = 0;
  std::size_t removed = 0;
  double removed_fraction = 0.0;
};

struct OutlierResult {
  std::vector<SensorReading> readings;
  OutlierReport report;
};

/// Quantile of sorted data by linear interpolation between order statistics
/// (position q * (n - 1)).
double quantile_sorted(const std::vector<double>& sorted, double q);

OutlierResult remove_outliers(std::vector<SensorReading> readings, const OutlierOptions& opts = {});

/// Re-apply fences computed by an earlier `remove_outliers` call.
std::vector<SensorReading> apply_fences(std::vector<SensorReading> readings,
                                        const OutlierReport& report);

struct WeatherJoin {
  std::vector<SensorReading> readings;
  std::size_t dropped = 0;
};

/// Attach the covariates of each reading's hour; readings whose hour has no
/// weather row are dropped.
WeatherJoin join_weather(std::vector<SensorReading> readings, const std::vector<WeatherRow>& weather);

// --- datasets --------------------------------------------------------------

/// Per-column z-scores for inputs and targets.
struct NormalizationStats {
  VectorXd column_mean;
  VectorXd column_scale;
  double target_mean = 0.0;
  double target_scale = 1.0;
  std::int64_t time_origin = 0;  // hour subtracted before scaling the time column

  MatrixXd normalize(const MatrixXd& raw) const;
  MatrixXd denormalize(const MatrixXd& x) const;
  VectorXd normalize_targets(const VectorXd& y) const;
  VectorXd denormalize_targets(const VectorXd& y) const;
};

/// Model inputs and targets plus per-row provenance.
///
/// Columns are latitude, longitude, time (hours since `time_origin`), then,
/// with covariates, windspeed, winddir_sin, winddir_cos, windgust, humidity,
/// temp, precip. All are z-scored.
struct Dataset {
  MatrixXd X;
  VectorXd y;
  NormalizationStats stats;
  std::vector<std::string> columns;

  std::vector<std::string> site_names;
  std::vector<int> site;  // index into site_names, per row
  std::vector<std::int64_t> hour;
  std::vector<std::size_t> ids;  // SensorReading::id per row

  Index size() const { return X.rows(); }
  bool has_covariates() const { return X.cols() > 3; }
  Dataset subset(const std::vector<Index>& rows) const;
};

struct DatasetOptions {
  bool include_covariates = false;
};

std::vector<std::string> dataset_columns(bool include_covariates);

/// Raw (unnormalized) input matrix; the time column is hours since `time_origin`.
MatrixXd raw_inputs(const std::vector<SensorReading>& readings, bool include_covariates,
                    std::int64_t time_origin);

Dataset build_dataset(const std::vector<SensorReading>& readings, const DatasetOptions& opts = {});

/// Encode readings with another dataset's schema and normalization, e.g. a
/// test fold against its training fold.
Dataset encode_like(const std::vector<SensorReading>& readings, const Dataset& reference);

// --- summaries -------------------------------------------------------------

struct BoxStats {
  std::string site;
  int hour_of_day = 0;
  std::size_t count = 0;
  double median = 0.0, q1 = 0.0, q3 = 0.0;
  double lower_fence = 0.0, upper_fence = 0.0;
  double whisker_low = 0.0, whisker_high = 0.0;
  std::vector<double> outliers;
};

struct HourlyMean {
  std::string site;  // "*" for the all-site row
  int hour_of_day = 0;
  std::size_t count = 0;
  double mean = 0.0;
};

struct SummaryTables {
  std::vector<BoxStats> boxes;         // per site, per hour of day
  std::vector<HourlyMean> hourly;      // per site, per hour of day
  std::vector<HourlyMean> all_sites;   // 24 rows
};

/// Box-plot statistics and hour-of-day means. `utc_offset_hours` shifts the
/// hour-of-day bucketing into local time.
SummaryTables summary_stats(const std::vector<SensorReading>& readings, int utc_offset_hours = 0);

void write_box_csv(std::ostream& out, const SummaryTables& t);
void write_hourly_csv(std::ostream& out, const SummaryTables& t);

// --- synthetic data --------------------------------------------------------

struct SynthConfig {
  int sites = 66;
  int days = 30;
  std::uint64_t seed = 1;
  double spike_rate = 0.01;  // expected spikes per site-hour
  double spike_mean = 60.0;  // mean spike height (exponential)
  double noise_std = 4.0;
  double base_level = 40.0;
  double spatial_std = 8.0;
  double spatial_lengthscale = 0.04;  // degrees
  double daily_amplitude = 15.0;
  double weekly_amplitude = 5.0;
  double regional_std = 4.0;          // shared slow temporal variation
  double regional_lengthscale = 12.0; // hours
  double missing_fraction = 0.0;
  double wind_effect = 0.5;           // ug/m^3 per km/h above mean wind
  std::int64_t start_hour = 0;        // defaults to 2021-11-01T00Z when 0
  int utc_offset_hours = 3;           // daily peaks are placed in local time
  double lat_min = 0.25, lat_max = 0.42;
  double lon_min = 32.50, lon_max = 32.68;
};

struct SynthOutput {
  std::vector<SensorReading> readings;
  std::vector<double> latent;  // noise- and spike-free value per reading
  std::vector<WeatherRow> weather;
};

/// Spatial SE field over random sites + daily (peaks at 08h and 21h local) and
/// weekly patterns + shared OU regional drift + wind effect, observed with
/// Gaussian noise and Poisson-timed positive spikes.
SynthOutput synth_generate(const SynthConfig& cfg);

}  // namespace stgp
