#include "stgp/data.hpp"

#include "stgp/kernels.hpp"
#include "stgp/linalg.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>
#include <unordered_map>

namespace stgp {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  for (auto& f : fields) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return fields;
}

std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

namespace {

struct CsvHeader {
  std::vector<std::string> names;
  std::map<std::string, std::size_t> index;
};

CsvHeader read_header(std::istream& in, const std::vector<std::string>& required) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty file");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
  CsvHeader h;
  h.names = split_csv_line(line);
  for (std::size_t i = 0; i < h.names.size(); ++i) h.index[h.names[i]] = i;
  std::string missing;
  for (const auto& r : required)
    if (!h.index.count(r)) missing += (missing.empty() ? "" : ", ") + r;
  if (!missing.empty()) throw FormatError("missing header column(s): " + missing, 1);
  return h;
}

int days_in_month(int y, unsigned m) {
  using namespace std::chrono;
  return static_cast<int>(static_cast<unsigned>(
      year_month_day_last{year{y} / month{m} / last}.day()));
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

std::int64_t parse_iso8601_hour(std::string_view text) {
  auto fail = [&]() -> std::int64_t {
    throw InputError("not an ISO-8601 timestamp: '" + std::string(text) + "'");
  };
  std::size_t pos = 0;
  auto digits = [&](std::size_t n) -> int {
    if (pos + n > text.size()) fail();
    int v = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const char c = text[pos + i];
      if (c < '0' || c > '9') fail();
      v = v * 10 + (c - '0');
    }
    pos += n;
    return v;
  };
  auto expect = [&](char c) {
    if (pos >= text.size() || text[pos] != c) fail();
    ++pos;
  };

  const int y = digits(4);
  expect('-');
  const int mo = digits(2);
  expect('-');
  const int d = digits(2);
  if (pos >= text.size() || (text[pos] != 'T' && text[pos] != ' ')) fail();
  ++pos;
  const int hh = digits(2);
  int mm = 0, ss = 0;
  if (pos < text.size() && text[pos] == ':') {
    ++pos;
    mm = digits(2);
    if (pos < text.size() && text[pos] == ':') {
      ++pos;
      ss = digits(2);
      if (pos < text.size() && text[pos] == '.') {
        ++pos;
        const std::size_t start = pos;
        while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') ++pos;
        if (pos == start) fail();
      }
    }
  }
  int offset_min = 0;
  if (pos < text.size()) {
    if (text[pos] == 'Z') {
      ++pos;
    } else if (text[pos] == '+' || text[pos] == '-') {
      const int sign = text[pos] == '-' ? -1 : 1;
      ++pos;
      const int oh = digits(2);
      int om = 0;
      if (pos < text.size() && text[pos] == ':') ++pos;
      if (pos < text.size()) om = digits(2);
      offset_min = sign * (oh * 60 + om);
    }
  }
  if (pos != text.size()) fail();
  if (mo < 1 || mo > 12 || d < 1 || d > days_in_month(y, static_cast<unsigned>(mo)) || hh > 23 ||
      mm > 59 || ss > 60)
    fail();

  using namespace std::chrono;
  const auto day = sys_days{year{y} / month{static_cast<unsigned>(mo)} / static_cast<unsigned>(d)};
  const std::int64_t minutes =
      static_cast<std::int64_t>(day.time_since_epoch().count()) * 1440 + hh * 60 + mm - offset_min;
  // floor division to whole hours
  return minutes >= 0 ? minutes / 60 : -((-minutes + 59) / 60);
}

std::string format_iso8601_hour(std::int64_t hour) {
  using namespace std::chrono;
  const std::int64_t day = hour >= 0 ? hour / 24 : -((-hour + 23) / 24);
  const int hh = static_cast<int>(hour - day * 24);
  const year_month_day ymd{sys_days{days{day}}};
  std::ostringstream os;
  os << std::setfill('0') << std::setw(4) << static_cast<int>(ymd.year()) << '-' << std::setw(2)
     << static_cast<unsigned>(ymd.month()) << '-' << std::setw(2) << static_cast<unsigned>(ymd.day())
     << 'T' << std::setw(2) << hh << ":00:00Z";
  return os.str();
}

// ---------------------------------------------------------------------------

SensorLoad parse_sensor_csv(std::istream& in) {
  const CsvHeader h = read_header(in, {"site_id", "latitude", "longitude", "timestamp", "pm2_5"});
  const std::size_t c_site = h.index.at("site_id"), c_lat = h.index.at("latitude"),
                    c_lon = h.index.at("longitude"), c_ts = h.index.at("timestamp"),
                    c_pm = h.index.at("pm2_5");

  SensorLoad out;
  std::map<std::pair<std::string, std::int64_t>, std::size_t> seen;
  std::vector<std::size_t> dup_counts;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    if (f.size() != h.names.size()) {
      throw FormatError("expected " + std::to_string(h.names.size()) + " fields, found " +
                            std::to_string(f.size()),
                        lineno);
    }
    ++out.report.rows_read;
    std::int64_t hour;
    try {
      hour = parse_iso8601_hour(f[c_ts]);
    } catch (const InputError& e) {
      throw FormatError(e.what(), lineno);
    }
    const auto lat = parse_double(f[c_lat]);
    const auto lon = parse_double(f[c_lon]);
    if (!lat || !lon) throw FormatError("unparseable latitude/longitude", lineno);
    const auto pm = parse_double(f[c_pm]);
    if (!pm || !std::isfinite(*pm) || *pm < 0.0) {
      ++out.report.dropped_missing_value;
      out.report.dropped_lines.push_back(lineno);
      continue;
    }
    const auto key = std::make_pair(f[c_site], hour);
    if (auto it = seen.find(key); it != seen.end()) {
      out.readings[it->second].pm25 += *pm;  // summed now, averaged below
      ++dup_counts[it->second];
      ++out.report.duplicates_merged;
      continue;
    }
    seen.emplace(key, out.readings.size());
    dup_counts.push_back(1);
    SensorReading r;
    r.site_id = f[c_site];
    r.latitude = *lat;
    r.longitude = *lon;
    r.hour = hour;
    r.pm25 = *pm;
    out.readings.push_back(std::move(r));
  }
  if (out.report.rows_read == 0) throw InputError("sensor file has no data rows");
  for (std::size_t i = 0; i < out.readings.size(); ++i) {
    out.readings[i].pm25 /= static_cast<double>(dup_counts[i]);
    out.readings[i].id = i;
  }
  return out;
}

SensorLoad load_sensor_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open sensor file: " + path.string());
  try {
    return parse_sensor_csv(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": ", e);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::vector<WeatherRow> parse_weather_csv(std::istream& in) {
  const std::vector<std::string> cols = {"timestamp", "windspeed", "winddir", "windgust",
                                         "humidity",  "temp",      "precip"};
  const CsvHeader h = read_header(in, cols);
  std::vector<WeatherRow> rows;
  std::map<std::int64_t, std::size_t> seen;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_csv_line(line);
    if (f.size() != h.names.size())
      throw FormatError("expected " + std::to_string(h.names.size()) + " fields", lineno);
    WeatherRow row;
    try {
      row.hour = parse_iso8601_hour(f[h.index.at("timestamp")]);
    } catch (const InputError& e) {
      throw FormatError(e.what(), lineno);
    }
    std::array<double, 6> v{};
    bool complete = true;
    for (std::size_t c = 1; c < cols.size(); ++c) {
      const auto val = parse_double(f[h.index.at(cols[c])]);
      if (!val || !std::isfinite(*val)) {
        complete = false;
        break;
      }
      v[c - 1] = *val;
    }
    if (!complete) continue;
    row.values = {v[0], v[1], v[2], v[3], v[4], v[5]};
    if (seen.count(row.hour)) throw FormatError("duplicate weather hour", lineno);
    seen.emplace(row.hour, rows.size());
    rows.push_back(row);
  }
  if (lineno == 1) throw InputError("weather file has no data rows");
  return rows;
}

std::vector<WeatherRow> load_weather_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open weather file: " + path.string());
  try {
    return parse_weather_csv(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": ", e);
  }
}

void write_sensor_csv(std::ostream& out, const std::vector<SensorReading>& readings) {
  out << "site_id,latitude,longitude,timestamp,pm2_5\n";
  for (const auto& r : readings) {
    out << r.site_id << ',' << fmt(r.latitude) << ',' << fmt(r.longitude) << ','
        << format_iso8601_hour(r.hour) << ',' << fmt(r.pm25) << '\n';
  }
}

void write_weather_csv(std::ostream& out, const std::vector<WeatherRow>& rows) {
  out << "timestamp,windspeed,winddir,windgust,humidity,temp,precip\n";
  for (const auto& w : rows) {
    const auto& c = w.values;
    out << format_iso8601_hour(w.hour) << ',' << fmt(c.windspeed) << ',' << fmt(c.winddir) << ','
        << fmt(c.windgust) << ',' << fmt(c.humidity) << ',' << fmt(c.temp) << ','
        << fmt(c.precip) << '\n';
  }
}

// ---------------------------------------------------------------------------

SiteFilter drop_sparse_sites(std::vector<SensorReading> readings, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : readings) ++counts[r.site_id];
  SiteFilter out;
  for (const auto& [site, n] : counts)
    if (n < min_count) out.dropped_sites.push_back(site);
  if (out.dropped_sites.empty()) {
    out.readings = std::move(readings);
    return out;
  }
  for (auto& r : readings)
    if (counts[r.site_id] >= min_count) out.readings.push_back(std::move(r));
  return out;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw InputError("quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

OutlierResult remove_outliers(std::vector<SensorReading> readings, const OutlierOptions& opts) {
  if (!(opts.factor >= 0.0)) throw InputError("outlier factor must be non-negative");
  std::map<std::string, std::vector<double>> groups;
  for (const auto& r : readings)
    groups[opts.scope == OutlierScope::PerSite ? r.site_id : "*"].push_back(r.pm25);

  OutlierReport report;
  report.options = opts;
  std::map<std::string, std::size_t> index;
  for (auto& [name, values] : groups) {
    GroupFences g;
    g.group = name;
    g.count = values.size();
    if (values.size() < 4) {
      g.skipped = true;
      g.lower = -std::numeric_limits<double>::infinity();
      g.upper = std::numeric_limits<double>::infinity();
    } else {
      std::sort(values.begin(), values.end());
      g.q1 = quantile_sorted(values, 0.25);
      g.q3 = quantile_sorted(values, 0.75);
      g.iqr = g.q3 - g.q1;
      double sum = 0.0;
      for (double v : values) sum += v;
      g.mean = sum / static_cast<double>(values.size());
      const double reach = std::isinf(opts.factor) ? std::numeric_limits<double>::infinity()
                                                   : opts.factor * g.iqr;
      const double lo_anchor = opts.mode == FenceMode::Tukey ? g.q1 : g.mean;
      const double hi_anchor = opts.mode == FenceMode::Tukey ? g.q3 : g.mean;
      g.lower = lo_anchor - reach;
      g.upper = hi_anchor + reach;
    }
    index[name] = report.groups.size();
    report.groups.push_back(g);
  }

  std::vector<SensorReading> kept;
  kept.reserve(readings.size());
  for (auto& r : readings) {
    auto& g = report.groups[index[opts.scope == OutlierScope::PerSite ? r.site_id : "*"]];
    if (r.pm25 < g.lower || r.pm25 > g.upper) {
      ++g.removed;
      ++report.removed;
    } else {
      kept.push_back(std::move(r));
    }
  }
  report.total = readings.size();
  report.removed_fraction =
      report.total ? static_cast<double>(report.removed) / static_cast<double>(report.total) : 0.0;
  return {std::move(kept), std::move(report)};
}

std::vector<SensorReading> apply_fences(std::vector<SensorReading> readings,
                                        const OutlierReport& report) {
  std::map<std::string, const GroupFences*> by_name;
  for (const auto& g : report.groups) by_name[g.group] = &g;
  std::vector<SensorReading> kept;
  for (auto& r : readings) {
    const auto it =
        by_name.find(report.options.scope == OutlierScope::PerSite ? r.site_id : std::string("*"));
    if (it == by_name.end() || (r.pm25 >= it->second->lower && r.pm25 <= it->second->upper))
      kept.push_back(std::move(r));
  }
  return kept;
}

WeatherJoin join_weather(std::vector<SensorReading> readings, const std::vector<WeatherRow>& weather) {
  std::unordered_map<std::int64_t, const Covariates*> by_hour;
  for (const auto& w : weather) by_hour[w.hour] = &w.values;
  WeatherJoin out;
  for (auto& r : readings) {
    const auto it = by_hour.find(r.hour);
    if (it == by_hour.end()) {
      ++out.dropped;
      continue;
    }
    r.covariates = *it->second;
    out.readings.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------

MatrixXd NormalizationStats::normalize(const MatrixXd& raw) const {
  MatrixXd x = raw;
  for (Index c = 0; c < x.cols(); ++c)
    x.col(c) = (x.col(c).array() - column_mean[c]) / column_scale[c];
  return x;
}

MatrixXd NormalizationStats::denormalize(const MatrixXd& x) const {
  MatrixXd raw = x;
  for (Index c = 0; c < raw.cols(); ++c)
    raw.col(c) = raw.col(c).array() * column_scale[c] + column_mean[c];
  return raw;
}

VectorXd NormalizationStats::normalize_targets(const VectorXd& y) const {
  return (y.array() - target_mean) / target_scale;
}

VectorXd NormalizationStats::denormalize_targets(const VectorXd& y) const {
  return y.array() * target_scale + target_mean;
}

Dataset Dataset::subset(const std::vector<Index>& rows) const {
  Dataset d;
  d.stats = stats;
  d.columns = columns;
  d.site_names = site_names;
  d.X.resize(static_cast<Index>(rows.size()), X.cols());
  d.y.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Index r = rows[i];
    if (r < 0 || r >= size()) throw InputError("subset row out of range");
    d.X.row(static_cast<Index>(i)) = X.row(r);
    d.y[static_cast<Index>(i)] = y[r];
    d.site.push_back(site[static_cast<std::size_t>(r)]);
    d.hour.push_back(hour[static_cast<std::size_t>(r)]);
    d.ids.push_back(ids[static_cast<std::size_t>(r)]);
  }
  return d;
}

std::vector<std::string> dataset_columns(bool include_covariates) {
  std::vector<std::string> cols = {"latitude", "longitude", "time"};
  if (include_covariates) {
    for (const char* c : {"windspeed", "winddir_sin", "winddir_cos", "windgust", "humidity", "temp",
                          "precip"})
      cols.emplace_back(c);
  }
  return cols;
}

MatrixXd raw_inputs(const std::vector<SensorReading>& readings, bool include_covariates,
                    std::int64_t time_origin) {
  const Index d = include_covariates ? 10 : 3;
  MatrixXd raw(static_cast<Index>(readings.size()), d);
  for (std::size_t i = 0; i < readings.size(); ++i) {
    const auto& r = readings[i];
    const auto row = static_cast<Index>(i);
    raw(row, 0) = r.latitude;
    raw(row, 1) = r.longitude;
    raw(row, 2) = static_cast<double>(r.hour - time_origin);
    if (include_covariates) {
      if (!r.covariates) throw InputError("reading for site " + r.site_id + " has no covariates");
      const auto& c = *r.covariates;
      const double rad = c.winddir * std::numbers::pi / 180.0;
      raw(row, 3) = c.windspeed;
      raw(row, 4) = std::sin(rad);
      raw(row, 5) = std::cos(rad);
      raw(row, 6) = c.windgust;
      raw(row, 7) = c.humidity;
      raw(row, 8) = c.temp;
      raw(row, 9) = c.precip;
    }
  }
  return raw;
}

namespace {

void fill_provenance(Dataset& d, const std::vector<SensorReading>& readings) {
  std::map<std::string, int> index;
  for (const auto& r : readings) index.emplace(r.site_id, 0);
  int next = 0;
  for (auto& [name, idx] : index) {
    idx = next++;
    d.site_names.push_back(name);
  }
  d.site.reserve(readings.size());
  for (const auto& r : readings) {
    d.site.push_back(index[r.site_id]);
    d.hour.push_back(r.hour);
    d.ids.push_back(r.id);
  }
}

}  // namespace

Dataset build_dataset(const std::vector<SensorReading>& readings, const DatasetOptions& opts) {
  if (readings.empty()) throw InputError("build_dataset: no readings");
  Dataset d;
  d.columns = dataset_columns(opts.include_covariates);
  std::int64_t origin = readings.front().hour;
  for (const auto& r : readings) origin = std::min(origin, r.hour);
  const MatrixXd raw = raw_inputs(readings, opts.include_covariates, origin);

  auto& s = d.stats;
  s.time_origin = origin;
  s.column_mean = raw.colwise().mean().transpose();
  s.column_scale.resize(raw.cols());
  for (Index c = 0; c < raw.cols(); ++c) {
    const double var = (raw.col(c).array() - s.column_mean[c]).square().mean();
    s.column_scale[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  VectorXd y(static_cast<Index>(readings.size()));
  for (std::size_t i = 0; i < readings.size(); ++i) y[static_cast<Index>(i)] = readings[i].pm25;
  s.target_mean = y.mean();
  const double yvar = (y.array() - s.target_mean).square().mean();
  s.target_scale = yvar > 1e-24 ? std::sqrt(yvar) : 1.0;

  d.X = s.normalize(raw);
  d.y = s.normalize_targets(y);
  fill_provenance(d, readings);
  return d;
}

Dataset encode_like(const std::vector<SensorReading>& readings, const Dataset& reference) {
  Dataset d;
  d.columns = reference.columns;
  d.stats = reference.stats;
  const MatrixXd raw =
      raw_inputs(readings, reference.has_covariates(), reference.stats.time_origin);
  d.X = d.stats.normalize(raw);
  VectorXd y(static_cast<Index>(readings.size()));
  for (std::size_t i = 0; i < readings.size(); ++i) y[static_cast<Index>(i)] = readings[i].pm25;
  d.y = d.stats.normalize_targets(y);
  fill_provenance(d, readings);
  return d;
}

// ---------------------------------------------------------------------------

SummaryTables summary_stats(const std::vector<SensorReading>& readings, int utc_offset_hours) {
  std::map<std::pair<std::string, int>, std::vector<double>> cells;
  std::array<std::vector<double>, 24> all;
  for (const auto& r : readings) {
    const std::int64_t local = r.hour + utc_offset_hours;
    const int hod = static_cast<int>(((local % 24) + 24) % 24);
    cells[{r.site_id, hod}].push_back(r.pm25);
    all[static_cast<std::size_t>(hod)].push_back(r.pm25);
  }
  SummaryTables t;
  for (auto& [key, values] : cells) {
    std::sort(values.begin(), values.end());
    BoxStats b;
    b.site = key.first;
    b.hour_of_day = key.second;
    b.count = values.size();
    b.median = quantile_sorted(values, 0.5);
    b.q1 = quantile_sorted(values, 0.25);
    b.q3 = quantile_sorted(values, 0.75);
    const double iqr = b.q3 - b.q1;
    b.lower_fence = b.q1 - 1.5 * iqr;
    b.upper_fence = b.q3 + 1.5 * iqr;
    b.whisker_low = b.q3;
    b.whisker_high = b.q1;
    double sum = 0.0;
    for (double v : values) {
      sum += v;
      if (v < b.lower_fence || v > b.upper_fence) {
        b.outliers.push_back(v);
      } else {
        b.whisker_low = std::min(b.whisker_low, v);
        b.whisker_high = std::max(b.whisker_high, v);
      }
    }
    t.boxes.push_back(b);
    t.hourly.push_back({key.first, key.second, values.size(), sum / static_cast<double>(values.size())});
  }
  for (int h = 0; h < 24; ++h) {
    const auto& v = all[static_cast<std::size_t>(h)];
    double sum = 0.0;
    for (double x : v) sum += x;
    t.all_sites.push_back({"*", h, v.size(),
                           v.empty() ? std::numeric_limits<double>::quiet_NaN()
                                     : sum / static_cast<double>(v.size())});
  }
  return t;
}

void write_box_csv(std::ostream& out, const SummaryTables& t) {
  out << "site_id,hour_of_day,count,median,q1,q3,lower_fence,upper_fence,whisker_low,whisker_high,"
         "n_outliers,outliers\n";
  for (const auto& b : t.boxes) {
    out << b.site << ',' << b.hour_of_day << ',' << b.count << ',' << fmt(b.median) << ','
        << fmt(b.q1) << ',' << fmt(b.q3) << ',' << fmt(b.lower_fence) << ',' << fmt(b.upper_fence)
        << ',' << fmt(b.whisker_low) << ',' << fmt(b.whisker_high) << ',' << b.outliers.size()
        << ',';
    for (std::size_t i = 0; i < b.outliers.size(); ++i) out << (i ? ";" : "") << fmt(b.outliers[i]);
    out << '\n';
  }
}

void write_hourly_csv(std::ostream& out, const SummaryTables& t) {
  out << "site_id,hour_of_day,count,mean_pm2_5\n";
  for (const auto& h : t.hourly)
    out << h.site << ',' << h.hour_of_day << ',' << h.count << ',' << fmt(h.mean) << '\n';
  for (const auto& h : t.all_sites)
    out << "ALL," << h.hour_of_day << ',' << h.count << ',' << fmt(h.mean) << '\n';
}

// ---------------------------------------------------------------------------

SynthOutput synth_generate(const SynthConfig& cfg) {
  if (cfg.sites < 1 || cfg.days < 1) throw InputError("synth: sites and days must be >= 1");
  if (cfg.spike_rate < 0.0 || cfg.missing_fraction < 0.0 || cfg.missing_fraction >= 1.0)
    throw InputError("synth: invalid spike rate or missing fraction");
  constexpr double kPi = std::numbers::pi;
  const std::int64_t start = cfg.start_hour != 0 ? cfg.start_hour : 454368;  // 2021-11-01T00Z
  const int hours = cfg.days * 24;
  const auto S = static_cast<std::size_t>(cfg.sites);

  // Independent streams so that, e.g., changing the spike rate leaves the
  // site layout and noise untouched.
  Rng layout(cfg.seed * 1000003ULL + 1), field(cfg.seed * 1000003ULL + 2),
      drift(cfg.seed * 1000003ULL + 3), weather_rng(cfg.seed * 1000003ULL + 4),
      noise(cfg.seed * 1000003ULL + 5), spikes(cfg.seed * 1000003ULL + 6),
      holes(cfg.seed * 1000003ULL + 7);

  MatrixXd coords(static_cast<Index>(S), 2);
  for (std::size_t s = 0; s < S; ++s) {
    coords(static_cast<Index>(s), 0) = cfg.lat_min + (cfg.lat_max - cfg.lat_min) * uniform_unit(layout);
    coords(static_cast<Index>(s), 1) = cfg.lon_min + (cfg.lon_max - cfg.lon_min) * uniform_unit(layout);
  }
  VectorXd offsets = VectorXd::Zero(static_cast<Index>(S));
  if (S > 1 && cfg.spatial_std > 0.0) {
    const Kernel se = Kernel::squared_exponential(cfg.spatial_std * cfg.spatial_std,
                                                  cfg.spatial_lengthscale);
    const Cholesky chol = robust_cholesky(gram(se, coords));
    VectorXd z(static_cast<Index>(S));
    for (Index i = 0; i < z.size(); ++i) z[i] = standard_normal(field);
    offsets = chol.lower * z;
  }

  // Shared OU drift and weather, one value per hour.
  std::vector<double> regional(static_cast<std::size_t>(hours));
  const double phi = std::exp(-1.0 / cfg.regional_lengthscale);
  double state = cfg.regional_std * standard_normal(drift);
  for (int t = 0; t < hours; ++t) {
    regional[static_cast<std::size_t>(t)] = state;
    state = phi * state + cfg.regional_std * std::sqrt(1.0 - phi * phi) * standard_normal(drift);
  }

  SynthOutput out;
  double wind = 10.0, dir = 180.0;
  const double wphi = std::exp(-1.0 / 6.0);
  auto local_hod = [&](std::int64_t hour) {
    return static_cast<double>((((hour + cfg.utc_offset_hours) % 24) + 24) % 24);
  };
  for (int t = 0; t < hours; ++t) {
    const double hod = local_hod(start + t);
    WeatherRow w;
    w.hour = start + t;
    wind = 10.0 + wphi * (wind - 10.0) + 4.0 * std::sqrt(1.0 - wphi * wphi) * standard_normal(weather_rng);
    dir = std::fmod(dir + 20.0 * standard_normal(weather_rng) + 360.0, 360.0);
    const double daily = std::sin(2.0 * kPi * (hod - 9.0) / 24.0);
    w.values.windspeed = std::max(0.0, wind);
    w.values.winddir = dir;
    w.values.windgust = w.values.windspeed * 1.4 + std::abs(standard_normal(weather_rng));
    w.values.temp = 22.0 + 5.0 * daily + 0.5 * standard_normal(weather_rng);
    w.values.humidity = std::clamp(75.0 - 15.0 * daily + 3.0 * standard_normal(weather_rng), 0.0, 100.0);
    w.values.precip = uniform_unit(weather_rng) < 0.05 ? -2.0 * std::log(1.0 - uniform_unit(weather_rng)) : 0.0;
    out.weather.push_back(w);
  }

  auto bump = [&](double h, double centre) {
    return std::exp(4.0 * (std::cos(2.0 * kPi * (h - centre) / 24.0) - 1.0));
  };
  const double spike_p = 1.0 - std::exp(-cfg.spike_rate);

  for (std::size_t s = 0; s < S; ++s) {
    std::ostringstream name;
    name << "site_" << std::setw(2) << std::setfill('0') << s;
    for (int t = 0; t < hours; ++t) {
      const std::int64_t hour = start + t;
      const double hod = local_hod(hour);
      const double latent =
          cfg.base_level + offsets[static_cast<Index>(s)] +
          cfg.daily_amplitude * (bump(hod, 8.0) + bump(hod, 21.0)) +
          cfg.weekly_amplitude * std::sin(2.0 * kPi * static_cast<double>(t) / 168.0) +
          regional[static_cast<std::size_t>(t)] -
          cfg.wind_effect * (out.weather[static_cast<std::size_t>(t)].values.windspeed - 10.0);
      const double eps = cfg.noise_std * standard_normal(noise);
      double spike = 0.0;
      if (cfg.spike_rate > 0.0 && uniform_unit(spikes) < spike_p)
        spike = -cfg.spike_mean * std::log(1.0 - uniform_unit(spikes));
      const bool missing = cfg.missing_fraction > 0.0 && uniform_unit(holes) < cfg.missing_fraction;
      if (missing) continue;
      SensorReading r;
      r.site_id = name.str();
      r.latitude = coords(static_cast<Index>(s), 0);
      r.longitude = coords(static_cast<Index>(s), 1);
      r.hour = hour;
      r.pm25 = std::max(0.0, latent + eps + spike);
      r.id = out.readings.size();
      out.readings.push_back(std::move(r));
      out.latent.push_back(latent);
    }
  }
  return out;
}

}  // namespace stgp
