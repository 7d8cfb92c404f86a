#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ggp/common.hpp"
#include "ggp/kernel.hpp"
#include "ggp/kron_linalg.hpp"
#include "ggp/vi.hpp"

namespace ggp {

// ---------------------------------------------------------------------------
// Timestamps
// ---------------------------------------------------------------------------

namespace detail {

// Days since 1970-01-01 for a proleptic Gregorian date (civil-days algorithm).
inline std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = static_cast<unsigned>((153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1);
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int* y, int* m, int* d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  *d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  *m = static_cast<int>(mp + (mp < 10 ? 3 : -9));
  *y = static_cast<int>(yy + (*m <= 2));
}

}  // namespace detail

// "YYYY-MM-DD HH:MM:SS" with 'T' or ' ' as the separator and an optional
// trailing 'Z'; interpreted as UTC, returned as epoch seconds.
inline std::int64_t parse_iso8601(const std::string& s) {
  int y, mo, d, h, mi, sec;
  char sep = 0, tail = 0;
  const int got =
      std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d%c", &y, &mo, &d, &sep, &h, &mi, &sec, &tail);
  if (got < 7 || (sep != 'T' && sep != ' ') || (got == 8 && tail != 'Z'))
    throw LoadError("bad timestamp '" + s + "'");
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 || sec < 0 ||
      sec > 60)
    throw LoadError("timestamp field out of range in '" + s + "'");
  return detail::days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 + sec;
}

inline std::string format_iso8601(std::int64_t epoch) {
  std::int64_t days = epoch / 86400;
  std::int64_t rem = epoch % 86400;
  if (rem < 0) {
    rem += 86400;
    --days;
  }
  int y, m, d;
  detail::civil_from_days(days, &y, &m, &d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d", y, m, d,
                static_cast<int>(rem / 3600), static_cast<int>((rem % 3600) / 60),
                static_cast<int>(rem % 60));
  return buf;
}

// Minute of day in [0, 1440), UTC.
inline int minute_of_day(std::int64_t epoch) {
  std::int64_t rem = epoch % 86400;
  if (rem < 0) rem += 86400;
  return static_cast<int>(rem / 60);
}

// ---------------------------------------------------------------------------
// Series
// ---------------------------------------------------------------------------

// One task's observations on a uniform time grid. Slots without an
// observation hold NaN and are flagged in `missing`.
struct TaskSeries {
  std::string id;
  double latitude = 0.0;
  double longitude = 0.0;
  int interval_minutes = 0;
  std::vector<std::int64_t> timestamps;  // epoch seconds, strictly increasing
  VectorXd values;                       // original units
  std::vector<bool> missing;

  void validate() const {
    if (interval_minutes <= 0) throw InputError("series interval must be positive");
    const std::size_t n = timestamps.size();
    if (values.size() != static_cast<Eigen::Index>(n) || missing.size() != n)
      throw InputError("series field lengths disagree");
    if (!std::isfinite(latitude) || !std::isfinite(longitude))
      throw InputError("series coordinates must be finite");
    const std::int64_t step = std::int64_t{60} * interval_minutes;
    for (std::size_t i = 1; i < n; ++i)
      if (timestamps[i] - timestamps[i - 1] != step)
        throw InputError("series grid is not uniform");
  }
};

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

struct CsvSchema {
  std::string sites_path;    // header: site_id,latitude,longitude
  int interval_minutes = 5;  // declared grid spacing of the data file
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw LoadError("");
    return v;
  } catch (const std::exception&) {
    throw LoadError("bad numeric field '" + s + "' " + where);
  }
}

}  // namespace detail

// Loads the observation file (header `timestamp,site_id,value`) against the
// sites file named in the schema (header `site_id,latitude,longitude`).
// Series come back in sites-file order on a gap-filled uniform grid; slots
// with no row (or a non-finite value) are marked missing.
inline std::vector<TaskSeries> load_csv(const std::string& path, const CsvSchema& schema) {
  if (schema.interval_minutes <= 0) throw InputError("schema interval must be positive");

  std::ifstream sf(schema.sites_path);
  if (!sf) throw LoadError("cannot open sites file " + schema.sites_path);
  std::string line;
  if (!std::getline(sf, line) || detail::strip_cr(line) != "site_id,latitude,longitude")
    throw LoadError(schema.sites_path + " line 1: expected header site_id,latitude,longitude");
  std::vector<std::string> site_order;
  std::map<std::string, std::pair<double, double>> site_pos;
  for (int ln = 2; std::getline(sf, line); ++ln) {
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    auto f = detail::split_fields(line);
    const std::string where = "at " + schema.sites_path + " line " + std::to_string(ln);
    if (f.size() != 3) throw LoadError("malformed row " + where);
    if (site_pos.count(f[0])) throw LoadError("duplicate site '" + f[0] + "' " + where);
    site_pos[f[0]] = {detail::parse_double(f[1], where), detail::parse_double(f[2], where)};
    site_order.push_back(f[0]);
  }
  if (site_order.empty()) throw LoadError("sites file " + schema.sites_path + " has no rows");

  std::ifstream df(path);
  if (!df) throw LoadError("cannot open data file " + path);
  if (!std::getline(df, line) || detail::strip_cr(line) != "timestamp,site_id,value")
    throw LoadError(path + " line 1: expected header timestamp,site_id,value");
  struct Obs {
    std::int64_t ts;
    double value;
    int line;
  };
  std::map<std::string, std::vector<Obs>> per_site;
  int nrows = 0;
  for (int ln = 2; std::getline(df, line); ++ln) {
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    auto f = detail::split_fields(line);
    const std::string where = "at " + path + " line " + std::to_string(ln);
    if (f.size() != 3) throw LoadError("malformed row " + where);
    std::int64_t ts;
    try {
      ts = parse_iso8601(f[0]);
    } catch (const LoadError& e) {
      throw LoadError(std::string(e.what()) + " " + where);
    }
    if (!site_pos.count(f[1])) throw LoadError("unknown site '" + f[1] + "' " + where);
    per_site[f[1]].push_back({ts, detail::parse_double(f[2], where), ln});
    ++nrows;
  }
  if (nrows == 0) throw LoadError("data file " + path + " has no rows");

  const std::int64_t step = std::int64_t{60} * schema.interval_minutes;
  std::vector<TaskSeries> out;
  for (const auto& id : site_order) {
    auto it = per_site.find(id);
    if (it == per_site.end()) throw LoadError("site '" + id + "' has no rows in " + path);
    auto& obs = it->second;
    std::sort(obs.begin(), obs.end(), [](const Obs& a, const Obs& b) { return a.ts < b.ts; });
    for (std::size_t i = 1; i < obs.size(); ++i) {
      const std::int64_t d = obs[i].ts - obs[i - 1].ts;
      if (d == 0)
        throw LoadError("duplicate timestamp for site '" + id + "' at " + path + " line " +
                        std::to_string(obs[i].line));
      if (d % step != 0)
        throw LoadError("timestamp off the " + std::to_string(schema.interval_minutes) +
                        "-minute grid for site '" + id + "' at " + path + " line " +
                        std::to_string(obs[i].line));
    }
    TaskSeries s;
    s.id = id;
    s.latitude = site_pos[id].first;
    s.longitude = site_pos[id].second;
    s.interval_minutes = schema.interval_minutes;
    const std::int64_t t0 = obs.front().ts, t1 = obs.back().ts;
    const std::size_t n = static_cast<std::size_t>((t1 - t0) / step) + 1;
    s.timestamps.resize(n);
    s.values = VectorXd::Constant(static_cast<Eigen::Index>(n),
                                  std::numeric_limits<double>::quiet_NaN());
    s.missing.assign(n, true);
    for (std::size_t i = 0; i < n; ++i)
      s.timestamps[i] = t0 + static_cast<std::int64_t>(i) * step;
    for (const auto& o : obs) {
      const std::size_t k = static_cast<std::size_t>((o.ts - t0) / step);
      if (std::isfinite(o.value)) {
        s.values(static_cast<Eigen::Index>(k)) = o.value;
        s.missing[k] = false;
      }
    }
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Supervised construction
// ---------------------------------------------------------------------------

// Target-timestamp filter, half-open [start, end) in minutes of day.
struct DayWindow {
  bool enabled = false;
  int start_minute = 7 * 60;
  int end_minute = 19 * 60;
};

inline DayWindow solar_day_window() { return DayWindow{true, 7 * 60, 19 * 60}; }

struct SplitSpec {
  double train_fraction = 0.7;  // chronological head of the kept rows
};

// Per-feature and per-task z-score statistics fitted on training rows. The
// time-index column keeps mean 0 / std 1 so it passes through unscaled.
struct NormStats {
  VectorXd feat_mean, feat_std;
  VectorXd target_mean, target_std;
};

inline MatrixXd normalize_targets(const MatrixXd& Y, const NormStats& st) {
  if (Y.cols() != st.target_mean.size()) throw InputError("target stats misaligned");
  return (Y.rowwise() - st.target_mean.transpose()).array().rowwise() /
         st.target_std.transpose().array();
}

inline MatrixXd denormalize_targets(const MatrixXd& Y, const NormStats& st) {
  if (Y.cols() != st.target_mean.size()) throw InputError("target stats misaligned");
  return (Y.array().rowwise() * st.target_std.transpose().array()).matrix().rowwise() +
         st.target_mean.transpose();
}

// Train and test supervised sets plus everything needed to interpret them:
// normalization statistics, target timestamps, task identities and site
// coordinates (consumed by the model builders).
struct Dataset {
  SupervisedSet train, test;
  NormStats stats;
  std::vector<std::int64_t> train_target_ts, test_target_ts;
  std::vector<std::string> task_ids;
  MatrixXd sites;  // P × 2 (latitude, longitude)
  int lags = 0;
  int horizon_steps = 0;
  int interval_minutes = 0;
  std::int64_t grid_start = 0;
};

// Builds forecasting rows from aligned series. Row layout per target index
// tau (features issued at b = tau - horizon):
//   X = [minutes(t_tau), task-0 lags y(b), y(b-1), ..., task-1 lags, ...]
//   Y = [y_0(tau), ..., y_{P-1}(tau)]
// Rows with any missing lag or target are dropped; lag columns and targets
// are z-scored with train-only statistics; the time column stays raw.
inline Dataset build_supervised(const std::vector<TaskSeries>& series, int horizon_steps,
                                int lags = 3, DayWindow window = {}, SplitSpec split = {}) {
  if (series.empty()) throw InputError("no series given");
  if (horizon_steps < 1) throw InputError("horizon must be at least one step");
  if (lags < 1) throw InputError("need at least one lag feature");
  if (!(split.train_fraction > 0.0 && split.train_fraction < 1.0))
    throw InputError("train fraction must lie in (0, 1)");
  if (window.enabled && window.start_minute >= window.end_minute)
    throw InputError("day window is empty");
  const int P = static_cast<int>(series.size());
  const int interval = series[0].interval_minutes;
  for (const auto& s : series) {
    s.validate();
    if (s.interval_minutes != interval) throw InputError("series intervals disagree");
  }

  // common grid spanning all series
  const std::int64_t step = std::int64_t{60} * interval;
  std::int64_t t0 = series[0].timestamps.front(), t1 = series[0].timestamps.back();
  for (const auto& s : series) {
    t0 = std::min(t0, s.timestamps.front());
    t1 = std::max(t1, s.timestamps.back());
  }
  for (const auto& s : series)
    if ((s.timestamps.front() - t0) % step != 0)
      throw InputError("series '" + s.id + "' is out of phase with the common grid");
  const Eigen::Index len = static_cast<Eigen::Index>((t1 - t0) / step) + 1;
  MatrixXd vals = MatrixXd::Constant(len, P, std::numeric_limits<double>::quiet_NaN());
  for (int p = 0; p < P; ++p) {
    const auto& s = series[static_cast<std::size_t>(p)];
    const Eigen::Index off = static_cast<Eigen::Index>((s.timestamps.front() - t0) / step);
    for (Eigen::Index i = 0; i < s.values.size(); ++i)
      if (!s.missing[static_cast<std::size_t>(i)]) vals(off + i, p) = s.values(i);
  }

  const int F = 1 + P * lags;
  std::vector<VectorXd> xrows;
  std::vector<VectorXd> yrows;
  std::vector<std::int64_t> ts;
  for (Eigen::Index tau = horizon_steps + lags - 1; tau < len; ++tau) {
    const std::int64_t target_ts = t0 + tau * step;
    if (window.enabled) {
      const int mod = minute_of_day(target_ts);
      if (mod < window.start_minute || mod >= window.end_minute) continue;
    }
    const Eigen::Index b = tau - horizon_steps;  // most recent usable lag
    VectorXd x(F);
    x(0) = double(target_ts - t0) / 60.0;
    bool ok = true;
    for (int p = 0; p < P && ok; ++p)
      for (int a = 0; a < lags; ++a) {
        const double v = vals(b - a, p);
        if (!std::isfinite(v)) {
          ok = false;
          break;
        }
        x(1 + p * lags + a) = v;
      }
    if (!ok) continue;
    VectorXd y = vals.row(tau).transpose();
    if (!y.allFinite()) continue;
    xrows.push_back(std::move(x));
    yrows.push_back(std::move(y));
    ts.push_back(target_ts);
  }
  const Eigen::Index n = static_cast<Eigen::Index>(xrows.size());
  if (n < 2) throw LoadError("empty supervised set after filtering");

  Eigen::Index ntr = static_cast<Eigen::Index>(std::llround(split.train_fraction * double(n)));
  ntr = std::max<Eigen::Index>(1, std::min(ntr, n - 1));

  Dataset out;
  out.lags = lags;
  out.horizon_steps = horizon_steps;
  out.interval_minutes = interval;
  out.grid_start = t0;
  out.sites.resize(P, 2);
  for (int p = 0; p < P; ++p) {
    out.task_ids.push_back(series[static_cast<std::size_t>(p)].id);
    out.sites(p, 0) = series[static_cast<std::size_t>(p)].latitude;
    out.sites(p, 1) = series[static_cast<std::size_t>(p)].longitude;
  }

  auto pack = [&](Eigen::Index from, Eigen::Index count, SupervisedSet* set,
                  std::vector<std::int64_t>* set_ts) {
    set->X.resize(count, F);
    set->Y.resize(count, P);
    for (Eigen::Index i = 0; i < count; ++i) {
      set->X.row(i) = xrows[static_cast<std::size_t>(from + i)].transpose();
      set->Y.row(i) = yrows[static_cast<std::size_t>(from + i)].transpose();
      set_ts->push_back(ts[static_cast<std::size_t>(from + i)]);
    }
    set->mask = MatrixXd::Ones(count, P);
  };
  pack(0, ntr, &out.train, &out.train_target_ts);
  pack(ntr, n - ntr, &out.test, &out.test_target_ts);

  // z-score statistics from the training split only (std floor 1e-8)
  NormStats st;
  st.feat_mean = VectorXd::Zero(F);
  st.feat_std = VectorXd::Ones(F);
  for (int c = 1; c < F; ++c) {
    const double mu = out.train.X.col(c).mean();
    const double sd =
        std::sqrt((out.train.X.col(c).array() - mu).square().sum() / double(ntr));
    st.feat_mean(c) = mu;
    st.feat_std(c) = std::max(sd, 1e-8);
  }
  st.target_mean = out.train.Y.colwise().mean().transpose();
  st.target_std = VectorXd(P);
  for (int p = 0; p < P; ++p) {
    const double sd = std::sqrt(
        (out.train.Y.col(p).array() - st.target_mean(p)).square().sum() / double(ntr));
    st.target_std(p) = std::max(sd, 1e-8);
  }
  for (auto* set : {&out.train, &out.test}) {
    for (int c = 1; c < F; ++c)
      set->X.col(c) = (set->X.col(c).array() - st.feat_mean(c)) / st.feat_std(c);
    set->Y = normalize_targets(set->Y, st);
  }
  out.stats = std::move(st);
  return out;
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

inline void write_series_csv(const std::vector<TaskSeries>& series, const std::string& data_path,
                             const std::string& sites_path) {
  std::ofstream sf(sites_path);
  if (!sf) throw LoadError("cannot write " + sites_path);
  sf << "site_id,latitude,longitude\n";
  sf.precision(12);
  for (const auto& s : series) sf << s.id << ',' << s.latitude << ',' << s.longitude << '\n';

  std::ofstream df(data_path);
  if (!df) throw LoadError("cannot write " + data_path);
  df << "timestamp,site_id,value\n";
  df.precision(17);
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.timestamps.size(); ++i) {
      if (s.missing[i]) continue;  // gaps are encoded by absence
      df << format_iso8601(s.timestamps[i]) << ',' << s.id << ','
         << s.values(static_cast<Eigen::Index>(i)) << '\n';
    }
}

inline void write_supervised_csv(const SupervisedSet& set,
                                 const std::vector<std::int64_t>& target_ts,
                                 const std::string& path) {
  if (static_cast<Eigen::Index>(target_ts.size()) != set.X.rows())
    throw InputError("timestamp list misaligned with rows");
  std::ofstream f(path);
  if (!f) throw LoadError("cannot write " + path);
  f << "target_timestamp";
  for (Eigen::Index c = 0; c < set.X.cols(); ++c) f << ",x" << c;
  for (Eigen::Index p = 0; p < set.Y.cols(); ++p) f << ",y" << p;
  f << '\n';
  f.precision(17);
  for (Eigen::Index i = 0; i < set.X.rows(); ++i) {
    f << format_iso8601(target_ts[static_cast<std::size_t>(i)]);
    for (Eigen::Index c = 0; c < set.X.cols(); ++c) f << ',' << set.X(i, c);
    for (Eigen::Index p = 0; p < set.Y.cols(); ++p) f << ',' << set.Y(i, p);
    f << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

// Generative form: y_p(t) = sum_l w_pl(t) g_l(t) + eps_p. Nodes g_l are
// zero-mean GPs with a periodic-times-RBF kernel over time; for each l the
// weight functions (w_1l .. w_Pl) share a slow temporal GP and are coupled
// across sites by an RBF over site coordinates, so nearby sites receive
// nearly identical weights and co-located sites identical ones.
struct SynthConfig {
  int P = 2;
  int Qg = 2;
  Eigen::Index n = 400;      // grid length
  MatrixXd sites;            // P × 2; empty selects a unit-spaced line layout
  std::uint64_t seed = 0;
  double noise_std = 0.1;
  int interval_minutes = 5;
  std::int64_t start_epoch = 1704067200;  // 2024-01-01T00:00:00Z
  double period = 1440.0;                 // node periodicity, minutes
  double time_ls = 1.0;
  double node_rbf_ls = 360.0;    // node drift lengthscale, minutes
  double weight_ls = 480.0;      // weight temporal lengthscale, minutes
  double site_ls = 1.0;          // spatial coupling lengthscale, degrees
  double node_var = 1.0;
  double weight_var = 1.0;
  bool unit_weights = false;  // w_pl == 1: observations are node sums
};

struct SynthResult {
  std::vector<TaskSeries> series;  // P gap-free series with noisy observations
  MatrixXd G;                      // n × Qg node latents
  std::vector<MatrixXd> W;         // Qg matrices, n × P weight latents
  MatrixXd F;                      // n × P noiseless mixes
};

namespace detail {

// Symmetric PSD square root; exactly duplicated rows of K produce exactly
// duplicated rows of the factor, unlike a Cholesky with jitter.
inline MatrixXd psd_sqrt(const MatrixXd& K) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(K);
  if (eig.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  VectorXd lam = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace detail

inline SynthResult synth_gprn(const SynthConfig& cfg) {
  if (cfg.P < 1) throw InputError("generator needs P >= 1");
  if (cfg.Qg < 1) throw InputError("generator needs Qg >= 1");
  if (cfg.n < 50) throw InputError("generator needs n >= 50");
  if (cfg.interval_minutes <= 0) throw InputError("generator interval must be positive");
  if (cfg.noise_std < 0.0) throw InputError("noise level must be non-negative");
  MatrixXd sites = cfg.sites;
  if (sites.size() == 0) {
    sites.resize(cfg.P, 2);
    for (int p = 0; p < cfg.P; ++p) sites.row(p) << double(p), 0.0;
  }
  if (sites.rows() != cfg.P || sites.cols() != 2) throw InputError("sites must be P x 2");

  const Eigen::Index n = cfg.n;
  MatrixXd T(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) T(i, 0) = double(i) * cfg.interval_minutes;

  KernelSpec node_kern = KernelSpec::periodic(0, cfg.period, cfg.time_ls, 1.0) *
                         KernelSpec::rbf({0}, cfg.node_rbf_ls, cfg.node_var);
  CholFactor Ln = chol(node_kern.gram(T));
  // weights follow a quasi-periodic daily pattern whose shape morphs on the
  // weight_ls scale; a long weight_ls gives a stable repeating mixing pattern
  KernelSpec weight_kern = KernelSpec::periodic(0, cfg.period, cfg.time_ls, 1.0) *
                           KernelSpec::rbf({0}, cfg.weight_ls, cfg.weight_var);
  CholFactor Lw = chol(weight_kern.gram(T));
  MatrixXd Ms = detail::psd_sqrt(KernelSpec::rbf({0, 1}, cfg.site_ls, 1.0).gram(sites));

  SynthResult out;
  out.G.resize(n, cfg.Qg);
  for (int l = 0; l < cfg.Qg; ++l) {
    Rng rng(derive_seed(cfg.seed, 0x0deu, static_cast<std::uint64_t>(l)));
    VectorXd eps(n);
    for (Eigen::Index i = 0; i < n; ++i) eps(i) = rng.normal();
    out.G.col(l) = Ln.L * eps;
  }
  for (int l = 0; l < cfg.Qg; ++l) {
    if (cfg.unit_weights) {
      out.W.push_back(MatrixXd::Ones(n, cfg.P));
      continue;
    }
    Rng rng(derive_seed(cfg.seed, 0x3e6u, static_cast<std::uint64_t>(l)));
    MatrixXd E(n, cfg.P);
    for (int p = 0; p < cfg.P; ++p)
      for (Eigen::Index i = 0; i < n; ++i) E(i, p) = rng.normal();
    out.W.push_back(Lw.L * E * Ms);  // col p depends on sites only through Ms
  }
  // Square mixing anchors latent l at site l: smooth each task's loadings
  // across source sites too, making the weight field matrix-normal with the
  // site kernel on both axes (unit marginals are preserved).
  if (!cfg.unit_weights && cfg.Qg == cfg.P) {
    MatrixXd M(cfg.P, cfg.Qg);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int l = 0; l < cfg.Qg; ++l)
        M.col(l) = out.W[static_cast<std::size_t>(l)].row(i).transpose();
      M = M * Ms;
      for (int l = 0; l < cfg.Qg; ++l)
        out.W[static_cast<std::size_t>(l)].row(i) = M.col(l).transpose();
    }
  }

  out.F = MatrixXd::Zero(n, cfg.P);
  for (int l = 0; l < cfg.Qg; ++l)
    out.F += (out.W[static_cast<std::size_t>(l)].array().colwise() *
              out.G.col(l).array()).matrix();

  const std::int64_t step = std::int64_t{60} * cfg.interval_minutes;
  for (int p = 0; p < cfg.P; ++p) {
    Rng rng(derive_seed(cfg.seed, 0x105eu, static_cast<std::uint64_t>(p)));
    TaskSeries s;
    s.id = "site" + std::to_string(p);
    s.latitude = sites(p, 0);
    s.longitude = sites(p, 1);
    s.interval_minutes = cfg.interval_minutes;
    s.timestamps.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      s.timestamps[static_cast<std::size_t>(i)] = cfg.start_epoch + i * step;
    s.values = out.F.col(p);
    if (cfg.noise_std > 0.0)
      for (Eigen::Index i = 0; i < n; ++i) s.values(i) += cfg.noise_std * rng.normal();
    s.missing.assign(static_cast<std::size_t>(n), false);
    s.validate();
    out.series.push_back(std::move(s));
  }
  return out;
}

inline void write_truth_csv(const SynthResult& r, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw LoadError("cannot write " + path);
  const int Qg = static_cast<int>(r.G.cols());
  const int P = static_cast<int>(r.F.cols());
  f << "timestamp";
  for (int l = 0; l < Qg; ++l) f << ",g" << l;
  for (int l = 0; l < Qg; ++l)
    for (int p = 0; p < P; ++p) f << ",w" << l << "_" << p;
  for (int p = 0; p < P; ++p) f << ",f" << p;
  f << '\n';
  f.precision(17);
  for (Eigen::Index i = 0; i < r.G.rows(); ++i) {
    f << format_iso8601(r.series[0].timestamps[static_cast<std::size_t>(i)]);
    for (int l = 0; l < Qg; ++l) f << ',' << r.G(i, l);
    for (int l = 0; l < Qg; ++l)
      for (int p = 0; p < P; ++p) f << ',' << r.W[static_cast<std::size_t>(l)](i, p);
    for (int p = 0; p < P; ++p) f << ',' << r.F(i, p);
    f << '\n';
  }
}

}  // namespace ggp
