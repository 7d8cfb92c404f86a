#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ggp/common.hpp"
#include "ggp/data.hpp"
#include "ggp/model.hpp"
#include "ggp/optim.hpp"
#include "ggp/predict.hpp"
#include "ggp/vi.hpp"

namespace ggp {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string observations;
  std::string sites;
  int interval_minutes = 5;
  int horizon_steps = 1;
  int lags = 3;
  double train_fraction = 0.7;
  DayWindow window;
};

struct ModelConfig {
  std::string family = "ggp";         // ggp | gprn | lcm | mtg | igp
  std::string scheme = "solar-rows";  // ggp only: solar-rows | wind-offdiag
  int P = 1;
  int Qg = 1;
  int m = 10;
  int K = 1;
  std::string posterior = "diagonal";  // diagonal | kron-full
  KernelDefaults kernel;               // lags mirrors data.lags
};

struct EvalConfig {
  int predict_samples = 1000;
  int nlpd_samples = 1000;
  int bootstrap = 3000;
  std::uint64_t seed = 1;
};

struct BenchmarkEntry {
  std::string family;
  std::string scheme = "solar-rows";
  std::string posterior = "diagonal";
  int Qg = 1;
};

struct BenchmarkConfig {
  double budget = 0.0;  // per-iteration cost R*m^3; 0 = reuse model.m as-is
  int curve_every = 0;  // capture test metrics every k epochs (0 = off)
  int curve_samples = 128;
  std::vector<BenchmarkEntry> entries;
};

struct SynthSection {
  int P = 2;
  int Qg = 2;
  long n = 400;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
  int interval_minutes = 5;
  double site_spacing = 1.0;  // line layout when no explicit sites are given
  MatrixXd sites;             // optional explicit P x 2 layout
  double period = 1440.0;
  double time_ls = 1.0;
  double node_rbf_ls = 360.0;
  double weight_ls = 480.0;
  double site_ls = 1.0;
  double node_var = 1.0;
  double weight_var = 1.0;
  bool unit_weights = false;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  BenchmarkConfig benchmark;
  SynthSection synth;
  std::string output_dir = "runs/out";
};

// ---------------------------------------------------------------------------
// JSON binding (strict: unknown or ill-typed fields name their path)
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const json& j, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(path + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown field " + path + "." + it.key());
  }
}

template <class T>
T field(const json& j, const std::string& path, const char* key, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for " + path + "." + key);
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
  detail::check_keys(j, "config",
                     {"data", "model", "train", "eval", "benchmark", "synth", "output_dir"});
  RunConfig c;
  c.output_dir = detail::field<std::string>(j, "config", "output_dir", c.output_dir);

  if (j.contains("data")) {
    const json& d = j.at("data");
    detail::check_keys(d, "data",
                       {"observations", "sites", "interval_minutes", "horizon_steps", "lags",
                        "train_fraction", "day_window"});
    c.data.observations = detail::field<std::string>(d, "data", "observations", "");
    c.data.sites = detail::field<std::string>(d, "data", "sites", "");
    c.data.interval_minutes = detail::field<int>(d, "data", "interval_minutes", 5);
    c.data.horizon_steps = detail::field<int>(d, "data", "horizon_steps", 1);
    c.data.lags = detail::field<int>(d, "data", "lags", 3);
    c.data.train_fraction = detail::field<double>(d, "data", "train_fraction", 0.7);
    if (d.contains("day_window")) {
      const json& w = d.at("day_window");
      detail::check_keys(w, "data.day_window", {"enabled", "start_minute", "end_minute"});
      c.data.window.enabled = detail::field<bool>(w, "data.day_window", "enabled", false);
      c.data.window.start_minute =
          detail::field<int>(w, "data.day_window", "start_minute", 7 * 60);
      c.data.window.end_minute = detail::field<int>(w, "data.day_window", "end_minute", 19 * 60);
    }
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    detail::check_keys(m, "model", {"family", "scheme", "P", "Qg", "m", "K", "posterior", "kernel"});
    c.model.family = detail::field<std::string>(m, "model", "family", c.model.family);
    c.model.scheme = detail::field<std::string>(m, "model", "scheme", c.model.scheme);
    c.model.P = detail::field<int>(m, "model", "P", c.model.P);
    c.model.Qg = detail::field<int>(m, "model", "Qg", c.model.Qg);
    c.model.m = detail::field<int>(m, "model", "m", c.model.m);
    c.model.K = detail::field<int>(m, "model", "K", c.model.K);
    c.model.posterior = detail::field<std::string>(m, "model", "posterior", c.model.posterior);
    if (m.contains("kernel")) {
      const json& k = m.at("kernel");
      detail::check_keys(k, "model.kernel",
                         {"period", "time_ls", "lag_ls", "space_ls", "ep_ls", "variance"});
      c.model.kernel.period = detail::field<double>(k, "model.kernel", "period", 1440.0);
      c.model.kernel.time_ls = detail::field<double>(k, "model.kernel", "time_ls", 1.0);
      c.model.kernel.lag_ls = detail::field<double>(k, "model.kernel", "lag_ls", 1.0);
      c.model.kernel.space_ls = detail::field<double>(k, "model.kernel", "space_ls", 1.0);
      c.model.kernel.ep_ls = detail::field<double>(k, "model.kernel", "ep_ls", 2.0);
      c.model.kernel.variance = detail::field<double>(k, "model.kernel", "variance", 1.0);
    }
  }
  c.model.kernel.lags = c.data.lags;  // one source of truth for the feature layout

  if (j.contains("train")) {
    const json& t = j.at("train");
    detail::check_keys(t, "train",
                       {"lr", "beta1", "beta2", "eps", "tol", "max_epochs", "wall_clock_s",
                        "mc_samples", "seed", "resample_per_epoch", "flags"});
    c.train.lr = detail::field<double>(t, "train", "lr", c.train.lr);
    c.train.beta1 = detail::field<double>(t, "train", "beta1", c.train.beta1);
    c.train.beta2 = detail::field<double>(t, "train", "beta2", c.train.beta2);
    c.train.eps = detail::field<double>(t, "train", "eps", c.train.eps);
    c.train.tol = detail::field<double>(t, "train", "tol", c.train.tol);
    c.train.max_epochs = detail::field<int>(t, "train", "max_epochs", c.train.max_epochs);
    c.train.wall_clock_s = detail::field<double>(t, "train", "wall_clock_s", c.train.wall_clock_s);
    c.train.mc_samples = detail::field<int>(t, "train", "mc_samples", c.train.mc_samples);
    c.train.seed = detail::field<std::uint64_t>(t, "train", "seed", c.train.seed);
    c.train.resample_per_epoch =
        detail::field<bool>(t, "train", "resample_per_epoch", c.train.resample_per_epoch);
    if (t.contains("flags")) {
      const json& f = t.at("flags");
      detail::check_keys(f, "train.flags",
                         {"hyper", "inducing", "noise", "variational", "lcm_weights"});
      c.train.flags.train_hyper = detail::field<bool>(f, "train.flags", "hyper", true);
      c.train.flags.train_z = detail::field<bool>(f, "train.flags", "inducing", true);
      c.train.flags.train_noise = detail::field<bool>(f, "train.flags", "noise", true);
      c.train.flags.train_variational = detail::field<bool>(f, "train.flags", "variational", true);
      c.train.flags.train_lcm_weights =
          detail::field<bool>(f, "train.flags", "lcm_weights", true);
    }
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    detail::check_keys(e, "eval", {"predict_samples", "nlpd_samples", "bootstrap", "seed"});
    c.eval.predict_samples = detail::field<int>(e, "eval", "predict_samples", c.eval.predict_samples);
    c.eval.nlpd_samples = detail::field<int>(e, "eval", "nlpd_samples", c.eval.nlpd_samples);
    c.eval.bootstrap = detail::field<int>(e, "eval", "bootstrap", c.eval.bootstrap);
    c.eval.seed = detail::field<std::uint64_t>(e, "eval", "seed", c.eval.seed);
  }

  if (j.contains("benchmark")) {
    const json& b = j.at("benchmark");
    detail::check_keys(b, "benchmark", {"budget", "curve_every", "curve_samples", "entries"});
    c.benchmark.budget = detail::field<double>(b, "benchmark", "budget", 0.0);
    c.benchmark.curve_every = detail::field<int>(b, "benchmark", "curve_every", 0);
    c.benchmark.curve_samples = detail::field<int>(b, "benchmark", "curve_samples", 128);
    if (b.contains("entries")) {
      if (!b.at("entries").is_array()) throw ConfigError("benchmark.entries must be an array");
      int idx = 0;
      for (const json& e : b.at("entries")) {
        const std::string path = "benchmark.entries[" + std::to_string(idx++) + "]";
        detail::check_keys(e, path, {"family", "scheme", "posterior", "Qg"});
        BenchmarkEntry be;
        be.family = detail::field<std::string>(e, path, "family", "");
        be.scheme = detail::field<std::string>(e, path, "scheme", be.scheme);
        be.posterior = detail::field<std::string>(e, path, "posterior", be.posterior);
        be.Qg = detail::field<int>(e, path, "Qg", c.model.Qg);
        c.benchmark.entries.push_back(std::move(be));
      }
    }
  }

  if (j.contains("synth")) {
    const json& s = j.at("synth");
    detail::check_keys(s, "synth",
                       {"P", "Qg", "n", "noise_std", "seed", "interval_minutes", "site_spacing",
                        "sites", "period", "time_ls", "node_rbf_ls", "weight_ls", "site_ls",
                        "node_var", "weight_var", "unit_weights"});
    c.synth.P = detail::field<int>(s, "synth", "P", c.synth.P);
    c.synth.Qg = detail::field<int>(s, "synth", "Qg", c.synth.Qg);
    c.synth.n = detail::field<long>(s, "synth", "n", c.synth.n);
    c.synth.noise_std = detail::field<double>(s, "synth", "noise_std", c.synth.noise_std);
    c.synth.seed = detail::field<std::uint64_t>(s, "synth", "seed", c.synth.seed);
    c.synth.interval_minutes = detail::field<int>(s, "synth", "interval_minutes", 5);
    c.synth.site_spacing = detail::field<double>(s, "synth", "site_spacing", 1.0);
    c.synth.period = detail::field<double>(s, "synth", "period", c.synth.period);
    c.synth.time_ls = detail::field<double>(s, "synth", "time_ls", c.synth.time_ls);
    c.synth.node_rbf_ls = detail::field<double>(s, "synth", "node_rbf_ls", c.synth.node_rbf_ls);
    c.synth.weight_ls = detail::field<double>(s, "synth", "weight_ls", c.synth.weight_ls);
    c.synth.site_ls = detail::field<double>(s, "synth", "site_ls", c.synth.site_ls);
    c.synth.node_var = detail::field<double>(s, "synth", "node_var", c.synth.node_var);
    c.synth.weight_var = detail::field<double>(s, "synth", "weight_var", c.synth.weight_var);
    c.synth.unit_weights = detail::field<bool>(s, "synth", "unit_weights", false);
    if (s.contains("sites")) {
      const json& arr = s.at("sites");
      if (!arr.is_array()) throw ConfigError("synth.sites must be an array of [lat, lon] pairs");
      c.synth.sites.resize(static_cast<Eigen::Index>(arr.size()), 2);
      Eigen::Index r = 0;
      for (const json& row : arr) {
        if (!row.is_array() || row.size() != 2)
          throw ConfigError("synth.sites rows must be [lat, lon] pairs");
        c.synth.sites(r, 0) = row.at(0).get<double>();
        c.synth.sites(r, 1) = row.at(1).get<double>();
        ++r;
      }
    }
  }
  return c;
}

inline json serialize_run_config(const RunConfig& c) {
  json j;
  j["output_dir"] = c.output_dir;
  j["data"] = {{"observations", c.data.observations},
               {"sites", c.data.sites},
               {"interval_minutes", c.data.interval_minutes},
               {"horizon_steps", c.data.horizon_steps},
               {"lags", c.data.lags},
               {"train_fraction", c.data.train_fraction},
               {"day_window",
                {{"enabled", c.data.window.enabled},
                 {"start_minute", c.data.window.start_minute},
                 {"end_minute", c.data.window.end_minute}}}};
  j["model"] = {{"family", c.model.family},
                {"scheme", c.model.scheme},
                {"P", c.model.P},
                {"Qg", c.model.Qg},
                {"m", c.model.m},
                {"K", c.model.K},
                {"posterior", c.model.posterior},
                {"kernel",
                 {{"period", c.model.kernel.period},
                  {"time_ls", c.model.kernel.time_ls},
                  {"lag_ls", c.model.kernel.lag_ls},
                  {"space_ls", c.model.kernel.space_ls},
                  {"ep_ls", c.model.kernel.ep_ls},
                  {"variance", c.model.kernel.variance}}}};
  j["train"] = {{"lr", c.train.lr},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"eps", c.train.eps},
                {"tol", c.train.tol},
                {"max_epochs", c.train.max_epochs},
                {"wall_clock_s", c.train.wall_clock_s},
                {"mc_samples", c.train.mc_samples},
                {"seed", c.train.seed},
                {"resample_per_epoch", c.train.resample_per_epoch},
                {"flags",
                 {{"hyper", c.train.flags.train_hyper},
                  {"inducing", c.train.flags.train_z},
                  {"noise", c.train.flags.train_noise},
                  {"variational", c.train.flags.train_variational},
                  {"lcm_weights", c.train.flags.train_lcm_weights}}}};
  j["eval"] = {{"predict_samples", c.eval.predict_samples},
               {"nlpd_samples", c.eval.nlpd_samples},
               {"bootstrap", c.eval.bootstrap},
               {"seed", c.eval.seed}};
  json entries = json::array();
  for (const auto& e : c.benchmark.entries)
    entries.push_back({{"family", e.family},
                       {"scheme", e.scheme},
                       {"posterior", e.posterior},
                       {"Qg", e.Qg}});
  j["benchmark"] = {{"budget", c.benchmark.budget},
                    {"curve_every", c.benchmark.curve_every},
                    {"curve_samples", c.benchmark.curve_samples},
                    {"entries", entries}};
  json sites = json::array();
  for (Eigen::Index r = 0; r < c.synth.sites.rows(); ++r)
    sites.push_back({c.synth.sites(r, 0), c.synth.sites(r, 1)});
  j["synth"] = {{"P", c.synth.P},
                {"Qg", c.synth.Qg},
                {"n", c.synth.n},
                {"noise_std", c.synth.noise_std},
                {"seed", c.synth.seed},
                {"interval_minutes", c.synth.interval_minutes},
                {"site_spacing", c.synth.site_spacing},
                {"sites", sites},
                {"period", c.synth.period},
                {"time_ls", c.synth.time_ls},
                {"node_rbf_ls", c.synth.node_rbf_ls},
                {"weight_ls", c.synth.weight_ls},
                {"site_ls", c.synth.site_ls},
                {"node_var", c.synth.node_var},
                {"weight_var", c.synth.weight_var},
                {"unit_weights", c.synth.unit_weights}};
  return j;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

inline void validate_run_config(const RunConfig& c) {
  auto positive = [](int v, const char* path) {
    if (v < 1) throw ConfigError(std::string(path) + " must be positive");
  };
  const std::vector<std::string> families = {"ggp", "gprn", "lcm", "mtg", "igp"};
  if (std::find(families.begin(), families.end(), c.model.family) == families.end())
    throw ConfigError("model.family must be one of ggp|gprn|lcm|mtg|igp, got '" +
                      c.model.family + "'");
  if (c.model.family == "ggp" && c.model.scheme != "solar-rows" &&
      c.model.scheme != "wind-offdiag")
    throw ConfigError("model.scheme must be solar-rows or wind-offdiag for family ggp, got '" +
                      c.model.scheme + "'");
  if (c.model.posterior != "diagonal" && c.model.posterior != "kron-full")
    throw ConfigError("model.posterior must be diagonal or kron-full, got '" + c.model.posterior +
                      "'");
  positive(c.model.P, "model.P");
  positive(c.model.Qg, "model.Qg");
  positive(c.model.m, "model.m");
  positive(c.model.K, "model.K");
  positive(c.data.interval_minutes, "data.interval_minutes");
  positive(c.data.horizon_steps, "data.horizon_steps");
  positive(c.data.lags, "data.lags");
  if (!(c.data.train_fraction > 0.0 && c.data.train_fraction < 1.0))
    throw ConfigError("data.train_fraction must lie in (0, 1)");
  if (c.train.lr <= 0.0) throw ConfigError("train.lr must be positive");
  positive(c.train.max_epochs, "train.max_epochs");
  positive(c.train.mc_samples, "train.mc_samples");
  if (c.eval.predict_samples < 2) throw ConfigError("eval.predict_samples must be at least 2");
  if (c.eval.nlpd_samples < 1) throw ConfigError("eval.nlpd_samples must be at least 1");
  if (c.eval.bootstrap < 100) throw ConfigError("eval.bootstrap must be at least 100");
}

// ---------------------------------------------------------------------------
// Model assembly against a dataset
// ---------------------------------------------------------------------------

inline CovType parse_cov_type(const std::string& s) {
  if (s == "diagonal") return CovType::Diagonal;
  if (s == "kron-full") return CovType::KronFull;
  throw ConfigError("model.posterior must be diagonal or kron-full, got '" + s + "'");
}

// Per-task-instance supervised views. Most families see the full set; igp
// instance i sees target column i; mtg sees the pooled one-task rows
// [time, own lags, lat, lon] with blocks ordered task 0's rows, task 1's, ...
struct RunModels {
  std::vector<ModelSpec> instances;
  std::vector<SupervisedSet> train_views, test_views;
  bool pooled = false;
};

namespace detail {

inline SupervisedSet pool_rows(const SupervisedSet& s, const MatrixXd& sites, int lags) {
  const Eigen::Index n = s.X.rows();
  const Eigen::Index P = s.Y.cols();
  SupervisedSet out;
  out.X.resize(n * P, 1 + lags + 2);
  out.Y.resize(n * P, 1);
  out.mask.resize(n * P, 1);
  for (Eigen::Index p = 0; p < P; ++p)
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index r = p * n + i;
      out.X(r, 0) = s.X(i, 0);
      for (int a = 0; a < lags; ++a) out.X(r, 1 + a) = s.X(i, 1 + p * lags + a);
      out.X(r, 1 + lags) = sites(p, 0);
      out.X(r, 2 + lags) = sites(p, 1);
      out.Y(r, 0) = s.Y(i, p);
      out.mask(r, 0) = s.mask(i, p);
    }
  return out;
}

inline SupervisedSet slice_task(const SupervisedSet& s, int p) {
  SupervisedSet out;
  out.X = s.X;
  out.Y = s.Y.col(p);
  out.mask = s.mask.col(p);
  return out;
}

}  // namespace detail

inline RunModels assemble_models(const ModelConfig& mc, const Dataset& ds) {
  if (mc.P != static_cast<int>(ds.task_ids.size()))
    throw ConfigError("model.P (" + std::to_string(mc.P) + ") must match the dataset task count (" +
                      std::to_string(ds.task_ids.size()) + ")");
  KernelDefaults kd = mc.kernel;
  kd.lags = ds.lags;
  RunModels out;
  if (mc.family == "ggp") {
    out.instances.push_back(make_ggp_model(mc.scheme, mc.P, ds.sites, kd));
    out.train_views.push_back(ds.train);
    out.test_views.push_back(ds.test);
    return out;
  }
  BenchmarkAssembly asm_ = build_benchmark(mc.family, mc.P, mc.Qg, ds.sites, kd);
  if (mc.family == "igp") {
    for (int p = 0; p < mc.P; ++p) {
      out.instances.push_back(asm_.instances[static_cast<std::size_t>(p)]);
      out.train_views.push_back(detail::slice_task(ds.train, p));
      out.test_views.push_back(detail::slice_task(ds.test, p));
    }
  } else if (mc.family == "mtg") {
    out.pooled = true;
    out.instances.push_back(asm_.instances[0]);
    out.train_views.push_back(detail::pool_rows(ds.train, ds.sites, ds.lags));
    out.test_views.push_back(detail::pool_rows(ds.test, ds.sites, ds.lags));
  } else {  // gprn, lcm
    out.instances.push_back(asm_.instances[0]);
    out.train_views.push_back(ds.train);
    out.test_views.push_back(ds.test);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints (text key/value per parameter block)
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, ParamStore>> instances;  // name -> params
};

inline std::map<std::string, std::string> checkpoint_meta(const RunConfig& cfg) {
  return {{"family", cfg.model.family}, {"scheme", cfg.model.scheme},
          {"P", std::to_string(cfg.model.P)}, {"Qg", std::to_string(cfg.model.Qg)},
          {"m", std::to_string(cfg.model.m)}, {"K", std::to_string(cfg.model.K)},
          {"posterior", cfg.model.posterior}};
}

inline void write_checkpoint(const std::string& path, const RunConfig& cfg,
                             const RunModels& models, const std::vector<MoGPosterior>& qs) {
  std::ofstream f(path);
  if (!f) throw LoadError("cannot write checkpoint " + path);
  f << "ggp-checkpoint 1\n" << std::setprecision(17);
  for (const auto& [k, v] : checkpoint_meta(cfg)) f << "meta " << k << ' ' << v << '\n';
  TrainFlags all;
  for (std::size_t i = 0; i < models.instances.size(); ++i) {
    f << "instance " << models.instances[i].name << '\n';
    ParamStore store = pack_params(models.instances[i], qs[i], all);
    for (std::size_t b = 0; b < store.names.size(); ++b) {
      const MatrixXd& M = store.values[b];
      f << "block " << store.names[b] << ' ' << M.rows() << ' ' << M.cols() << '\n';
      for (Eigen::Index r = 0; r < M.rows(); ++r) {
        for (Eigen::Index c = 0; c < M.cols(); ++c) f << (c ? " " : "") << M(r, c);
        f << '\n';
      }
    }
  }
  f << "end\n";
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw LoadError("cannot open checkpoint " + path);
  std::string line;
  if (!std::getline(f, line) || line != "ggp-checkpoint 1")
    throw LoadError(path + " is not a version-1 checkpoint");
  Checkpoint ck;
  ParamStore* cur = nullptr;
  while (std::getline(f, line)) {
    if (line.empty() || line == "end") continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "meta") {
      std::string k, v;
      ss >> k >> v;
      ck.meta[k] = v;
    } else if (tag == "instance") {
      std::string name;
      ss >> name;
      ck.instances.emplace_back(name, ParamStore{});
      cur = &ck.instances.back().second;
    } else if (tag == "block") {
      if (!cur) throw LoadError(path + ": block before any instance");
      std::string name;
      Eigen::Index rows, cols;
      if (!(ss >> name >> rows >> cols) || rows < 0 || cols < 0)
        throw LoadError(path + ": malformed block header '" + line + "'");
      MatrixXd M(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        if (!std::getline(f, line)) throw LoadError(path + ": truncated block " + name);
        std::istringstream vs(line);
        for (Eigen::Index c = 0; c < cols; ++c)
          if (!(vs >> M(r, c))) throw LoadError(path + ": short row in block " + name);
      }
      cur->add(name, std::move(M));
    } else {
      throw LoadError(path + ": unrecognized line '" + line + "'");
    }
  }
  if (ck.instances.empty()) throw LoadError(path + " contains no parameter blocks");
  return ck;
}

// Loads checkpoint parameters into freshly assembled models; the stored run
// shape must match the config exactly.
inline void restore_checkpoint(const Checkpoint& ck, const RunConfig& cfg, RunModels* models,
                               std::vector<MoGPosterior>* qs) {
  for (const auto& [k, v] : checkpoint_meta(cfg)) {
    auto it = ck.meta.find(k);
    if (it == ck.meta.end() || it->second != v)
      throw ConfigError("checkpoint does not match the config: field '" + k + "' is '" +
                        (it == ck.meta.end() ? std::string("missing") : it->second) +
                        "', config wants '" + v + "'");
  }
  if (ck.instances.size() != models->instances.size())
    throw StructureError("checkpoint instance count does not match the model");
  TrainFlags all;
  for (std::size_t i = 0; i < ck.instances.size(); ++i) {
    if (ck.instances[i].first != models->instances[i].name)
      throw StructureError("checkpoint instance '" + ck.instances[i].first +
                           "' does not match model instance '" + models->instances[i].name + "'");
    unpack_params(ck.instances[i].second, &models->instances[i], &(*qs)[i], all);
  }
}

// ---------------------------------------------------------------------------
// Shared run plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw LoadError("cannot create output directory " + dir + ": " + ec.message());
}

inline void require_file(const std::string& path, const char* field) {
  if (path.empty()) throw ConfigError(std::string(field) + " is required");
  if (!std::filesystem::exists(path))
    throw ConfigError(std::string(field) + " references a missing file: " + path);
}

inline void write_text(const std::string& path, const std::string& body) {
  std::ofstream f(path);
  if (!f) throw LoadError("cannot write " + path);
  f << body;
}

}  // namespace detail

inline Dataset load_dataset(const RunConfig& cfg) {
  detail::require_file(cfg.data.observations, "data.observations");
  detail::require_file(cfg.data.sites, "data.sites");
  auto series = load_csv(cfg.data.observations, {cfg.data.sites, cfg.data.interval_minutes});
  return build_supervised(series, cfg.data.horizon_steps, cfg.data.lags, cfg.data.window,
                          SplitSpec{cfg.data.train_fraction});
}

// Builds instances against the dataset and gives every group its inducing
// inputs plus an initial posterior.
inline std::vector<MoGPosterior> init_run(const RunConfig& cfg, RunModels* models) {
  std::vector<MoGPosterior> qs;
  const CovType ct = parse_cov_type(cfg.model.posterior);
  for (std::size_t i = 0; i < models->instances.size(); ++i) {
    init_inducing(models->instances[i], models->train_views[i].X, cfg.model.m,
                  derive_seed(cfg.train.seed, static_cast<std::uint64_t>(i)));
    qs.push_back(init_posterior(models->instances[i], cfg.model.m, cfg.model.K, ct));
  }
  return qs;
}

// Task-space predictions (n x P over the dataset's test rows) assembled from
// the per-instance views.
inline Prediction predict_all(const RunModels& models, const std::vector<MoGPosterior>& qs,
                              const Dataset& ds, int S, std::uint64_t seed) {
  const Eigen::Index n = ds.test.Y.rows();
  const Eigen::Index P = ds.test.Y.cols();
  Prediction out;
  if (models.pooled) {
    Prediction pooled = predict(models.instances[0], qs[0], models.test_views[0].X, S, seed);
    out.mean.resize(n, P);
    out.variance.resize(n, P);
    for (Eigen::Index p = 0; p < P; ++p)
      for (Eigen::Index i = 0; i < n; ++i) {
        out.mean(i, p) = pooled.mean(p * n + i, 0);
        out.variance(i, p) = pooled.variance(p * n + i, 0);
      }
    return out;
  }
  if (models.instances.size() == 1) {
    out = predict(models.instances[0], qs[0], models.test_views[0].X, S, seed);
    return out;
  }
  out.mean.resize(n, P);
  out.variance.resize(n, P);
  for (std::size_t i = 0; i < models.instances.size(); ++i) {
    Prediction one = predict(models.instances[i], qs[i], models.test_views[i].X, S,
                             derive_seed(seed, static_cast<std::uint64_t>(i)));
    out.mean.col(static_cast<Eigen::Index>(i)) = one.mean.col(0);
    out.variance.col(static_cast<Eigen::Index>(i)) = one.variance.col(0);
  }
  return out;
}

// Count-weighted NLPD aggregate over instances; per-entry independence makes
// the squared standard errors additive.
inline NlpdResult nlpd_all(const RunModels& models, const std::vector<MoGPosterior>& qs, int S,
                           std::uint64_t seed) {
  NlpdResult agg;
  double var_acc = 0.0;
  for (std::size_t i = 0; i < models.instances.size(); ++i) {
    const SupervisedSet& v = models.test_views[i];
    NlpdResult r = nlpd(models.instances[i], qs[i], v.X, v.Y, &v.mask, S,
                        derive_seed(seed, static_cast<std::uint64_t>(i)));
    const double c = double(r.count);
    agg.lse += c * r.lse;
    agg.avg_log += c * r.avg_log;
    var_acc += (c * r.se) * (c * r.se);
    agg.count += r.count;
  }
  if (agg.count == 0) throw InputError("NLPD over an empty test set");
  agg.lse /= double(agg.count);
  agg.avg_log /= double(agg.count);
  agg.se = std::sqrt(var_acc) / double(agg.count);
  return agg;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArtifacts {
  std::vector<TrainResult> results;
  std::vector<std::string> log_files;
  std::string checkpoint_file;
  std::string summary_file;
  double wall_seconds = 0.0;
};

inline TrainArtifacts run_train(const RunConfig& cfg) {
  validate_run_config(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  Dataset ds = load_dataset(cfg);
  RunModels models = assemble_models(cfg.model, ds);
  std::vector<MoGPosterior> qs = init_run(cfg, &models);

  detail::ensure_dir(cfg.output_dir);
  const std::filesystem::path out(cfg.output_dir);
  detail::write_text((out / "config.json").string(), serialize_run_config(cfg).dump(2) + "\n");

  TrainArtifacts art;
  for (std::size_t i = 0; i < models.instances.size(); ++i) {
    TrainResult r = fit(&models.instances[i], &qs[i], models.train_views[i], cfg.train);
    const std::string log_name = models.instances.size() == 1
                                     ? "training_log.csv"
                                     : "training_log_" + models.instances[i].name + ".csv";
    r.log.write_csv((out / log_name).string());
    art.log_files.push_back(log_name);
    art.results.push_back(std::move(r));
  }
  art.checkpoint_file = (out / "checkpoint.txt").string();
  write_checkpoint(art.checkpoint_file, cfg, models, qs);

  art.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json summary;
  summary["wall_seconds"] = art.wall_seconds;
  summary["instances"] = json::array();
  for (std::size_t i = 0; i < art.results.size(); ++i) {
    const TrainResult& r = art.results[i];
    summary["instances"].push_back({{"name", models.instances[i].name},
                                    {"stop_reason", r.stop_reason},
                                    {"epochs", r.epochs},
                                    {"elbo", r.final_terms.total},
                                    {"entropy", r.final_terms.ent},
                                    {"cross", r.final_terms.cross},
                                    {"ell", r.final_terms.ell},
                                    {"log_file", art.log_files[i]}});
  }
  summary["checkpoint"] = "checkpoint.txt";
  art.summary_file = (out / "run_summary.json").string();
  detail::write_text(art.summary_file, summary.dump(2) + "\n");
  return art;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

inline ForecastReport run_evaluate(const RunConfig& cfg, const std::string& checkpoint_path) {
  validate_run_config(cfg);
  Dataset ds = load_dataset(cfg);
  RunModels models = assemble_models(cfg.model, ds);
  std::vector<MoGPosterior> qs = init_run(cfg, &models);
  restore_checkpoint(read_checkpoint(checkpoint_path), cfg, &models, &qs);

  Prediction pred = predict_all(models, qs, ds, cfg.eval.predict_samples, cfg.eval.seed);
  Metrics met = metrics(pred, ds.test.Y, &ds.test.mask);
  NlpdResult nl = nlpd_all(models, qs, cfg.eval.nlpd_samples, cfg.eval.seed);
  ForecastReport rep = make_report(met, nl, ds.stats.target_std);

  detail::ensure_dir(cfg.output_dir);
  const std::filesystem::path out(cfg.output_dir);
  std::ostringstream task_csv;
  task_csv << "task,count,rmse,f_var,rmse_orig,f_var_orig\n" << std::setprecision(17);
  for (Eigen::Index p = 0; p < rep.rmse_task.size(); ++p)
    task_csv << ds.task_ids[static_cast<std::size_t>(p)] << ',' << met.count_task(p) << ','
             << rep.rmse_task(p) << ',' << rep.fvar_task(p) << ',' << rep.rmse_task_orig(p) << ','
             << rep.fvar_task_orig(p) << '\n';
  detail::write_text((out / "metrics_task.csv").string(), task_csv.str());

  json ev;
  ev["rmse"] = rep.rmse;
  ev["f_var"] = rep.f_var;
  ev["nlpd"] = rep.nlpd;
  ev["nlpd_avg_log"] = rep.nlpd_avg_log;
  ev["nlpd_se"] = rep.nlpd_se;
  ev["rmse_orig"] = rep.rmse_orig;
  ev["f_var_orig"] = rep.f_var_orig;
  ev["nlpd_orig"] = rep.nlpd_orig;
  ev["nlpd_avg_log_orig"] = rep.nlpd_avg_log_orig;
  ev["per_task"] = json::array();
  for (Eigen::Index p = 0; p < rep.rmse_task.size(); ++p)
    ev["per_task"].push_back({{"task", ds.task_ids[static_cast<std::size_t>(p)]},
                              {"rmse", rep.rmse_task(p)},
                              {"f_var", rep.fvar_task(p)},
                              {"rmse_orig", rep.rmse_task_orig(p)},
                              {"f_var_orig", rep.fvar_task_orig(p)}});
  detail::write_text((out / "evaluation.json").string(), ev.dump(2) + "\n");
  return rep;
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

// m = floor((B/R)^(1/3)) where R is the entry's total group count, floored at
// max_r Q_r so the separable decomposition stays valid.
inline int budget_m(double budget, int R, int max_qr) {
  if (R < 1) throw InputError("budget rule needs at least one group");
  if (budget <= 0.0) throw ConfigError("benchmark.budget must be positive");
  int m = static_cast<int>(std::floor(std::cbrt(budget / double(R))));
  while (double(R) * std::pow(double(m + 1), 3) <= budget) ++m;
  while (m > 0 && double(R) * std::pow(double(m), 3) > budget) --m;
  if (m < max_qr)
    throw ConfigError("benchmark.budget " + std::to_string(budget) +
                      " is too small: the largest group needs m >= " + std::to_string(max_qr));
  return m;
}

struct BenchmarkEntryResult {
  std::string label;
  int m = 0;
  ForecastReport report;
  MatrixXd mean;  // task-space predictive mean, reused for significance
  double train_seconds = 0.0;
  std::vector<std::string> stop_reasons;
};

struct BenchmarkResult {
  std::vector<BenchmarkEntryResult> entries;
  VectorXd ranks;
  std::string table_file, significance_file, curves_file, summary_file;
};

inline BenchmarkResult run_benchmark(const RunConfig& cfg) {
  validate_run_config(cfg);
  if (cfg.benchmark.entries.size() < 2)
    throw ConfigError("benchmark.entries needs at least two models");
  Dataset ds = load_dataset(cfg);

  detail::ensure_dir(cfg.output_dir);
  const std::filesystem::path out(cfg.output_dir);
  detail::write_text((out / "config.json").string(), serialize_run_config(cfg).dump(2) + "\n");

  std::ostringstream curves;
  curves << "model,instance,epoch,seconds,elbo,rmse,nlpd\n" << std::setprecision(10);

  BenchmarkResult res;
  for (const BenchmarkEntry& e : cfg.benchmark.entries) {
    RunConfig ecfg = cfg;
    ecfg.model.family = e.family;
    ecfg.model.scheme = e.scheme;
    ecfg.model.posterior = e.posterior;
    ecfg.model.Qg = e.Qg;
    validate_run_config(ecfg);

    RunModels models = assemble_models(ecfg.model, ds);
    int R = 0, max_qr = 1;
    for (const auto& inst : models.instances)
      for (const auto& g : inst.groups) {
        ++R;
        max_qr = std::max(max_qr, g.size());
      }
    const int m = cfg.benchmark.budget > 0.0 ? budget_m(cfg.benchmark.budget, R, max_qr)
                                             : cfg.model.m;
    ecfg.model.m = m;

    BenchmarkEntryResult er;
    er.label = e.family + (e.family == "ggp" ? "-" + e.scheme : "") +
               (e.posterior == "diagonal" ? "-D" : "-F");

    std::vector<MoGPosterior> qs = init_run(ecfg, &models);
    for (std::size_t i = 0; i < models.instances.size(); ++i) {
      TrainConfig tc = ecfg.train;
      int epoch_base = 0;
      if (cfg.benchmark.curve_every > 0) {
        const SupervisedSet* view = &models.test_views[i];
        const std::string label = er.label, iname = models.instances[i].name;
        const int every = cfg.benchmark.curve_every, S = cfg.benchmark.curve_samples;
        const std::uint64_t cseed = derive_seed(cfg.eval.seed, 0xcu, i);
        tc.epoch_hook = [&curves, &epoch_base, view, label, iname, every, S, cseed, cum = 0.0](
                            const EpochRecord& rec, const ModelSpec& inst,
                            const MoGPosterior& q) mutable {
          cum += rec.seconds;
          const int epoch = epoch_base + rec.epoch;
          if (epoch % every != 0) return;
          Prediction p = predict(inst, q, view->X, S, cseed);
          Metrics met = metrics(p, view->Y, &view->mask);
          NlpdResult nl = nlpd(inst, q, view->X, view->Y, &view->mask, S, cseed);
          curves << label << ',' << iname << ',' << epoch << ',' << cum << ',' << rec.elbo
                 << ',' << met.rmse << ',' << nl.lse << '\n';
        };
      }
      // warm phase at the configured rate, then a polish at a tenth of it:
      // the decayed tail removes constant-step oscillation near an optimum
      // without changing the per-entry epoch budget
      const int warm = std::max(1, (ecfg.train.max_epochs * 7) / 10);
      const int polish = ecfg.train.max_epochs - warm;
      tc.max_epochs = warm;
      TrainResult r = fit(&models.instances[i], &qs[i], models.train_views[i], tc);
      for (const auto& rec : r.log.epochs) er.train_seconds += rec.seconds;
      std::string stop = r.stop_reason;
      if (polish > 0) {
        epoch_base = r.epochs;
        tc.max_epochs = polish;
        tc.lr = ecfg.train.lr * 0.1;
        TrainResult r2 = fit(&models.instances[i], &qs[i], models.train_views[i], tc);
        for (const auto& rec : r2.log.epochs) er.train_seconds += rec.seconds;
        stop = r2.stop_reason;
      }
      er.stop_reasons.push_back(stop);
    }

    Prediction pred = predict_all(models, qs, ds, cfg.eval.predict_samples, cfg.eval.seed);
    Metrics met = metrics(pred, ds.test.Y, &ds.test.mask);
    NlpdResult nl = nlpd_all(models, qs, cfg.eval.nlpd_samples, cfg.eval.seed);
    er.report = make_report(met, nl, ds.stats.target_std);
    er.mean = pred.mean;
    er.m = m;
    res.entries.push_back(std::move(er));
  }

  // mean rank over RMSE and NLPD across entries
  std::vector<std::pair<double, double>> scores;
  for (const auto& er : res.entries) scores.push_back({er.report.rmse, er.report.nlpd});
  res.ranks = m_rank(scores);
  for (std::size_t i = 0; i < res.entries.size(); ++i)
    res.entries[i].report.m_rank = res.ranks(static_cast<Eigen::Index>(i));

  std::ostringstream table;
  table << "model,m,rmse,nlpd,nlpd_avg_log,f_var,rmse_orig,nlpd_orig,f_var_orig,m_rank\n"
        << std::setprecision(10);
  for (const auto& er : res.entries)
    table << er.label << ',' << er.m << ',' << er.report.rmse << ',' << er.report.nlpd << ','
          << er.report.nlpd_avg_log << ',' << er.report.f_var << ',' << er.report.rmse_orig << ','
          << er.report.nlpd_orig << ',' << er.report.f_var_orig << ',' << er.report.m_rank << '\n';
  res.table_file = (out / "benchmark_table.csv").string();
  detail::write_text(res.table_file, table.str());

  std::ostringstream sig;
  sig << "model_a,model_b,lo,hi,mean_diff,significant\n" << std::setprecision(10);
  for (std::size_t a = 0; a < res.entries.size(); ++a)
    for (std::size_t b = a + 1; b < res.entries.size(); ++b) {
      SignificanceResult s =
          mc_significance(res.entries[a].mean, res.entries[b].mean, ds.test.Y, &ds.test.mask,
                          cfg.eval.bootstrap, cfg.eval.seed);
      sig << res.entries[a].label << ',' << res.entries[b].label << ',' << s.lo << ',' << s.hi
          << ',' << s.mean_diff << ',' << (s.significant ? 1 : 0) << '\n';
    }
  res.significance_file = (out / "significance_matrix.csv").string();
  detail::write_text(res.significance_file, sig.str());

  res.curves_file = (out / "curves.csv").string();
  detail::write_text(res.curves_file, curves.str());

  json summary;
  summary["entries"] = json::array();
  for (std::size_t i = 0; i < res.entries.size(); ++i) {
    const auto& er = res.entries[i];
    summary["entries"].push_back({{"model", er.label},
                                  {"m", er.m},
                                  {"rmse", er.report.rmse},
                                  {"nlpd", er.report.nlpd},
                                  {"f_var", er.report.f_var},
                                  {"m_rank", er.report.m_rank},
                                  {"train_seconds", er.train_seconds},
                                  {"stop_reasons", er.stop_reasons}});
  }
  res.summary_file = (out / "benchmark_summary.json").string();
  detail::write_text(res.summary_file, summary.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArtifacts {
  std::string observations_file, sites_file, truth_file;
  int P = 0;
  long n = 0;
};

inline SynthArtifacts run_synth(const RunConfig& cfg) {
  SynthConfig sc;
  sc.P = cfg.synth.P;
  sc.Qg = cfg.synth.Qg;
  sc.n = cfg.synth.n;
  sc.noise_std = cfg.synth.noise_std;
  sc.seed = cfg.synth.seed;
  sc.interval_minutes = cfg.synth.interval_minutes;
  sc.period = cfg.synth.period;
  sc.time_ls = cfg.synth.time_ls;
  sc.node_rbf_ls = cfg.synth.node_rbf_ls;
  sc.weight_ls = cfg.synth.weight_ls;
  sc.site_ls = cfg.synth.site_ls;
  sc.node_var = cfg.synth.node_var;
  sc.weight_var = cfg.synth.weight_var;
  sc.unit_weights = cfg.synth.unit_weights;
  if (cfg.synth.sites.size() > 0) {
    sc.sites = cfg.synth.sites;
  } else {
    sc.sites.resize(sc.P, 2);
    for (int p = 0; p < sc.P; ++p) sc.sites.row(p) << cfg.synth.site_spacing * p, 0.0;
  }

  SynthResult r = synth_gprn(sc);
  detail::ensure_dir(cfg.output_dir);
  const std::filesystem::path out(cfg.output_dir);
  SynthArtifacts art;
  art.observations_file = (out / "observations.csv").string();
  art.sites_file = (out / "sites.csv").string();
  art.truth_file = (out / "truth.csv").string();
  write_series_csv(r.series, art.observations_file, art.sites_file);
  write_truth_csv(r, art.truth_file);
  art.P = sc.P;
  art.n = static_cast<long>(sc.n);
  return art;
}

}  // namespace ggp
