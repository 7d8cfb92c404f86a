#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <catch2/catch_amalgamated.hpp>

#include "ggp/ggp.hpp"

using namespace ggp;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

const fs::path& scratch_root() {
  static fs::path root = [] {
    std::string tmpl = (fs::temp_directory_path() / "ggp_cli_XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    return fs::path(tmpl);
  }();
  return root;
}

fs::path scratch(const std::string& name) {
  fs::path dir = scratch_root() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& body) {
  std::ofstream f(p);
  f << body;
}

// Synthetic two-site observation set shared by the end-to-end tests.
const fs::path& tiny_data_dir() {
  static fs::path dir = [] {
    fs::path d = scratch("tiny_data");
    RunConfig c;
    c.synth.P = 2;
    c.synth.Qg = 1;
    c.synth.n = 240;
    c.synth.noise_std = 0.2;
    c.synth.seed = 11;
    c.output_dir = d.string();
    run_synth(c);
    return d;
  }();
  return dir;
}

RunConfig tiny_run_config(const fs::path& out_dir) {
  RunConfig cfg;
  cfg.data.observations = (tiny_data_dir() / "observations.csv").string();
  cfg.data.sites = (tiny_data_dir() / "sites.csv").string();
  cfg.data.lags = 2;
  cfg.data.horizon_steps = 1;
  cfg.data.train_fraction = 0.7;
  cfg.model.family = "ggp";
  cfg.model.scheme = "solar-rows";
  cfg.model.P = 2;
  cfg.model.Qg = 1;
  cfg.model.m = 4;
  cfg.model.K = 1;
  cfg.model.posterior = "diagonal";
  cfg.train.max_epochs = 3;
  cfg.train.mc_samples = 20;
  cfg.train.lr = 0.01;
  cfg.train.seed = 7;
  cfg.eval.predict_samples = 60;
  cfg.eval.nlpd_samples = 40;
  cfg.eval.bootstrap = 200;
  cfg.eval.seed = 3;
  cfg.output_dir = out_dir.string();
  return cfg;
}

// Timing is the one nondeterministic log column; drop it before comparing.
std::string strip_seconds(const std::string& csv) {
  std::istringstream in(csv);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) out << line.substr(0, line.rfind(',')) << '\n';
  return out.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(GGP_CLI) + " " + args + " >/dev/null 2>&1";
  int st = std::system(cmd.c_str());
  REQUIRE(st != -1);
  REQUIRE(WIFEXITED(st));
  return WEXITSTATUS(st);
}

}  // namespace

TEST_CASE("config serialization round trip is the identity", "[cli][config]") {
  json j = {{"data",
             {{"observations", "obs.csv"},
              {"sites", "sites.csv"},
              {"lags", 4},
              {"day_window", {{"enabled", true}, {"start_minute", 420}}}}},
            {"model", {{"family", "gprn"}, {"Qg", 3}, {"posterior", "kron-full"}}},
            {"train", {{"seed", 18446744073709551615ull}, {"flags", {{"noise", false}}}}},
            {"benchmark",
             {{"budget", 4096.0},
              {"entries", json::array({{{"family", "ggp"}, {"scheme", "wind-offdiag"}}})}}},
            {"synth", {{"sites", json::array({{0.0, 0.0}, {1.5, -2.0}})}}},
            {"output_dir", "runs/x"}};
  RunConfig a = parse_run_config(j);
  json ser = serialize_run_config(a);
  RunConfig b = parse_run_config(ser);
  REQUIRE(serialize_run_config(b) == ser);

  // sampled fields survive the trip
  REQUIRE(b.data.lags == 4);
  REQUIRE(b.model.kernel.lags == 4);
  REQUIRE(b.data.window.enabled);
  REQUIRE(b.data.window.start_minute == 420);
  REQUIRE(b.model.family == "gprn");
  REQUIRE(b.model.posterior == "kron-full");
  REQUIRE(b.train.seed == 18446744073709551615ull);
  REQUIRE_FALSE(b.train.flags.train_noise);
  REQUIRE(b.train.flags.train_hyper);
  REQUIRE(b.benchmark.entries.size() == 1);
  REQUIRE(b.benchmark.entries[0].scheme == "wind-offdiag");
  REQUIRE(b.synth.sites.rows() == 2);
  REQUIRE(b.synth.sites(1, 1) == -2.0);
}

TEST_CASE("config errors name the failing field", "[cli][config]") {
  REQUIRE_THROWS_WITH(parse_run_config({{"modle", json::object()}}),
                      ContainsSubstring("config.modle"));
  REQUIRE_THROWS_WITH(parse_run_config({{"model", {{"fam", "ggp"}}}}),
                      ContainsSubstring("model.fam"));
  REQUIRE_THROWS_WITH(parse_run_config({{"data", {{"lags", "three"}}}}),
                      ContainsSubstring("bad value for data.lags"));
  REQUIRE_THROWS_WITH(parse_run_config({{"benchmark", {{"entries", 7}}}}),
                      ContainsSubstring("benchmark.entries"));
  REQUIRE_THROWS_WITH(parse_run_config({{"synth", {{"sites", json::array({{1.0}})}}}}),
                      ContainsSubstring("synth.sites"));
  REQUIRE_THROWS_AS(parse_run_config({{"data", 5}}), ConfigError);
}

TEST_CASE("config validation rejects bad shapes and names", "[cli][config]") {
  RunConfig c = tiny_run_config(scratch("val"));
  SECTION("family") {
    c.model.family = "deep";
    REQUIRE_THROWS_WITH(validate_run_config(c), ContainsSubstring("model.family"));
  }
  SECTION("scheme") {
    c.model.scheme = "custom";
    REQUIRE_THROWS_WITH(validate_run_config(c), ContainsSubstring("model.scheme"));
  }
  SECTION("posterior") {
    c.model.posterior = "full";
    REQUIRE_THROWS_WITH(validate_run_config(c), ContainsSubstring("model.posterior"));
  }
  SECTION("train fraction") {
    c.data.train_fraction = 1.0;
    REQUIRE_THROWS_WITH(validate_run_config(c), ContainsSubstring("train_fraction"));
  }
  SECTION("counts") {
    c.model.m = 0;
    REQUIRE_THROWS_WITH(validate_run_config(c), ContainsSubstring("model.m"));
  }
  SECTION("bootstrap floor") {
    c.eval.bootstrap = 99;
    REQUIRE_THROWS_WITH(validate_run_config(c), ContainsSubstring("eval.bootstrap"));
  }
}

TEST_CASE("budget rule picks the largest affordable m", "[cli][benchmark]") {
  // R * m^3 <= B < R * (m+1)^3
  REQUIRE(budget_m(20.0 * 200 * 200 * 200, 20, 1) == 200);
  REQUIRE(budget_m(160000000.0, 110, 1) == 113);
  REQUIRE(budget_m(27.0, 1, 1) == 3);  // exact cube boundary

  for (double B : {64.0, 5.0e3, 7.7e5, 1.6e8})
    for (int R : {1, 3, 20, 110}) {
      if (B < double(R)) continue;
      const int m = budget_m(B, R, 1);
      REQUIRE(double(R) * std::pow(double(m), 3) <= B);
      REQUIRE(B < double(R) * std::pow(double(m + 1), 3));
    }

  // infeasible: the largest group's latent count caps the floor
  REQUIRE_THROWS_AS(budget_m(100.0, 10, 5), ConfigError);
  REQUIRE_THROWS_AS(budget_m(0.0, 10, 1), ConfigError);
}

TEST_CASE("per-family data views slice and pool correctly", "[cli][assemble]") {
  RunConfig cfg = tiny_run_config(scratch("views"));
  Dataset ds = load_dataset(cfg);
  const Eigen::Index n = ds.test.Y.rows();
  REQUIRE(n > 20);

  SECTION("igp trains one single-task model per site") {
    cfg.model.family = "igp";
    RunModels rm = assemble_models(cfg.model, ds);
    REQUIRE(rm.instances.size() == 2);
    REQUIRE_FALSE(rm.pooled);
    for (int p = 0; p < 2; ++p) {
      REQUIRE(rm.instances[p].P == 1);
      REQUIRE(rm.test_views[p].Y.cols() == 1);
      REQUIRE(rm.test_views[p].Y.col(0) == ds.test.Y.col(p));
      REQUIRE(rm.test_views[p].X == ds.test.X);
    }
  }

  SECTION("mtg pools tasks into rows of [time, own lags, lat, lon]") {
    cfg.model.family = "mtg";
    RunModels rm = assemble_models(cfg.model, ds);
    REQUIRE(rm.instances.size() == 1);
    REQUIRE(rm.pooled);
    const SupervisedSet& v = rm.test_views[0];
    REQUIRE(v.X.rows() == 2 * n);
    REQUIRE(v.X.cols() == 1 + ds.lags + 2);
    // task-1 block starts at row n; spot-check its first row
    REQUIRE(v.X(n, 0) == ds.test.X(0, 0));
    for (int a = 0; a < ds.lags; ++a)
      REQUIRE(v.X(n, 1 + a) == ds.test.X(0, 1 + 1 * ds.lags + a));
    REQUIRE(v.X(n, 1 + ds.lags) == ds.sites(1, 0));
    REQUIRE(v.X(n, 2 + ds.lags) == ds.sites(1, 1));
    REQUIRE(v.Y(n, 0) == ds.test.Y(0, 1));
    REQUIRE(v.Y(5, 0) == ds.test.Y(5, 0));
  }

  SECTION("task count must match the dataset") {
    cfg.model.P = 3;
    REQUIRE_THROWS_WITH(assemble_models(cfg.model, ds), ContainsSubstring("model.P"));
  }
}

TEST_CASE("checkpoints restore parameters exactly", "[cli][checkpoint]") {
  RunConfig cfg = tiny_run_config(scratch("ckpt"));
  Dataset ds = load_dataset(cfg);
  RunModels a = assemble_models(cfg.model, ds);
  std::vector<MoGPosterior> qa = init_run(cfg, &a);
  // make the state distinctive before saving
  qa[0].means[0][0].setConstant(0.5);
  a.instances[0].noise.log_noise_var(0) = -1.25;
  const std::string path = (fs::path(cfg.output_dir) / "checkpoint.txt").string();
  fs::create_directories(cfg.output_dir);
  write_checkpoint(path, cfg, a, qa);

  RunModels b = assemble_models(cfg.model, ds);
  std::vector<MoGPosterior> qb = init_run(cfg, &b);
  restore_checkpoint(read_checkpoint(path), cfg, &b, &qb);

  TrainFlags all;
  ParamStore sa = pack_params(a.instances[0], qa[0], all);
  ParamStore sb = pack_params(b.instances[0], qb[0], all);
  REQUIRE(sa.names == sb.names);
  for (std::size_t i = 0; i < sa.size(); ++i) REQUIRE(sa.values[i] == sb.values[i]);

  SECTION("config mismatch is rejected before any unpacking") {
    RunConfig other = cfg;
    other.model.m = 5;
    RunModels c = assemble_models(other.model, ds);
    std::vector<MoGPosterior> qc = init_run(other, &c);
    REQUIRE_THROWS_AS(restore_checkpoint(read_checkpoint(path), other, &c, &qc), ConfigError);
    other = cfg;
    other.model.posterior = "kron-full";
    RunModels d = assemble_models(other.model, ds);
    std::vector<MoGPosterior> qd = init_run(other, &d);
    REQUIRE_THROWS_AS(restore_checkpoint(read_checkpoint(path), other, &d, &qd), ConfigError);
  }

  SECTION("garbage files are load errors") {
    const std::string bad = (fs::path(cfg.output_dir) / "bad.txt").string();
    spit(bad, "not a checkpoint\n");
    REQUIRE_THROWS_AS(read_checkpoint(bad), LoadError);
    REQUIRE_THROWS_AS(read_checkpoint("/nonexistent/ck.txt"), LoadError);
  }
}

TEST_CASE("train writes its artifacts and is seed-deterministic", "[cli][train]") {
  RunConfig cfg = tiny_run_config(scratch("train_a"));
  TrainArtifacts art = run_train(cfg);
  const fs::path out(cfg.output_dir);
  REQUIRE(fs::exists(out / "config.json"));
  REQUIRE(fs::exists(out / "checkpoint.txt"));
  REQUIRE(fs::exists(out / "training_log.csv"));
  REQUIRE(fs::exists(out / "run_summary.json"));
  REQUIRE(art.results.size() == 1);
  REQUIRE(art.results[0].epochs >= 1);
  REQUIRE(std::isfinite(art.results[0].final_terms.total));

  json summary = json::parse(slurp(out / "run_summary.json"));
  REQUIRE(summary["instances"].size() == 1);
  REQUIRE(summary["instances"][0]["epochs"].get<int>() == art.results[0].epochs);

  RunConfig cfg2 = tiny_run_config(scratch("train_b"));
  run_train(cfg2);
  REQUIRE(strip_seconds(slurp(out / "training_log.csv")) ==
          strip_seconds(slurp(fs::path(cfg2.output_dir) / "training_log.csv")));

  RunConfig cfg3 = tiny_run_config(scratch("train_c"));
  cfg3.train.seed = 8;
  run_train(cfg3);
  REQUIRE(strip_seconds(slurp(out / "training_log.csv")) !=
          strip_seconds(slurp(fs::path(cfg3.output_dir) / "training_log.csv")));
}

TEST_CASE("evaluate scores a checkpoint reproducibly", "[cli][evaluate]") {
  RunConfig cfg = tiny_run_config(scratch("eval"));
  TrainArtifacts art = run_train(cfg);
  ForecastReport rep = run_evaluate(cfg, art.checkpoint_file);
  const fs::path out(cfg.output_dir);
  REQUIRE(fs::exists(out / "metrics_task.csv"));
  REQUIRE(fs::exists(out / "evaluation.json"));
  REQUIRE(std::isfinite(rep.rmse));
  REQUIRE(rep.rmse > 0.0);
  REQUIRE(std::isfinite(rep.nlpd));
  REQUIRE(rep.nlpd_avg_log >= rep.nlpd - 1e-9);
  REQUIRE(rep.rmse_task.size() == 2);

  json ev = json::parse(slurp(out / "evaluation.json"));
  REQUIRE(ev["per_task"].size() == 2);
  REQUIRE(ev["rmse"].get<double>() == Catch::Approx(rep.rmse));
  REQUIRE(ev.contains("nlpd_avg_log"));

  const std::string first = slurp(out / "evaluation.json");
  run_evaluate(cfg, art.checkpoint_file);
  REQUIRE(slurp(out / "evaluation.json") == first);
}

TEST_CASE("every family trains and evaluates end to end", "[cli][families]") {
  const std::string family = GENERATE(std::string("igp"), std::string("mtg"), std::string("lcm"),
                                      std::string("gprn"));
  RunConfig cfg = tiny_run_config(scratch("fam_" + family));
  cfg.model.family = family;
  cfg.model.Qg = 2;
  if (family == "lcm") cfg.model.K = 2;  // exercise the mixture path too
  cfg.train.max_epochs = 2;
  TrainArtifacts art = run_train(cfg);
  const std::size_t expect = family == "igp" ? 2 : 1;
  REQUIRE(art.results.size() == expect);
  if (family == "igp") {
    REQUIRE(fs::exists(fs::path(cfg.output_dir) / art.log_files[0]));
    REQUIRE(art.log_files[0] != art.log_files[1]);
  }
  ForecastReport rep = run_evaluate(cfg, art.checkpoint_file);
  REQUIRE(std::isfinite(rep.rmse));
  REQUIRE(std::isfinite(rep.nlpd));
  REQUIRE(rep.rmse < 10.0);
}

TEST_CASE("benchmark compares entries under one budget", "[cli][benchmark]") {
  RunConfig cfg = tiny_run_config(scratch("bench"));
  cfg.benchmark.budget = 256.0;  // ggp: R=4 -> m=4; gprn Qg=1: R=3 -> m=4
  cfg.benchmark.curve_every = 2;
  cfg.benchmark.curve_samples = 30;
  cfg.benchmark.entries = {{"ggp", "solar-rows", "diagonal", 1},
                           {"gprn", "solar-rows", "diagonal", 1}};
  cfg.train.max_epochs = 2;
  BenchmarkResult res = run_benchmark(cfg);
  const fs::path out(cfg.output_dir);
  REQUIRE(fs::exists(out / "benchmark_table.csv"));
  REQUIRE(fs::exists(out / "significance_matrix.csv"));
  REQUIRE(fs::exists(out / "curves.csv"));
  REQUIRE(fs::exists(out / "benchmark_summary.json"));

  REQUIRE(res.entries.size() == 2);
  REQUIRE(res.entries[0].label == "ggp-solar-rows-D");
  REQUIRE(res.entries[1].label == "gprn-D");
  REQUIRE(res.entries[0].m == 4);
  REQUIRE(res.entries[1].m == 4);
  REQUIRE(res.ranks.sum() == Catch::Approx(3.0));  // ranks over two models sum to 1+2

  // header + one line per entry
  std::istringstream table(slurp(out / "benchmark_table.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(table, line))
    if (!line.empty()) ++lines;
  REQUIRE(lines == 3);

  // curves captured for both entries
  const std::string curves = slurp(out / "curves.csv");
  REQUIRE_THAT(curves, ContainsSubstring("ggp-solar-rows-D"));
  REQUIRE_THAT(curves, ContainsSubstring("gprn-D"));

  SECTION("identical entries are never significantly different") {
    RunConfig same = tiny_run_config(scratch("bench_same"));
    same.benchmark.budget = 256.0;
    same.benchmark.entries = {{"gprn", "solar-rows", "diagonal", 1},
                              {"gprn", "solar-rows", "diagonal", 1}};
    same.train.max_epochs = 2;
    BenchmarkResult r2 = run_benchmark(same);
    REQUIRE(r2.entries[0].mean == r2.entries[1].mean);
    const std::string sig = slurp(fs::path(same.output_dir) / "significance_matrix.csv");
    REQUIRE_THAT(sig, ContainsSubstring(",0\n"));
    REQUIRE_THAT(sig, !ContainsSubstring(",1\n"));
    REQUIRE(r2.ranks(0) == 1.5);
    REQUIRE(r2.ranks(1) == 1.5);
  }

  SECTION("fewer than two entries is a config error") {
    cfg.benchmark.entries.resize(1);
    REQUIRE_THROWS_AS(run_benchmark(cfg), ConfigError);
  }

  SECTION("a budget below the largest group is rejected") {
    cfg.benchmark.budget = 8.0;  // m would be 1 < Q_r = 2 for the ggp rows
    REQUIRE_THROWS_WITH(run_benchmark(cfg), ContainsSubstring("budget"));
  }
}

TEST_CASE("cli subcommands map failures to exit codes", "[cli][exit]") {
  const fs::path dir = scratch("spawn");
  RunConfig cfg = tiny_run_config(dir / "out");
  const fs::path cfg_path = dir / "run.json";
  spit(cfg_path, serialize_run_config(cfg).dump(2));

  SECTION("usage errors") {
    REQUIRE(run_cli("") != 0);
    REQUIRE(run_cli("train") != 0);  // --config is required
    REQUIRE(run_cli("train -c /nonexistent.json") != 0);
  }

  SECTION("synth then train then evaluate all succeed") {
    RunConfig sy;
    sy.synth.P = 2;
    sy.synth.n = 200;
    sy.synth.seed = 5;
    sy.output_dir = (dir / "data").string();
    const fs::path sy_path = dir / "synth.json";
    spit(sy_path, serialize_run_config(sy).dump(2));
    REQUIRE(run_cli("synth -c " + sy_path.string()) == 0);
    REQUIRE(fs::exists(dir / "data" / "observations.csv"));
    REQUIRE(fs::exists(dir / "data" / "sites.csv"));
    REQUIRE(fs::exists(dir / "data" / "truth.csv"));

    REQUIRE(run_cli("train -c " + cfg_path.string()) == 0);
    REQUIRE(fs::exists(dir / "out" / "checkpoint.txt"));
    REQUIRE(run_cli("evaluate -c " + cfg_path.string() + " --checkpoint " +
                    (dir / "out" / "checkpoint.txt").string()) == 0);
    REQUIRE(fs::exists(dir / "out" / "evaluation.json"));
  }

  SECTION("flag overrides take precedence over the config") {
    REQUIRE(run_cli("train -c " + cfg_path.string() + " --max-epochs 1 --out " +
                    (dir / "out2").string()) == 0);
    json summary = json::parse(slurp(dir / "out2" / "run_summary.json"));
    REQUIRE(summary["instances"][0]["epochs"].get<int>() == 1);
  }

  SECTION("validation failures exit 1") {
    json j = serialize_run_config(cfg);
    j["model"]["family"] = "deep";
    spit(dir / "bad_family.json", j.dump(2));
    REQUIRE(run_cli("train -c " + (dir / "bad_family.json").string()) == 1);

    spit(dir / "unknown_key.json", R"({"modle": {}})");
    REQUIRE(run_cli("train -c " + (dir / "unknown_key.json").string()) == 1);

    json missing = serialize_run_config(cfg);
    missing["data"]["observations"] = (dir / "absent.csv").string();
    spit(dir / "missing_obs.json", missing.dump(2));
    REQUIRE(run_cli("train -c " + (dir / "missing_obs.json").string()) == 1);

    spit(dir / "garbage_ck.txt", "wrecked\n");
    REQUIRE(run_cli("evaluate -c " + cfg_path.string() + " --checkpoint " +
                    (dir / "garbage_ck.txt").string()) == 1);
  }

  SECTION("numeric failures exit 2") {
    json j = serialize_run_config(cfg);
    j["model"]["kernel"]["variance"] = 1e300;  // overflows the likelihood
    j["output_dir"] = (dir / "blow").string();
    spit(dir / "blowup.json", j.dump(2));
    REQUIRE(run_cli("train -c " + (dir / "blowup.json").string()) == 2);
  }
}
