// ggp — train, evaluate, and benchmark grouped Gaussian process forecasters.
#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ggp/runner.hpp"

namespace {

struct Overrides {
  std::string out;
  std::uint64_t seed = 0;
  int max_epochs = 0;
  double budget = 0.0;
  CLI::Option *out_opt = nullptr, *seed_opt = nullptr, *epochs_opt = nullptr,
              *budget_opt = nullptr;
};

void add_common(CLI::App* cmd, std::string* config_path, Overrides* ov) {
  cmd->add_option("-c,--config", *config_path, "JSON run configuration")
      ->required()
      ->check(CLI::ExistingFile);
  ov->out_opt = cmd->add_option("--out", ov->out, "override output_dir");
  ov->seed_opt = cmd->add_option("--seed", ov->seed, "override train.seed and eval.seed");
}

ggp::RunConfig load_with_overrides(const std::string& path, const Overrides& ov) {
  ggp::RunConfig cfg = ggp::load_run_config(path);
  if (ov.out_opt && ov.out_opt->count()) cfg.output_dir = ov.out;
  if (ov.seed_opt && ov.seed_opt->count()) {
    cfg.train.seed = ov.seed;
    cfg.eval.seed = ov.seed;
    cfg.synth.seed = ov.seed;
  }
  if (ov.epochs_opt && ov.epochs_opt->count()) cfg.train.max_epochs = ov.max_epochs;
  if (ov.budget_opt && ov.budget_opt->count()) cfg.benchmark.budget = ov.budget;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grouped Gaussian process forecasting"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path;
  Overrides ov;

  CLI::App* train = app.add_subcommand("train", "fit a model and write a checkpoint");
  add_common(train, &config_path, &ov);
  ov.epochs_opt = train->add_option("--max-epochs", ov.max_epochs, "override train.max_epochs")
                      ->check(CLI::PositiveNumber);

  CLI::App* evaluate = app.add_subcommand("evaluate", "score a checkpoint on the test split");
  Overrides ov_eval;
  std::string eval_config;
  add_common(evaluate, &eval_config, &ov_eval);
  evaluate->add_option("--checkpoint", checkpoint_path, "checkpoint written by train")
      ->required()
      ->check(CLI::ExistingFile);

  CLI::App* benchmark = app.add_subcommand("benchmark", "compare model families under a budget");
  Overrides ov_bench;
  std::string bench_config;
  add_common(benchmark, &bench_config, &ov_bench);
  ov_bench.epochs_opt =
      benchmark->add_option("--max-epochs", ov_bench.max_epochs, "override train.max_epochs")
          ->check(CLI::PositiveNumber);
  ov_bench.budget_opt =
      benchmark->add_option("--budget", ov_bench.budget, "override benchmark.budget")
          ->check(CLI::PositiveNumber);

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic observation set");
  Overrides ov_synth;
  std::string synth_config;
  add_common(synth, &synth_config, &ov_synth);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      ggp::RunConfig cfg = load_with_overrides(config_path, ov);
      ggp::TrainArtifacts art = ggp::run_train(cfg);
      std::cout << "checkpoint: " << art.checkpoint_file << "\n"
                << "summary:    " << art.summary_file << "\n";
      for (std::size_t i = 0; i < art.results.size(); ++i)
        std::cout << "instance " << i << ": " << art.results[i].stop_reason << " after "
                  << art.results[i].epochs << " epochs, elbo "
                  << art.results[i].final_terms.total << "\n";
    } else if (evaluate->parsed()) {
      ggp::RunConfig cfg = load_with_overrides(eval_config, ov_eval);
      ggp::ForecastReport rep = ggp::run_evaluate(cfg, checkpoint_path);
      std::cout << "rmse  " << rep.rmse << "  (orig " << rep.rmse_orig << ")\n"
                << "nlpd  " << rep.nlpd << " +/- " << rep.nlpd_se << "  (avg-log "
                << rep.nlpd_avg_log << ")\n"
                << "f-var " << rep.f_var << "\n";
    } else if (benchmark->parsed()) {
      ggp::RunConfig cfg = load_with_overrides(bench_config, ov_bench);
      ggp::BenchmarkResult res = ggp::run_benchmark(cfg);
      std::cout << "table: " << res.table_file << "\n";
      for (const auto& e : res.entries)
        std::cout << e.label << "  m=" << e.m << "  rmse " << e.report.rmse << "  nlpd "
                  << e.report.nlpd << "  m-rank " << e.report.m_rank << "\n";
    } else if (synth->parsed()) {
      ggp::RunConfig cfg = load_with_overrides(synth_config, ov_synth);
      ggp::SynthArtifacts art = ggp::run_synth(cfg);
      std::cout << "observations: " << art.observations_file << "\n"
                << "sites:        " << art.sites_file << "\n"
                << "truth:        " << art.truth_file << "\n";
    }
  } catch (const ggp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ggp::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const ggp::LoadError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return 1;
  } catch (const ggp::StructureError& e) {
    std::cerr << "structure error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
