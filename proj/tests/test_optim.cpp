#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ggp/model.hpp"
#include "ggp/optim.hpp"
#include "ggp/vi.hpp"
#include "test_support.hpp"

using namespace ggp;

namespace {

MatrixXd two_sites() {
  MatrixXd s(2, 2);
  s << 0.0, 0.0, 0.8, 0.3;
  return s;
}

struct Setup {
  ModelSpec model;
  MoGPosterior q;
  SupervisedSet data;
};

Setup small_problem(std::uint64_t seed) {
  Setup s;
  s.model = make_ggp_model("solar-rows", 2, two_sites());
  Rng rng(seed);
  s.data.X = 3.0 * testsup::random_matrix(rng, 24, 7);
  s.data.Y = testsup::random_matrix(rng, 24, 2);
  s.data.mask = MatrixXd::Ones(24, 2);
  init_inducing(s.model, s.data.X, 3, seed + 1);
  s.q = init_posterior(s.model, 3, 1, CovType::Diagonal);
  return s;
}

}  // namespace

TEST_CASE("first Adam step matches the hand-computed update") {
  ParamStore s;
  s.add("x", MatrixXd::Zero(1, 1));
  TrainConfig cfg;
  cfg.lr = 0.01;
  AdamState adam(cfg);
  adam.init(s);

  const double g = 2.0;
  adam.step(&s, {MatrixXd::Constant(1, 1, g)});
  // bias correction cancels at t = 1: update = lr * g / (|g| + eps)
  REQUIRE(s.values[0](0, 0) == Catch::Approx(0.01 * g / (std::abs(g) + cfg.eps)).epsilon(1e-12));

  SECTION("ascent follows the gradient sign") {
    ParamStore neg;
    neg.add("x", MatrixXd::Zero(1, 1));
    AdamState a2(cfg);
    a2.init(neg);
    a2.step(&neg, {MatrixXd::Constant(1, 1, -3.0)});
    REQUIRE(neg.values[0](0, 0) < 0.0);
  }
}

TEST_CASE("Adam ascends a concave quadratic to its maximizer") {
  Rng rng(3);
  VectorXd target = testsup::random_matrix(rng, 4, 1);
  ParamStore s;
  s.add("x", MatrixXd::Zero(4, 1));
  TrainConfig cfg;
  cfg.lr = 0.05;
  AdamState adam(cfg);
  adam.init(s);

  for (int it = 0; it < 600; ++it) {
    MatrixXd grad = target - s.values[0];  // d/dx of -1/2 ||x - target||^2
    adam.step(&s, {grad});
  }
  REQUIRE((s.values[0] - target).cwiseAbs().maxCoeff() < 1e-2);
}

TEST_CASE("Adam rejects malformed or non-finite gradients") {
  ParamStore s;
  s.add("x", MatrixXd::Zero(2, 2));
  AdamState adam;
  adam.init(s);
  REQUIRE_THROWS_AS(adam.step(&s, {}), StructureError);
  MatrixXd bad = MatrixXd::Zero(2, 2);
  bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(adam.step(&s, {bad}), NumericError);
  REQUIRE(s.values[0].isZero());  // rejected step leaves parameters untouched
}

TEST_CASE("training raises the ELBO on a small grouped model") {
  Setup s = small_problem(11);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.max_epochs = 40;
  cfg.tol = 0.0;
  cfg.mc_samples = 20;
  cfg.seed = 5;

  TrainResult r = fit(&s.model, &s.q, s.data, cfg);
  REQUIRE(r.stop_reason == "max_epochs");
  REQUIRE(r.epochs == 40);
  REQUIRE(r.log.epochs.size() == 40);
  REQUIRE(r.log.epochs.back().elbo > r.log.epochs.front().elbo);
  REQUIRE(r.final_terms.total == r.log.epochs.back().elbo);
  for (const auto& e : r.log.epochs) {
    REQUIRE(std::isfinite(e.elbo));
    REQUIRE(e.grad_norm >= 0.0);
    REQUIRE(e.seconds >= 0.0);
  }
}

TEST_CASE("a vanishing learning rate triggers the convergence stop") {
  Setup s = small_problem(13);
  TrainConfig cfg;
  cfg.lr = 1e-12;
  cfg.max_epochs = 50;
  cfg.tol = 1e-5;
  cfg.mc_samples = 10;
  cfg.seed = 9;
  cfg.resample_per_epoch = false;  // common random numbers make the rule sharp

  TrainResult r = fit(&s.model, &s.q, s.data, cfg);
  REQUIRE(r.stop_reason == "converged");
  REQUIRE(r.epochs == 1);
  REQUIRE(r.log.epochs.size() == 2);
}

TEST_CASE("the wall-clock budget stops training after the first step") {
  Setup s = small_problem(17);
  TrainConfig cfg;
  cfg.max_epochs = 50;
  cfg.tol = 0.0;
  cfg.mc_samples = 10;
  cfg.wall_clock_s = 1e-9;

  TrainResult r = fit(&s.model, &s.q, s.data, cfg);
  REQUIRE(r.stop_reason == "wall_clock");
  REQUIRE(r.epochs == 1);
}

TEST_CASE("training is deterministic for a fixed configuration") {
  for (bool resample : {false, true}) {
    Setup a = small_problem(23);
    Setup b = small_problem(23);
    TrainConfig cfg;
    cfg.lr = 0.01;
    cfg.max_epochs = 6;
    cfg.tol = 0.0;
    cfg.mc_samples = 8;
    cfg.seed = 31;
    cfg.resample_per_epoch = resample;

    TrainResult ra = fit(&a.model, &a.q, a.data, cfg);
    TrainResult rb = fit(&b.model, &b.q, b.data, cfg);
    REQUIRE(ra.log.epochs.size() == rb.log.epochs.size());
    for (std::size_t i = 0; i < ra.log.epochs.size(); ++i)
      REQUIRE(ra.log.epochs[i].elbo == rb.log.epochs[i].elbo);
  }
}

TEST_CASE("per-epoch resampling changes the Monte Carlo term") {
  Setup a = small_problem(29);
  Setup b = small_problem(29);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.max_epochs = 3;
  cfg.tol = 0.0;
  cfg.mc_samples = 8;
  cfg.seed = 31;

  cfg.resample_per_epoch = false;
  TrainResult fixed = fit(&a.model, &a.q, a.data, cfg);
  cfg.resample_per_epoch = true;
  TrainResult fresh = fit(&b.model, &b.q, b.data, cfg);
  REQUIRE(fixed.log.epochs[0].ell != fresh.log.epochs[0].ell);
  REQUIRE(fixed.log.epochs[0].ent == fresh.log.epochs[0].ent);  // only draws differ
}

TEST_CASE("a diverged likelihood surfaces as a numeric error") {
  Setup s = small_problem(37);
  s.model.noise.log_noise_var.setConstant(-800.0);  // exp(-lv) overflows
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.mc_samples = 5;
  REQUIRE_THROWS_AS(fit(&s.model, &s.q, s.data, cfg), NumericError);
}

TEST_CASE("the training log round-trips through CSV") {
  TrainingLog log;
  for (int e = 0; e < 3; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.elbo = -100.0 + e;
    r.ent = 1.0;
    r.cross = -2.0;
    r.ell = -99.0 + e;
    r.grad_norm = 0.5;
    r.seconds = 0.01;
    log.epochs.push_back(r);
  }
  std::ostringstream os;
  log.write_csv(os);
  std::istringstream is(os.str());
  std::string line;
  REQUIRE(std::getline(is, line));
  REQUIRE(line == "epoch,elbo,entropy,cross,ell,grad_norm,seconds");
  int rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ++rows;
    if (rows == 2) REQUIRE(line.substr(0, 6) == "1,-99,");
  }
  REQUIRE(rows == 3);
  REQUIRE_THROWS_AS(log.write_csv("/nonexistent-dir/log.csv"), LoadError);
}
