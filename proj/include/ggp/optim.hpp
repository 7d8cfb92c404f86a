#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "ggp/common.hpp"
#include "ggp/vi.hpp"

namespace ggp {

struct EpochRecord;

struct TrainConfig {
  double lr = 0.005;
  double beta1 = 0.09;  // heavy momentum discount; 0.9 is the usual alternative
  double beta2 = 0.99;
  double eps = 1e-8;
  double tol = 1e-5;          // relative ELBO change between successive epochs
  int max_epochs = 200;
  double wall_clock_s = 0.0;  // training-time budget in seconds; 0 = unlimited
  int mc_samples = 200;
  std::uint64_t seed = 0;
  bool resample_per_epoch = false;  // false keeps common random numbers
  TrainFlags flags;
  JitterLadder ladder;
  // optional observer called after each recorded epoch with post-step
  // parameters; runs outside the wall-clock budget
  std::function<void(const EpochRecord&, const ModelSpec&, const MoGPosterior&)> epoch_hook;
};

// Adam over the named blocks of a ParamStore; one shared step counter. The
// update ascends: blocks move along +grad of the objective.
struct AdamState {
  double lr = 0.005, beta1 = 0.09, beta2 = 0.99, eps = 1e-8;
  long steps = 0;
  std::vector<MatrixXd> m, v;

  explicit AdamState(const TrainConfig& cfg)
      : lr(cfg.lr), beta1(cfg.beta1), beta2(cfg.beta2), eps(cfg.eps) {}
  AdamState() = default;

  void init(const ParamStore& s) {
    m.clear();
    v.clear();
    for (const auto& blk : s.values) {
      m.push_back(MatrixXd::Zero(blk.rows(), blk.cols()));
      v.push_back(MatrixXd::Zero(blk.rows(), blk.cols()));
    }
  }

  void step(ParamStore* s, const std::vector<MatrixXd>& grads) {
    if (m.size() != s->size()) init(*s);
    if (grads.size() != s->size()) throw StructureError("gradient count mismatch in Adam step");
    for (std::size_t b = 0; b < s->size(); ++b)
      if (!grads[b].allFinite())
        throw NumericError("non-finite gradient in block " + s->names[b]);
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, double(steps));
    const double c2 = 1.0 - std::pow(beta2, double(steps));
    for (std::size_t b = 0; b < s->size(); ++b) {
      m[b] = beta1 * m[b] + (1.0 - beta1) * grads[b];
      v[b] = beta2 * v[b] + (1.0 - beta2) * grads[b].cwiseProduct(grads[b]);
      MatrixXd mhat = m[b] / c1;
      MatrixXd vhat = v[b] / c2;
      s->values[b] +=
          lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
      if (!s->values[b].allFinite())
        throw NumericError("non-finite parameter after update in block " + s->names[b]);
    }
  }
};

struct EpochRecord {
  int epoch = 0;
  double elbo = 0, ent = 0, cross = 0, ell = 0;
  double grad_norm = 0;
  double seconds = 0;  // gradient evaluation + update time for this epoch
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;

  void write_csv(std::ostream& os) const {
    os << "epoch,elbo,entropy,cross,ell,grad_norm,seconds\n";
    for (const auto& e : epochs)
      os << e.epoch << ',' << e.elbo << ',' << e.ent << ',' << e.cross << ',' << e.ell
         << ',' << e.grad_norm << ',' << e.seconds << '\n';
  }

  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw LoadError("cannot open " + path + " for writing");
    write_csv(f);
  }
};

struct TrainResult {
  std::string stop_reason;  // converged | max_epochs | wall_clock
  int epochs = 0;           // gradient steps applied
  ElboTerms final_terms;
  TrainingLog log;
};

// Full-batch ELBO ascent; one epoch is one gradient step over all trainable
// blocks. The wall-clock budget counts only gradient work, so callers may
// capture metrics between epochs without eating into it.
inline TrainResult fit(ModelSpec* model, MoGPosterior* q, const SupervisedSet& data,
                       const TrainConfig& cfg) {
  if (cfg.max_epochs < 1) throw InputError("training needs at least one epoch");
  TrainResult out;
  ParamStore store = pack_params(*model, *q, cfg.flags);
  AdamState adam(cfg);
  adam.init(store);

  double prev = 0.0;
  bool have_prev = false;
  double spent = 0.0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();

    ElboConfig ec;
    ec.mc_samples = cfg.mc_samples;
    ec.seed = cfg.resample_per_epoch
                  ? derive_seed(cfg.seed, 0xadau, static_cast<std::uint64_t>(epoch))
                  : cfg.seed;
    ec.ladder = cfg.ladder;

    ElboTerms terms;
    std::vector<MatrixXd> grads;
    double gnorm2 = 0.0;
    {
      ElboGraph graph = build_elbo(*model, *q, data, cfg.flags, ec);
      terms = graph.terms();
      if (!std::isfinite(terms.total))
        throw NumericError("ELBO became non-finite during training");
      graph.tape.backward(graph.total);
      grads.reserve(graph.leaves.size());
      for (std::size_t b = 0; b < graph.leaves.size(); ++b) {
        if (graph.leaves[b].first != store.names[b])
          throw StructureError("graph leaves diverged from the parameter store");
        grads.push_back(graph.tape.grad(graph.leaves[b].second));
        gnorm2 += grads.back().squaredNorm();
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.elbo = terms.total;
    rec.ent = terms.ent;
    rec.cross = terms.cross;
    rec.ell = terms.ell;
    rec.grad_norm = std::sqrt(gnorm2);
    out.final_terms = terms;

    if (have_prev &&
        std::abs(terms.total - prev) / std::max(std::abs(prev), 1e-12) <= cfg.tol) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out.log.epochs.push_back(rec);
      if (cfg.epoch_hook) cfg.epoch_hook(rec, *model, *q);
      out.stop_reason = "converged";
      return out;
    }
    prev = terms.total;
    have_prev = true;

    adam.step(&store, grads);
    unpack_params(store, model, q, cfg.flags);
    ++out.epochs;

    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spent += rec.seconds;
    out.log.epochs.push_back(rec);
    if (cfg.epoch_hook) cfg.epoch_hook(rec, *model, *q);

    if (cfg.wall_clock_s > 0.0 && spent >= cfg.wall_clock_s) {
      out.stop_reason = "wall_clock";
      return out;
    }
  }
  out.stop_reason = "max_epochs";
  return out;
}

}  // namespace ggp
