#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "ggp/common.hpp"
#include "ggp/kron_linalg.hpp"
#include "ggp/model.hpp"
#include "ggp/vi.hpp"

namespace ggp {

// ---------------------------------------------------------------------------
// Predictive sampling
// ---------------------------------------------------------------------------

struct Prediction {
  MatrixXd mean;                  // n × P, Monte Carlo mean of W g
  MatrixXd variance;              // n × P, sample variance of W g plus noise
  std::vector<MatrixXd> samples;  // S noiseless draws, each n × P
};

namespace detail {

// Joint (W, g) draws at each test point from the component-weighted posterior
// marginal. Each point owns an independent, seed-derived stream, so points can
// be processed in any order (or in parallel) with identical results. Per point
// the stream is consumed as: sample → [component pick when K > 1] → group →
// Q_r standard normals.
template <class Fn>
void sample_predictive(const ModelSpec& model, const MoGPosterior& q, const MatrixXd& X,
                       int S, std::uint64_t seed, const JitterLadder& ladder, Fn&& fn) {
  const Eigen::Index n = X.rows();
  const std::size_t R = model.groups.size();
  const int K = q.K;
  VectorXd pi = q.weights();
  VectorXd cdf(K);
  std::partial_sum(pi.data(), pi.data() + K, cdf.data());

  std::vector<PriorBlocks> blocks;
  blocks.reserve(R);
  for (const auto& g : model.groups) blocks.push_back(prior_blocks(g, X, ladder));

  // per (component, group) marginal means and covariance pieces
  std::vector<std::vector<GroupMarginals>> gm(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k)
    for (std::size_t r = 0; r < R; ++r)
      gm[static_cast<std::size_t>(k)].push_back(
          group_marginals(model.groups[r], blocks[r],
                          q.means[static_cast<std::size_t>(k)][r],
                          q.covs[static_cast<std::size_t>(k)][r]));

  const int Q = model.Q();
  VectorXd f(Q);
  for (Eigen::Index pt = 0; pt < n; ++pt) {
    Rng rng(derive_seed(seed, 0x9dedu, static_cast<std::uint64_t>(pt)));
    // point covariance factors per (component, group)
    std::vector<std::vector<CholFactor>> Ls(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k)
      for (std::size_t r = 0; r < R; ++r)
        Ls[static_cast<std::size_t>(k)].push_back(
            chol(gm[static_cast<std::size_t>(k)][r].point_cov(pt), ladder));

    for (int s = 0; s < S; ++s) {
      int k = 0;
      if (K > 1) {
        const double u = rng.uniform();
        while (k + 1 < K && u > cdf(k)) ++k;
      }
      for (std::size_t r = 0; r < R; ++r) {
        const auto& g = model.groups[r];
        const int qr = g.size();
        VectorXd eps(qr);
        for (int a = 0; a < qr; ++a) eps(a) = rng.normal();
        VectorXd fr = gm[static_cast<std::size_t>(k)][r].mean.row(pt).transpose() +
                      Ls[static_cast<std::size_t>(k)][r].L *
                          Eigen::Map<VectorXd>(eps.data(), qr);
        for (int a = 0; a < qr; ++a) f(g.members[static_cast<std::size_t>(a)]) = fr(a);
      }

      VectorXd yhat(model.P);
      if (model.likelihood == LikelihoodKind::GPRNMixing) {
        const int Qg = model.index.Qg;
        for (int i = 0; i < model.P; ++i) {
          double acc = 0.0;
          for (int l = 0; l < Qg; ++l)
            acc += f(model.index.weight_id(i, l)) * f(model.index.node_id(l));
          yhat(i) = acc;
        }
      } else if (model.likelihood == LikelihoodKind::Identity) {
        for (int i = 0; i < model.P; ++i) yhat(i) = f(i);
      } else {
        yhat = model.lcm_weights * f.head(model.lcm_weights.cols());
      }
      fn(pt, s, yhat);
    }
  }
}

}  // namespace detail

inline Prediction predict(const ModelSpec& model, const MoGPosterior& q, const MatrixXd& X,
                          int S, std::uint64_t seed, const JitterLadder& ladder = {}) {
  if (S < 2) throw InputError("predictive sampling needs S >= 2");
  const Eigen::Index n = X.rows();
  Prediction out;
  out.mean = MatrixXd::Zero(n, model.P);
  out.variance = MatrixXd::Zero(n, model.P);
  out.samples.assign(static_cast<std::size_t>(S), MatrixXd::Zero(n, model.P));
  MatrixXd sumsq = MatrixXd::Zero(n, model.P);

  detail::sample_predictive(model, q, X, S, seed, ladder,
                            [&](Eigen::Index pt, int s, const VectorXd& yhat) {
                              out.samples[static_cast<std::size_t>(s)].row(pt) =
                                  yhat.transpose();
                              out.mean.row(pt) += yhat.transpose();
                              sumsq.row(pt) += yhat.array().square().matrix().transpose();
                            });

  out.mean /= double(S);
  VectorXd noise = model.noise.noise_var();
  for (Eigen::Index i = 0; i < n; ++i)
    for (int p = 0; p < model.P; ++p) {
      const double ex2 = sumsq(i, p) / double(S);
      const double var = (ex2 - out.mean(i, p) * out.mean(i, p)) * double(S) / double(S - 1);
      out.variance(i, p) = std::max(var, 0.0) + noise(p);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Negative log predictive density
// ---------------------------------------------------------------------------

// Two estimator readings are reported: `lse` is -log of the Monte Carlo
// predictive density (log-sum-exp over samples); `avg_log` averages the
// per-sample log densities instead. `se` is a delta-method standard error of
// the lse estimate, aggregated over observed entries.
struct NlpdResult {
  double lse = 0;
  double avg_log = 0;
  double se = 0;
  Eigen::Index count = 0;
};

inline NlpdResult nlpd(const ModelSpec& model, const MoGPosterior& q, const MatrixXd& X,
                       const MatrixXd& Y, const MatrixXd* mask, int S, std::uint64_t seed,
                       const JitterLadder& ladder = {}) {
  if (S < 1) throw InputError("NLPD estimation needs S >= 1");
  if (Y.rows() != X.rows() || Y.cols() != model.P) throw InputError("targets misaligned");
  if (mask && (mask->rows() != Y.rows() || mask->cols() != Y.cols()))
    throw InputError("mask shape must match Y");
  const Eigen::Index n = X.rows();

  // per-entry log densities, filled sample by sample
  std::vector<MatrixXd> lp(static_cast<std::size_t>(S));
  for (auto& m : lp) m = MatrixXd::Zero(n, model.P);
  VectorXd lv = model.noise.log_noise_var;
  detail::sample_predictive(model, q, X, S, seed, ladder,
                            [&](Eigen::Index pt, int s, const VectorXd& yhat) {
                              for (int p = 0; p < model.P; ++p) {
                                const double d = Y(pt, p) - yhat(p);
                                lp[static_cast<std::size_t>(s)](pt, p) =
                                    -0.5 * (kLog2Pi + lv(p) +
                                            d * d * std::exp(-lv(p)));
                              }
                            });

  NlpdResult out;
  double var_acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (int p = 0; p < model.P; ++p) {
      if (mask && (*mask)(i, p) == 0.0) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < S; ++s) mx = std::max(mx, lp[static_cast<std::size_t>(s)](i, p));
      double wsum = 0.0, w2sum = 0.0, lsum = 0.0;
      for (int s = 0; s < S; ++s) {
        const double l = lp[static_cast<std::size_t>(s)](i, p);
        const double w = std::exp(l - mx);
        wsum += w;
        w2sum += w * w;
        lsum += l;
      }
      const double wbar = wsum / double(S);
      out.lse += -(mx + std::log(wbar));
      out.avg_log += -lsum / double(S);
      if (S > 1) {
        const double wvar = (w2sum / double(S) - wbar * wbar) * double(S) / double(S - 1);
        var_acc += wvar / (wbar * wbar * double(S));  // Var[-log wbar] by delta method
      }
      ++out.count;
    }
  if (out.count == 0) throw InputError("NLPD over an empty test set");
  out.lse /= double(out.count);
  out.avg_log /= double(out.count);
  out.se = std::sqrt(var_acc) / double(out.count);
  return out;
}

// ---------------------------------------------------------------------------
// Point metrics
// ---------------------------------------------------------------------------

struct Metrics {
  VectorXd rmse_task;
  VectorXd fvar_task;
  VectorXd count_task;
  double rmse = 0;
  double f_var = 0;
};

inline Metrics metrics(const Prediction& pred, const MatrixXd& Y, const MatrixXd* mask = nullptr) {
  if (Y.rows() != pred.mean.rows() || Y.cols() != pred.mean.cols())
    throw InputError("metrics: shape mismatch");
  const Eigen::Index n = Y.rows(), P = Y.cols();
  Metrics m;
  m.rmse_task = VectorXd::Zero(P);
  m.fvar_task = VectorXd::Zero(P);
  m.count_task = VectorXd::Zero(P);
  double se_all = 0.0, var_all = 0.0;
  Eigen::Index total = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index p = 0; p < P; ++p) {
      if (mask && (*mask)(i, p) == 0.0) continue;
      const double d = Y(i, p) - pred.mean(i, p);
      m.rmse_task(p) += d * d;
      m.fvar_task(p) += pred.variance(i, p);
      m.count_task(p) += 1.0;
      se_all += d * d;
      var_all += pred.variance(i, p);
      ++total;
    }
  if (total == 0) throw InputError("metrics over an empty test set");
  for (Eigen::Index p = 0; p < P; ++p) {
    if (m.count_task(p) > 0) {
      m.rmse_task(p) = std::sqrt(m.rmse_task(p) / m.count_task(p));
      m.fvar_task(p) /= m.count_task(p);
    }
  }
  m.rmse = std::sqrt(se_all / double(total));
  m.f_var = var_all / double(total);
  return m;
}

// ---------------------------------------------------------------------------
// Model ranking
// ---------------------------------------------------------------------------

// Ascending ranks, 1-based, ties replaced by the average of their positions.
inline VectorXd rank_avg(const VectorXd& vals) {
  const Eigen::Index n = vals.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return vals(a) < vals(b); });
  VectorXd ranks(n);
  Eigen::Index i = 0;
  while (i < n) {
    Eigen::Index j = i;
    while (j + 1 < n && vals(order[static_cast<std::size_t>(j + 1)]) ==
                            vals(order[static_cast<std::size_t>(i)]))
      ++j;
    const double avg = 0.5 * double(i + j) + 1.0;  // mean of 1-based positions i..j
    for (Eigen::Index k = i; k <= j; ++k) ranks(order[static_cast<std::size_t>(k)]) = avg;
    i = j + 1;
  }
  return ranks;
}

// Mean of each model's RMSE rank and NLPD rank.
inline VectorXd m_rank(const std::vector<std::pair<double, double>>& rmse_nlpd) {
  if (rmse_nlpd.size() < 2) throw InputError("ranking needs at least two models");
  const Eigen::Index M = static_cast<Eigen::Index>(rmse_nlpd.size());
  VectorXd r(M), l(M);
  for (Eigen::Index i = 0; i < M; ++i) {
    r(i) = rmse_nlpd[static_cast<std::size_t>(i)].first;
    l(i) = rmse_nlpd[static_cast<std::size_t>(i)].second;
  }
  return 0.5 * (rank_avg(r) + rank_avg(l));
}

// ---------------------------------------------------------------------------
// Bootstrap significance of an RMSE difference
// ---------------------------------------------------------------------------

struct SignificanceResult {
  double lo = 0;         // 2.5th percentile of the bootstrap difference
  double hi = 0;         // 97.5th percentile
  double mean_diff = 0;  // mean bootstrap rmse(a) - rmse(b)
  bool significant = false;
};

// Resamples test rows with replacement (sample size n) and recomputes the
// RMSE difference between the two prediction sets each time; significance is
// the (0.025, 0.975) interval excluding zero.
inline SignificanceResult mc_significance(const MatrixXd& mean_a, const MatrixXd& mean_b,
                                          const MatrixXd& Y, const MatrixXd* mask, int B,
                                          std::uint64_t seed) {
  if (B < 100) throw InputError("bootstrap needs B >= 100");
  if (mean_a.rows() != Y.rows() || mean_a.cols() != Y.cols() || mean_b.rows() != Y.rows() ||
      mean_b.cols() != Y.cols())
    throw InputError("prediction sets misaligned with targets");
  const Eigen::Index n = Y.rows(), P = Y.cols();
  if (n == 0) throw InputError("significance over an empty test set");

  // per-row sums of squared error and observation counts
  VectorXd sq_a = VectorXd::Zero(n), sq_b = VectorXd::Zero(n), cnt = VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index p = 0; p < P; ++p) {
      if (mask && (*mask)(i, p) == 0.0) continue;
      const double da = Y(i, p) - mean_a(i, p);
      const double db = Y(i, p) - mean_b(i, p);
      sq_a(i) += da * da;
      sq_b(i) += db * db;
      cnt(i) += 1.0;
    }

  Rng rng(derive_seed(seed, 0xb007u));
  std::vector<double> diffs(static_cast<std::size_t>(B));
  double acc = 0.0;
  for (int b = 0; b < B; ++b) {
    double a = 0.0, bb = 0.0, c = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
      a += sq_a(pick);
      bb += sq_b(pick);
      c += cnt(pick);
    }
    const double d = (c > 0.0) ? std::sqrt(a / c) - std::sqrt(bb / c) : 0.0;
    diffs[static_cast<std::size_t>(b)] = d;
    acc += d;
  }
  std::sort(diffs.begin(), diffs.end());
  auto pct = [&](double p) {
    const double pos = p * double(B - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - double(lo);
    if (lo + 1 >= diffs.size()) return diffs.back();
    return diffs[lo] * (1.0 - frac) + diffs[lo + 1] * frac;
  };
  SignificanceResult out;
  out.lo = pct(0.025);
  out.hi = pct(0.975);
  out.mean_diff = acc / double(B);
  out.significant = (out.lo > 0.0) || (out.hi < 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Forecast report
// ---------------------------------------------------------------------------

// Metrics in normalized units plus their de-normalized counterparts given the
// per-task target statistics used during preprocessing. For a z-scored target
// with deviation sigma: rmse scales by sigma, variance by sigma^2, and the log
// density shifts by log sigma.
struct ForecastReport {
  VectorXd rmse_task, fvar_task;
  double rmse = 0, f_var = 0;
  double nlpd = 0, nlpd_avg_log = 0, nlpd_se = 0;
  VectorXd rmse_task_orig, fvar_task_orig;
  double rmse_orig = 0, f_var_orig = 0;
  double nlpd_orig = 0, nlpd_avg_log_orig = 0;
  double m_rank = 0;            // filled when models are compared
  bool significant = false;     // vs the comparison baseline, when computed
  double sig_lo = 0, sig_hi = 0;
};

inline ForecastReport make_report(const Metrics& m, const NlpdResult& nl,
                                  const VectorXd& target_std) {
  const Eigen::Index P = m.rmse_task.size();
  if (target_std.size() != P) throw InputError("target stats misaligned with tasks");
  ForecastReport r;
  r.rmse_task = m.rmse_task;
  r.fvar_task = m.fvar_task;
  r.rmse = m.rmse;
  r.f_var = m.f_var;
  r.nlpd = nl.lse;
  r.nlpd_avg_log = nl.avg_log;
  r.nlpd_se = nl.se;
  r.rmse_task_orig = m.rmse_task.cwiseProduct(target_std);
  r.fvar_task_orig = m.fvar_task.cwiseProduct(target_std.cwiseProduct(target_std));
  double se = 0.0, var = 0.0, cnt = 0.0, logs = 0.0;
  for (Eigen::Index p = 0; p < P; ++p) {
    const double c = m.count_task(p);
    se += c * m.rmse_task(p) * m.rmse_task(p) * target_std(p) * target_std(p);
    var += c * m.fvar_task(p) * target_std(p) * target_std(p);
    logs += c * std::log(target_std(p));
    cnt += c;
  }
  if (cnt > 0.0) {
    r.rmse_orig = std::sqrt(se / cnt);
    r.f_var_orig = var / cnt;
    r.nlpd_orig = nl.lse + logs / cnt;
    r.nlpd_avg_log_orig = nl.avg_log + logs / cnt;
  }
  return r;
}

}  // namespace ggp
