#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ggp/autodiff.hpp"
#include "ggp/common.hpp"
#include "ggp/kron_linalg.hpp"
#include "ggp/model.hpp"

namespace ggp {

// Training/evaluation split handed to the ELBO and the metrics. mask(n, i) is
// 1 when task i is observed at row n, 0 otherwise; masked Y entries may hold
// anything (including NaN) and never reach a likelihood term.
struct SupervisedSet {
  MatrixXd X;     // n × d feature rows
  MatrixXd Y;     // n × P targets
  MatrixXd mask;  // n × P, entries in {0, 1}

  void validate(int P) const {
    if (Y.rows() != X.rows()) throw InputError("X and Y row counts disagree");
    if (mask.rows() != Y.rows() || mask.cols() != Y.cols())
      throw InputError("mask shape must match Y");
    if (Y.cols() != P) throw InputError("Y column count must equal the task count");
  }
};

inline SupervisedSet make_supervised(MatrixXd X, MatrixXd Y) {
  SupervisedSet s;
  s.mask = MatrixXd::Ones(Y.rows(), Y.cols());
  for (Eigen::Index i = 0; i < Y.rows(); ++i)
    for (Eigen::Index j = 0; j < Y.cols(); ++j)
      if (!std::isfinite(Y(i, j))) s.mask(i, j) = 0.0;
  s.X = std::move(X);
  s.Y = std::move(Y);
  return s;
}

// ---------------------------------------------------------------------------
// Posterior parameterization
// ---------------------------------------------------------------------------

enum class CovType { Diagonal, KronFull };

// Unconstrained covariance parameters of one (component, group) block.
//   Diagonal: S = diag(exp(log_diag)), stored m×Q_r (column per function,
//             same layout as the mean).
//   KronFull: S = S_hh ⊗ S_zz with each factor L Lᵀ, L = tril(raw) with
//             exp'd diagonal.
struct CovParams {
  CovType type = CovType::Diagonal;
  MatrixXd log_diag;  // m × Q_r
  MatrixXd raw_hh;    // Q_r × Q_r
  MatrixXd raw_zz;    // m × m

  MatrixXd shh() const {
    if (type != CovType::KronFull) throw StructureError("shh on a diagonal covariance");
    MatrixXd L = raw_hh.triangularView<Eigen::StrictlyLower>();
    L.diagonal() = raw_hh.diagonal().array().exp().matrix();
    return L * L.transpose();
  }

  MatrixXd szz() const {
    if (type != CovType::KronFull) throw StructureError("szz on a diagonal covariance");
    MatrixXd L = raw_zz.triangularView<Eigen::StrictlyLower>();
    L.diagonal() = raw_zz.diagonal().array().exp().matrix();
    return L * L.transpose();
  }

  // Full S as a dense matrix — test scale only.
  MatrixXd dense(Eigen::Index qr, Eigen::Index m) const {
    if (type == CovType::Diagonal) {
      VectorXd d = Eigen::Map<const MatrixXd>(log_diag.data(), qr * m, 1).array().exp();
      return MatrixXd(d.asDiagonal());
    }
    MatrixXd A = shh(), B = szz();
    if (qr * m > 4096) throw StructureError("dense covariance is test-scale only");
    MatrixXd out(qr * m, qr * m);
    for (Eigen::Index i = 0; i < qr; ++i)
      for (Eigen::Index j = 0; j < qr; ++j)
        out.block(i * m, j * m, m, m) = A(i, j) * B;
    return out;
  }

  double logdet(Eigen::Index qr, Eigen::Index m) const {
    if (type == CovType::Diagonal) return log_diag.sum();
    return 2.0 * (double(m) * raw_hh.diagonal().sum() + double(qr) * raw_zz.diagonal().sum());
  }
};

// Mixture-of-Gaussians posterior over all inducing variables; factorizes over
// groups within each component. Means are stored m×Q_r per (component, group),
// column j belonging to member function j — the column-major flattening is the
// function-major vec layout of kron_linalg.
struct MoGPosterior {
  int K = 1;
  VectorXd logits;                           // K
  std::vector<std::vector<MatrixXd>> means;  // [k][r], m × Q_r
  std::vector<std::vector<CovParams>> covs;  // [k][r]

  VectorXd weights() const {
    Eigen::ArrayXd e = (logits.array() - logits.maxCoeff()).exp();
    return (e / e.sum()).matrix();
  }
};

inline MoGPosterior init_posterior(const ModelSpec& model, int m, int K = 1,
                                   CovType type = CovType::Diagonal) {
  if (K < 1) throw InputError("posterior needs K >= 1");
  // Mixing models start from equal weights 1/sqrt(Qg) and zero nodes: the
  // product objective has a saddle at all-zero means, and the positive-weight
  // start both escapes it and picks one of the sign-symmetric basins. Node
  // latents still differentiate deterministically through their features.
  const int n_weights =
      model.likelihood == LikelihoodKind::GPRNMixing ? model.index.P * model.index.Qg : 0;
  const double w0 = n_weights > 0 ? 1.0 / std::sqrt(double(model.index.Qg)) : 0.0;
  MoGPosterior q;
  q.K = K;
  q.logits = VectorXd::Zero(K);
  q.means.resize(static_cast<std::size_t>(K));
  q.covs.resize(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    for (const auto& g : model.groups) {
      const int qr = g.size();
      MatrixXd mu = MatrixXd::Zero(m, qr);
      for (int a = 0; a < qr; ++a)
        if (g.members[static_cast<std::size_t>(a)] < n_weights) mu.col(a).setConstant(w0);
      q.means[static_cast<std::size_t>(k)].push_back(std::move(mu));
      CovParams c;
      c.type = type;
      if (type == CovType::Diagonal) {
        c.log_diag = MatrixXd::Constant(m, qr, std::log(0.1));
      } else {
        c.raw_hh = MatrixXd::Zero(qr, qr);                              // S_hh = I
        c.raw_zz = MatrixXd::Zero(m, m);
        c.raw_zz.diagonal().array() = 0.5 * std::log(0.1);              // S_zz = 0.1 I
      }
      q.covs[static_cast<std::size_t>(k)].push_back(std::move(c));
    }
  }
  return q;
}

// ---------------------------------------------------------------------------
// Value-level posterior marginals (prediction path, no gradients)
// ---------------------------------------------------------------------------

// Per-point marginal of q(f_r) across the group's member functions:
//   mean_n = A_n m, cov_n = K_hh·s_n + S_hh·t_n (KronFull)
//                         | K_hh·s_n + diag(v_n) (Diagonal)
// computed for all points at once.
struct GroupMarginals {
  MatrixXd mean;      // n × Q_r
  VectorXd s;         // prior conditional variance per point
  CovType type;
  MatrixXd Khh;       // Q_r × Q_r
  MatrixXd Shh;       // KronFull only
  VectorXd t;         // KronFull: posterior scale per point
  MatrixXd V;         // Diagonal: n × Q_r per-function posterior variances

  MatrixXd point_cov(Eigen::Index n) const {
    MatrixXd c = Khh * s(n);
    if (type == CovType::KronFull)
      c += Shh * t(n);
    else
      c += MatrixXd(V.row(n).transpose().asDiagonal());
    return c;
  }
};

inline GroupMarginals group_marginals(const GroupSpec& g, const PriorBlocks& b,
                                      const MatrixXd& mean_u, const CovParams& cov) {
  if (mean_u.cols() != g.size()) throw InputError("posterior mean width must equal Q_r");
  GroupMarginals out;
  out.mean = b.A * mean_u;
  out.s = b.cond_var;
  out.type = cov.type;
  out.Khh = b.Khh;
  if (cov.type == CovType::KronFull) {
    out.Shh = cov.shh();
    MatrixXd ASz = b.A * cov.szz();
    out.t = ASz.cwiseProduct(b.A).rowwise().sum().cwiseMax(0.0);
  } else {
    MatrixXd svals = cov.log_diag.array().exp().matrix();  // m × Q_r
    out.V = (b.A.cwiseProduct(b.A) * svals).cwiseMax(0.0);
  }
  return out;
}

struct MarginalGaussian {
  VectorXd mean;
  MatrixXd cov;
};

inline MarginalGaussian marginal_qfn(const GroupSpec& g, const PriorBlocks& b,
                                     const MatrixXd& mean_u, const CovParams& cov,
                                     Eigen::Index n) {
  GroupMarginals gm = group_marginals(g, b, mean_u, cov);
  return MarginalGaussian{gm.mean.row(n).transpose(), gm.point_cov(n)};
}

// ---------------------------------------------------------------------------
// Dense MoG entropy bound (oracle-facing; production entropy lives on the tape)
// ---------------------------------------------------------------------------

inline double gaussian_logpdf(const VectorXd& x, const VectorXd& mu, const MatrixXd& cov) {
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("logpdf covariance not PD");
  MatrixXd L = llt.matrixL();
  VectorXd w = L.triangularView<Eigen::Lower>().solve(x - mu);
  const double logdet = 2.0 * L.diagonal().array().log().sum();
  return -0.5 * (double(x.size()) * kLog2Pi + logdet + w.squaredNorm());
}

// −Σ_k π_k log Σ_l π_l N(m_k; m_l, S_k + S_l)
inline double mog_entropy_bound(const VectorXd& pi, const std::vector<VectorXd>& means,
                                const std::vector<MatrixXd>& covs) {
  const std::size_t K = means.size();
  if (pi.size() != static_cast<Eigen::Index>(K) || covs.size() != K)
    throw InputError("mixture sizes disagree");
  double acc = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    VectorXd lps(static_cast<Eigen::Index>(K));
    for (std::size_t l = 0; l < K; ++l)
      lps(static_cast<Eigen::Index>(l)) =
          std::log(pi(static_cast<Eigen::Index>(l))) +
          gaussian_logpdf(means[k], means[l], covs[k] + covs[l]);
    const double mx = lps.maxCoeff();
    acc -= pi(static_cast<Eigen::Index>(k)) * (mx + std::log((lps.array() - mx).exp().sum()));
  }
  return acc;
}

// Exact Gaussian entropy (K = 1): (D/2)(1 + log 2π) + ½ logdet S.
inline double gaussian_entropy(double logdet, Eigen::Index D) {
  return 0.5 * double(D) * (1.0 + kLog2Pi) + 0.5 * logdet;
}

// ---------------------------------------------------------------------------
// Parameter store: named unconstrained blocks shared by Adam and the tape
// ---------------------------------------------------------------------------

struct TrainFlags {
  bool train_hyper = true;
  bool train_z = true;
  bool train_noise = true;
  bool train_variational = true;
  bool train_lcm_weights = true;
};

struct ParamStore {
  std::vector<std::string> names;
  std::vector<MatrixXd> values;

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }

  void add(std::string name, MatrixXd v) {
    names.push_back(std::move(name));
    values.push_back(std::move(v));
  }

  std::size_t size() const { return names.size(); }
};

namespace detail {

// One canonical traversal order for pack, unpack, and the tape builder.
template <class Fn>
void for_each_block(const ModelSpec& model, const MoGPosterior& q, const TrainFlags& f,
                    Fn&& fn) {
  for (std::size_t r = 0; r < model.groups.size(); ++r) {
    const auto& g = model.groups[r];
    const std::string tag = "g" + std::to_string(g.id);
    if (f.train_hyper) {
      fn(tag + ".kern.x.logh", MatrixXd(g.input_kernel.log_hyper()));
      if (g.fn_kernel) fn(tag + ".kern.h.logh", MatrixXd(g.fn_kernel->log_hyper()));
    }
    if (f.train_z) fn(tag + ".Z", g.Z);
  }
  if (f.train_noise) fn("noise.logvar", MatrixXd(model.noise.log_noise_var));
  if (model.likelihood == LikelihoodKind::LCM && f.train_lcm_weights)
    fn("lcm.W", model.lcm_weights);
  if (f.train_variational) {
    fn("q.logits", MatrixXd(q.logits));
    for (int k = 0; k < q.K; ++k)
      for (std::size_t r = 0; r < model.groups.size(); ++r) {
        const std::string tag =
            "q.k" + std::to_string(k) + ".g" + std::to_string(model.groups[r].id);
        fn(tag + ".mean", q.means[static_cast<std::size_t>(k)][r]);
        const CovParams& c = q.covs[static_cast<std::size_t>(k)][r];
        if (c.type == CovType::Diagonal) {
          fn(tag + ".logdiag", c.log_diag);
        } else {
          fn(tag + ".raw_hh", c.raw_hh);
          fn(tag + ".raw_zz", c.raw_zz);
        }
      }
  }
}

}  // namespace detail

inline ParamStore pack_params(const ModelSpec& model, const MoGPosterior& q,
                              const TrainFlags& f = {}) {
  ParamStore s;
  detail::for_each_block(model, q, f,
                         [&](const std::string& name, const MatrixXd& v) { s.add(name, v); });
  return s;
}

inline void unpack_params(const ParamStore& s, ModelSpec* model, MoGPosterior* q,
                          const TrainFlags& f = {}) {
  std::size_t idx = 0;
  auto take = [&](const std::string& name, const MatrixXd& current) -> const MatrixXd& {
    if (idx >= s.size() || s.names[idx] != name)
      throw StructureError("parameter store does not match model layout at " + name);
    const MatrixXd& v = s.values[idx];
    if (v.rows() != current.rows() || v.cols() != current.cols())
      throw StructureError("parameter block shape changed: " + name);
    ++idx;
    return v;
  };
  for (auto& g : model->groups) {
    const std::string tag = "g" + std::to_string(g.id);
    if (f.train_hyper) {
      g.input_kernel.set_log_hyper(take(tag + ".kern.x.logh", MatrixXd(g.input_kernel.log_hyper())).col(0));
      if (g.fn_kernel)
        g.fn_kernel->set_log_hyper(take(tag + ".kern.h.logh", MatrixXd(g.fn_kernel->log_hyper())).col(0));
    }
    if (f.train_z) g.Z = take(tag + ".Z", g.Z);
  }
  if (f.train_noise)
    model->noise.log_noise_var = take("noise.logvar", MatrixXd(model->noise.log_noise_var)).col(0);
  if (model->likelihood == LikelihoodKind::LCM && f.train_lcm_weights)
    model->lcm_weights = take("lcm.W", model->lcm_weights);
  if (f.train_variational) {
    q->logits = take("q.logits", MatrixXd(q->logits)).col(0);
    for (int k = 0; k < q->K; ++k)
      for (std::size_t r = 0; r < model->groups.size(); ++r) {
        const std::string tag =
            "q.k" + std::to_string(k) + ".g" + std::to_string(model->groups[r].id);
        auto& mean = q->means[static_cast<std::size_t>(k)][r];
        mean = take(tag + ".mean", mean);
        CovParams& c = q->covs[static_cast<std::size_t>(k)][r];
        if (c.type == CovType::Diagonal) {
          c.log_diag = take(tag + ".logdiag", c.log_diag);
        } else {
          c.raw_hh = take(tag + ".raw_hh", c.raw_hh);
          c.raw_zz = take(tag + ".raw_zz", c.raw_zz);
        }
      }
  }
  if (idx != s.size()) throw StructureError("parameter store has unconsumed blocks");
}

// ---------------------------------------------------------------------------
// ELBO construction on the tape
// ---------------------------------------------------------------------------

struct ElboConfig {
  int mc_samples = 200;
  std::uint64_t seed = 0;
  JitterLadder ladder{};
};

struct ElboTerms {
  double total = 0, ent = 0, cross = 0, ell = 0;
};

struct ElboGraph {
  ad::Tape tape;
  ad::Var total, ent, cross, ell;
  std::vector<std::pair<std::string, ad::Var>> leaves;  // pack order

  ElboTerms terms() const {
    return ElboTerms{tape.sval(total), tape.sval(ent), tape.sval(cross), tape.sval(ell)};
  }
};

namespace detail {

struct GroupGraph {
  ad::Var logh_x, logh_h, z;          // leaves (or constants)
  ad::Var Khh, Lhh, Kzz, Lzz;
  std::vector<ad::Var> mean;          // per component: m × Q_r
  std::vector<ad::Var> log_diag;      // Diagonal
  std::vector<ad::Var> Ls_hh, Ls_zz;  // KronFull factors (ltri_expdiag applied)
  MatrixXd Xs;                        // sliced training inputs
};

// Standard-normal blocks for the reparameterized draws, generated in the
// fixed global order: sample → group → member function → (E1 column, then
// E2 column). The order is part of the determinism and reduction contracts.
inline void draw_normals(const ModelSpec& model, Eigen::Index n, int S, std::uint64_t seed,
                         std::vector<MatrixXd>* e1, std::vector<MatrixXd>* e2) {
  Rng rng(derive_seed(seed, 0xe11u));
  e1->clear();
  e2->clear();
  for (const auto& g : model.groups) {
    e1->push_back(MatrixXd(n * S, g.size()));
    e2->push_back(MatrixXd(n * S, g.size()));
  }
  for (int s = 0; s < S; ++s)
    for (std::size_t r = 0; r < model.groups.size(); ++r) {
      const int qr = model.groups[r].size();
      for (int j = 0; j < qr; ++j) {
        for (Eigen::Index i = 0; i < n; ++i) (*e1)[r](s * n + i, j) = rng.normal();
        for (Eigen::Index i = 0; i < n; ++i) (*e2)[r](s * n + i, j) = rng.normal();
      }
    }
}

}  // namespace detail

// Assembles the full ELBO graph. The model must outlive the returned graph:
// kernel ops on the tape hold pointers into it.
inline ElboGraph build_elbo(const ModelSpec& model, const MoGPosterior& q,
                            const SupervisedSet& data, const TrainFlags& flags = {},
                            const ElboConfig& cfg = {}) {
  data.validate(model.P);
  ElboGraph gr;
  ad::Tape& t = gr.tape;
  const Eigen::Index n = data.X.rows();
  const int K = q.K;
  const int S = cfg.mc_samples;
  const std::size_t R = model.groups.size();

  // Leaf factory honoring the canonical pack order for trainable blocks.
  std::map<std::string, bool> trainable;
  detail::for_each_block(model, q, flags,
                         [&](const std::string& name, const MatrixXd&) { trainable[name] = true; });
  auto leaf = [&](const std::string& name, const MatrixXd& v) -> ad::Var {
    if (trainable.count(name)) {
      ad::Var var = t.param(v);
      gr.leaves.emplace_back(name, var);
      return var;
    }
    return t.constant(v);
  };

  // ---- group-level prior structure ----
  std::vector<detail::GroupGraph> gg(R);
  for (std::size_t r = 0; r < R; ++r) {
    const auto& g = model.groups[r];
    const std::string tag = "g" + std::to_string(g.id);
    auto& G = gg[r];
    G.Xs = g.slice(data.X);
    G.logh_x = leaf(tag + ".kern.x.logh", MatrixXd(g.input_kernel.log_hyper()));
    if (g.fn_kernel) {
      G.logh_h = leaf(tag + ".kern.h.logh", MatrixXd(g.fn_kernel->log_hyper()));
      G.Khh = t.gram(&*g.fn_kernel, G.logh_h, t.constant(g.H));
    } else {
      G.Khh = t.constant(MatrixXd(MatrixXd::Identity(1, 1)));
    }
    G.z = leaf(tag + ".Z", g.Z);
    G.Kzz = t.gram(&g.input_kernel, G.logh_x, G.z);
    G.Lhh = t.chol(G.Khh, cfg.ladder);
    G.Lzz = t.chol(G.Kzz, cfg.ladder);
  }

  ad::Var noise_logvar = leaf("noise.logvar", MatrixXd(model.noise.log_noise_var));
  ad::Var lcm_w;
  if (model.likelihood == LikelihoodKind::LCM)
    lcm_w = leaf("lcm.W", model.lcm_weights);

  ad::Var logits = leaf("q.logits", MatrixXd(q.logits));
  ad::Var pi = t.softmax(logits);

  for (int k = 0; k < K; ++k)
    for (std::size_t r = 0; r < R; ++r) {
      const auto& g = model.groups[r];
      const std::string tag = "q.k" + std::to_string(k) + ".g" + std::to_string(g.id);
      auto& G = gg[r];
      G.mean.push_back(leaf(tag + ".mean", q.means[static_cast<std::size_t>(k)][r]));
      const CovParams& c = q.covs[static_cast<std::size_t>(k)][r];
      if (c.type == CovType::Diagonal) {
        G.log_diag.push_back(leaf(tag + ".logdiag", c.log_diag));
        G.Ls_hh.push_back(ad::Var{});
        G.Ls_zz.push_back(ad::Var{});
      } else {
        ad::Var rh = leaf(tag + ".raw_hh", c.raw_hh);
        ad::Var rz = leaf(tag + ".raw_zz", c.raw_zz);
        G.log_diag.push_back(ad::Var{});
        G.Ls_hh.push_back(t.ltri_expdiag(rh));
        G.Ls_zz.push_back(t.ltri_expdiag(rz));
      }
    }

  // ---- entropy ----
  ad::Var ent;
  if (K == 1) {
    // bound = (D/2) log 4π + ½ logdet S; logdet flows through the raw
    // parameters without touching a factorization
    Eigen::Index D = 0;
    ad::Var half_logdet = t.scalar(0.0);
    for (std::size_t r = 0; r < R; ++r) {
      const auto& g = model.groups[r];
      const Eigen::Index m = g.Z.rows(), qr = g.size();
      D += m * qr;
      const CovParams& c = q.covs[0][r];
      if (c.type == CovType::Diagonal) {
        half_logdet = t.add(half_logdet, t.scale(t.sum(gg[r].log_diag[0]), 0.5));
      } else {
        // ½ logdet(S_hh ⊗ S_zz) = m Σ log diag(L_hh) + Q_r Σ log diag(L_zz)
        ad::Var dh = t.sum(t.log(t.diag(gg[r].Ls_hh[0])));
        ad::Var dz = t.sum(t.log(t.diag(gg[r].Ls_zz[0])));
        half_logdet = t.add(half_logdet,
                            t.add(t.scale(dh, double(m)), t.scale(dz, double(qr))));
      }
    }
    ent = t.offset(half_logdet, 0.5 * double(D) * std::log(4.0 * kPi));
  } else {
    // dense pairwise bound, test scale
    std::vector<ad::Var> per_k;
    for (int k = 0; k < K; ++k) {
      std::vector<ad::Var> lps;
      for (int l = 0; l < K; ++l) {
        ad::Var logN = t.scalar(0.0);
        for (std::size_t r = 0; r < R; ++r) {
          const auto& g = model.groups[r];
          const Eigen::Index m = g.Z.rows(), qr = g.size();
          auto dense_cov = [&](int comp) -> ad::Var {
            const CovParams& c = q.covs[static_cast<std::size_t>(comp)][r];
            if (c.type == CovType::Diagonal)
              return t.make_diag(t.exp(
                  t.reshape(gg[r].log_diag[static_cast<std::size_t>(comp)], qr * m, 1)));
            ad::Var Lh = gg[r].Ls_hh[static_cast<std::size_t>(comp)];
            ad::Var Lz = gg[r].Ls_zz[static_cast<std::size_t>(comp)];
            return t.kron(t.matmul(Lh, t.transpose(Lh)), t.matmul(Lz, t.transpose(Lz)));
          };
          ad::Var Ssum = t.add(dense_cov(k), dense_cov(l));
          ad::Var L = t.chol(Ssum, cfg.ladder);
          ad::Var delta = t.sub(t.reshape(gg[r].mean[static_cast<std::size_t>(k)], qr * m, 1),
                                t.reshape(gg[r].mean[static_cast<std::size_t>(l)], qr * m, 1));
          ad::Var quad = t.sum(t.cmul(delta, t.chol_solve(L, delta)));
          ad::Var logdet = t.scale(t.sum(t.log(t.diag(L))), 2.0);
          ad::Var term = t.scale(
              t.offset(t.add(logdet, quad), double(qr * m) * kLog2Pi), -0.5);
          logN = t.add(logN, term);
        }
        ad::Var logpi_l = t.sub(t.block(logits, l, 0, 1, 1), t.lse(logits));
        lps.push_back(t.add(logpi_l, logN));
      }
      per_k.push_back(t.lse(t.vstack_scalars(lps)));
    }
    ad::Var acc = t.scalar(0.0);
    for (int k = 0; k < K; ++k)
      acc = t.add(acc, t.cmul(t.block(pi, k, 0, 1, 1), per_k[static_cast<std::size_t>(k)]));
    ent = t.neg(acc);
  }

  // ---- cross-entropy ----
  std::vector<ad::Var> cross_k;
  for (int k = 0; k < K; ++k) {
    ad::Var acc = t.scalar(0.0);
    for (std::size_t r = 0; r < R; ++r) {
      const auto& g = model.groups[r];
      const Eigen::Index m = g.Z.rows(), qr = g.size();
      auto& G = gg[r];
      ad::Var ldh = t.scale(t.sum(t.log(t.diag(G.Lhh))), 2.0);
      ad::Var ldz = t.scale(t.sum(t.log(t.diag(G.Lzz))), 2.0);
      ad::Var logdet = t.add(t.scale(ldh, double(m)), t.scale(ldz, double(qr)));

      ad::Var U = G.mean[static_cast<std::size_t>(k)];
      ad::Var A1 = t.chol_solve(G.Lzz, U);                       // K_zz⁻¹ U
      ad::Var A2 = t.transpose(t.chol_solve(G.Lhh, t.transpose(A1)));
      ad::Var quad = t.sum(t.cmul(U, A2));

      ad::Var tr;
      const CovParams& c = q.covs[static_cast<std::size_t>(k)][r];
      if (c.type == CovType::Diagonal) {
        ad::Var dz = t.diag(t.chol_solve(G.Lzz, t.constant(MatrixXd(MatrixXd::Identity(m, m)))));
        ad::Var dh = t.diag(t.chol_solve(G.Lhh, t.constant(MatrixXd(MatrixXd::Identity(qr, qr)))));
        ad::Var outer = t.matmul(dz, t.transpose(dh));           // m × Q_r
        tr = t.sum(t.cmul(t.exp(G.log_diag[static_cast<std::size_t>(k)]), outer));
      } else {
        ad::Var Lh = G.Ls_hh[static_cast<std::size_t>(k)], Lz = G.Ls_zz[static_cast<std::size_t>(k)];
        ad::Var Shh = t.matmul(Lh, t.transpose(Lh));
        ad::Var Szz = t.matmul(Lz, t.transpose(Lz));
        tr = t.cmul(t.trace(t.chol_solve(G.Lhh, Shh)), t.trace(t.chol_solve(G.Lzz, Szz)));
      }
      ad::Var term = t.scale(
          t.offset(t.add(t.add(logdet, quad), tr), double(qr * m) * kLog2Pi), -0.5);
      acc = t.add(acc, term);
    }
    cross_k.push_back(acc);
  }
  ad::Var cross = t.scalar(0.0);
  for (int k = 0; k < K; ++k)
    cross = t.add(cross, t.cmul(t.block(pi, k, 0, 1, 1), cross_k[static_cast<std::size_t>(k)]));

  // ---- expected log likelihood (reparameterized MC) ----
  ad::Var ell;
  if (n == 0 || S == 0) {
    ell = t.scalar(0.0);
  } else {
    std::vector<MatrixXd> e1, e2;
    detail::draw_normals(model, n, S, cfg.seed, &e1, &e2);

    // masked targets with unobserved entries zeroed (they never reach a term)
    MatrixXd Yc = data.Y;
    for (Eigen::Index i = 0; i < Yc.rows(); ++i)
      for (Eigen::Index j = 0; j < Yc.cols(); ++j)
        if (data.mask(i, j) == 0.0 || !std::isfinite(Yc(i, j))) Yc(i, j) = 0.0;

    // component-independent projection pieces, one set per group
    struct EllGroup {
      ad::Var A, AA, prior_part, E2;
    };
    std::vector<EllGroup> eg(R);
    for (std::size_t r = 0; r < R; ++r) {
      const auto& g = model.groups[r];
      auto& G = gg[r];
      ad::Var Kxz = t.cross_gram(&g.input_kernel, G.logh_x, t.constant(G.Xs), G.z);
      eg[r].A = t.transpose(t.chol_solve(G.Lzz, t.transpose(Kxz)));
      eg[r].AA = t.cmul(eg[r].A, eg[r].A);
      ad::Var kdiag = t.gram_diag(&g.input_kernel, G.logh_x, t.constant(G.Xs));
      ad::Var s = t.clamp_min(t.sub(kdiag, t.rowsum(t.cmul(eg[r].A, Kxz))), 1e-12);
      ad::Var sqrt_s_t = t.tile_rows(t.sqrt(s), S);
      ad::Var E1 = t.constant(e1[r]);
      eg[r].E2 = t.constant(e2[r]);
      eg[r].prior_part = t.scale_rows(t.matmul(E1, t.transpose(G.Lhh)), sqrt_s_t);
    }

    std::vector<ad::Var> ell_k;
    for (int k = 0; k < K; ++k) {
      // per-group sample stacks, scattered to latent-function columns
      const int Qtot = model.Q();
      std::vector<ad::Var> cols(static_cast<std::size_t>(Qtot));
      for (std::size_t r = 0; r < R; ++r) {
        const auto& g = model.groups[r];
        const int qr = g.size();
        auto& G = gg[r];
        ad::Var mean = t.matmul(eg[r].A, G.mean[static_cast<std::size_t>(k)]);
        ad::Var post_part;
        const CovParams& c = q.covs[static_cast<std::size_t>(k)][r];
        if (c.type == CovType::Diagonal) {
          ad::Var svals = t.exp(G.log_diag[static_cast<std::size_t>(k)]);
          ad::Var V = t.matmul(eg[r].AA, svals);  // n × Q_r
          post_part = t.cmul(t.sqrt(t.clamp_min(t.tile_rows(V, S), 1e-18)), eg[r].E2);
        } else {
          ad::Var Lz = G.Ls_zz[static_cast<std::size_t>(k)];
          ad::Var Szz = t.matmul(Lz, t.transpose(Lz));
          ad::Var tv =
              t.clamp_min(t.rowsum(t.cmul(t.matmul(eg[r].A, Szz), eg[r].A)), 1e-18);
          ad::Var sqrt_t_t = t.tile_rows(t.sqrt(tv), S);
          post_part = t.scale_rows(
              t.matmul(eg[r].E2, t.transpose(G.Ls_hh[static_cast<std::size_t>(k)])), sqrt_t_t);
        }
        ad::Var F_r = t.add(t.add(t.tile_rows(mean, S), eg[r].prior_part), post_part);
        for (int a = 0; a < qr; ++a)
          cols[static_cast<std::size_t>(g.members[static_cast<std::size_t>(a)])] =
              t.block(F_r, 0, a, n * S, 1);
      }

      // observation model per task
      ad::Var acc = t.scalar(0.0);
      const int P = model.P;
      for (int i = 0; i < P; ++i) {
        ad::Var yhat;
        if (model.likelihood == LikelihoodKind::GPRNMixing) {
          const int Qg = model.index.Qg;
          std::vector<ad::Var> w_cols, g_cols;
          for (int l = 0; l < Qg; ++l) {
            w_cols.push_back(cols[static_cast<std::size_t>(model.index.weight_id(i, l))]);
            g_cols.push_back(cols[static_cast<std::size_t>(model.index.node_id(l))]);
          }
          ad::Var W = Qg == 1 ? w_cols[0] : t.hstack(w_cols);
          ad::Var Gm = Qg == 1 ? g_cols[0] : t.hstack(g_cols);
          yhat = t.matmul(t.cmul(W, Gm), t.constant(MatrixXd(MatrixXd::Ones(Qg, 1))));
        } else if (model.likelihood == LikelihoodKind::Identity) {
          yhat = cols[static_cast<std::size_t>(i)];
        } else {  // LCM: deterministic weights row i over node columns
          ad::Var Gm = model.Q() == 1 ? cols[0] : t.hstack(cols);
          ad::Var wrow = t.transpose(t.block(lcm_w, i, 0, 1, model.Q()));
          yhat = t.matmul(Gm, wrow);
        }
        // tile targets/mask over samples
        MatrixXd ytile(n * S, 1), mtile(n * S, 1);
        for (int s2 = 0; s2 < S; ++s2) {
          ytile.middleRows(s2 * n, n) = Yc.col(i);
          mtile.middleRows(s2 * n, n) = data.mask.col(i);
        }
        const double count = data.mask.col(i).sum();
        ad::Var resid = t.sub(t.constant(ytile), yhat);
        ad::Var ssum = t.sum(t.cmul(t.square(resid), t.constant(mtile)));
        ad::Var lv = t.block(noise_logvar, i, 0, 1, 1);
        ad::Var quad = t.cmul(ssum, t.exp(t.neg(lv)));
        ad::Var lin = t.scale(lv, count * S);
        ad::Var term = t.scale(t.offset(t.add(quad, lin), count * S * kLog2Pi), -0.5);
        acc = t.add(acc, term);
      }
      ell_k.push_back(t.scale(acc, 1.0 / double(S)));
    }
    ell = t.scalar(0.0);
    for (int k = 0; k < K; ++k)
      ell = t.add(ell, t.cmul(t.block(pi, k, 0, 1, 1), ell_k[static_cast<std::size_t>(k)]));
  }

  gr.ent = ent;
  gr.cross = cross;
  gr.ell = ell;
  gr.total = t.add(t.add(ent, cross), ell);
  return gr;
}

inline ElboTerms eval_elbo(const ModelSpec& model, const MoGPosterior& q,
                           const SupervisedSet& data, const ElboConfig& cfg = {}) {
  // values only: nothing needs to be trainable
  TrainFlags none;
  none.train_hyper = none.train_z = none.train_noise = false;
  none.train_variational = none.train_lcm_weights = false;
  ElboGraph g = build_elbo(model, q, data, none, cfg);
  return g.terms();
}

}  // namespace ggp
