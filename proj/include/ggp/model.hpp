#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ggp/common.hpp"
#include "ggp/kernel.hpp"
#include "ggp/kron_linalg.hpp"

namespace ggp {

// Latent-function indexing for the mixing model: Q = Qg·(P+1) functions,
// the first P·Qg are weights W(i,l) (row-major over tasks), the last Qg are
// nodes g(l).
struct GPRNIndex {
  int P = 0;
  int Qg = 0;

  int Q() const { return Qg * (P + 1); }
  int weight_id(int i, int l) const { return i * Qg + l; }
  int node_id(int l) const { return P * Qg + l; }

  struct Role {
    bool is_weight;
    int i;  // task row, weights only
    int l;  // node column
  };

  Role role(int j) const {
    if (j < 0 || j >= Q()) throw InputError("latent-function id out of range");
    if (j < P * Qg) return Role{true, j / Qg, j % Qg};
    return Role{false, -1, j - P * Qg};
  }
};

// One prior group: an ordered set of latent functions sharing a separable
// GP prior K_hh ⊗ K_xx. Kernels use local column indices into the group's
// feature_cols slice of the full input layout.
struct GroupSpec {
  int id = 0;
  std::vector<int> members;
  std::vector<int> feature_cols;       // columns of the full X this group reads
  KernelSpec input_kernel;             // kappa_r(x, x') on the sliced input
  std::optional<KernelSpec> fn_kernel; // kappa_r(h, h'), present iff size() > 1
  MatrixXd H;                          // Q_r × d_h spatial features per member
  MatrixXd Z;                          // m × |feature_cols| inducing inputs

  int size() const { return static_cast<int>(members.size()); }

  MatrixXd slice(const MatrixXd& X) const {
    MatrixXd out(X.rows(), static_cast<Eigen::Index>(feature_cols.size()));
    for (std::size_t c = 0; c < feature_cols.size(); ++c)
      out.col(static_cast<Eigen::Index>(c)) = X.col(feature_cols[c]);
    return out;
  }

  // K_hh for the group: fn kernel over H, or 1x1 identity for singletons.
  MatrixXd function_cov() const {
    if (!fn_kernel) return MatrixXd::Identity(1, 1);
    return fn_kernel->gram(H);
  }
};

struct LikelihoodParams {
  VectorXd log_noise_var;  // one per task, diagonal Sigma_y in log space

  VectorXd noise_var() const { return log_noise_var.array().exp(); }
};

// How latent functions map to the observation mean.
//   GPRNMixing  y_n = W_n g_n + eps      (weights and nodes both latent)
//   Identity    y_n = f_n + eps          (single latent function)
//   LCM         y_n = W g_n + eps        (deterministic weight matrix)
enum class LikelihoodKind { GPRNMixing, Identity, LCM };

struct ModelSpec {
  std::string name;
  int P = 1;                 // observed task count for this instance
  GPRNIndex index;           // meaningful for GPRNMixing only
  LikelihoodKind likelihood = LikelihoodKind::GPRNMixing;
  std::vector<GroupSpec> groups;
  LikelihoodParams noise;
  MatrixXd lcm_weights;      // P × Qg, LCM only
  std::vector<int> task_columns;  // which target columns this instance models

  int R() const { return static_cast<int>(groups.size()); }

  int Q() const {
    int q = 0;
    for (const auto& g : groups) q += g.size();
    return q;
  }
};

// Default hyperparameter and feature-layout settings shared by the builders.
// The full input row is [time, lags(task 0), lags(task 1), ...]; see the data
// module for construction.
struct KernelDefaults {
  double period = 1440.0;    // periodic kernel period in time-index units
  double time_ls = 1.0;      // periodic lengthscale
  double lag_ls = 1.0;       // RBF lengthscale on lag features
  double space_ls = 1.0;     // RBF lengthscale on spatial features
  double ep_ls = 2.0;        // Epanechnikov cutoff lengthscale
  double variance = 1.0;     // signal variance of the variance-carrying factor
  int lags = 3;              // lag features per task
};

namespace detail {

inline std::vector<int> lag_cols(int task, int lags) {
  std::vector<int> cols(static_cast<std::size_t>(lags));
  for (int a = 0; a < lags; ++a) cols[static_cast<std::size_t>(a)] = 1 + task * lags + a;
  return cols;
}

// feature_cols = [time, lags(task)]; kernel indices are local: time at 0,
// lags at 1..lags.
inline std::vector<int> time_lag_cols(int task, int lags) {
  std::vector<int> cols{0};
  for (int c : lag_cols(task, lags)) cols.push_back(c);
  return cols;
}

inline std::vector<int> iota(int n, int from = 0) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = from + i;
  return v;
}

inline KernelSpec periodic_rbf(const KernelDefaults& d) {
  return KernelSpec::periodic(0, d.period, d.time_ls, 1.0) *
         KernelSpec::rbf(iota(d.lags, 1), d.lag_ls, d.variance);
}

inline KernelSpec spatial_rbf_ep(const KernelDefaults& d) {
  return KernelSpec::rbf({0, 1}, d.space_ls, 1.0) * KernelSpec::epanechnikov({0, 1}, d.ep_ls);
}

inline LikelihoodParams default_noise(int P, double var = 0.1) {
  LikelihoodParams lp;
  lp.log_noise_var = VectorXd::Constant(P, std::log(var));
  return lp;
}

}  // namespace detail

// Solar grouping: P row-groups over the weight matrix rows (coupled through
// site features) plus P singleton node groups. Qg = P; R = 2P, Q = P(P+1).
inline std::vector<GroupSpec> build_solar_grouping(int P, const MatrixXd& sites,
                                                   const KernelDefaults& d = {}) {
  if (P < 1) throw InputError("solar grouping needs P >= 1");
  if (sites.rows() != P || (P > 1 && sites.cols() != 2))
    throw InputError("sites must be P x 2");
  GPRNIndex idx{P, P};
  std::vector<GroupSpec> groups;
  int r = 0;
  for (int i = 0; i < P; ++i) {
    GroupSpec g;
    g.id = r++;
    for (int l = 0; l < P; ++l) g.members.push_back(idx.weight_id(i, l));
    g.feature_cols = detail::time_lag_cols(i, d.lags);
    g.input_kernel = detail::periodic_rbf(d);
    if (P > 1) {
      g.fn_kernel = detail::spatial_rbf_ep(d);
      g.H = sites;  // member l carries node l's site features
    }
    groups.push_back(std::move(g));
  }
  for (int l = 0; l < P; ++l) {
    GroupSpec g;
    g.id = r++;
    g.members.push_back(idx.node_id(l));
    g.feature_cols = detail::lag_cols(l, d.lags);
    g.input_kernel = KernelSpec::rbf(detail::iota(d.lags), d.lag_ls, d.variance);
    groups.push_back(std::move(g));
  }
  return groups;
}

// Wind grouping: per weight row, the P-1 off-diagonal entries form one group
// (coupled through site features) and the diagonal entry is a singleton;
// nodes are singletons. R = 3P, Q = P(P+1).
inline std::vector<GroupSpec> build_wind_grouping(int P, const MatrixXd& sites,
                                                  const KernelDefaults& d = {}) {
  if (P < 2) throw InputError("wind grouping needs P >= 2");
  if (sites.rows() != P || sites.cols() != 2) throw InputError("sites must be P x 2");
  GPRNIndex idx{P, P};
  std::vector<GroupSpec> groups;
  int r = 0;
  for (int i = 0; i < P; ++i) {
    GroupSpec off;
    off.id = r++;
    off.H.resize(P - 1, 2);
    int row = 0;
    for (int l = 0; l < P; ++l) {
      if (l == i) continue;
      off.members.push_back(idx.weight_id(i, l));
      off.H.row(row++) = sites.row(l);
    }
    off.feature_cols = detail::time_lag_cols(i, d.lags);
    off.input_kernel = detail::periodic_rbf(d);
    if (P > 2) off.fn_kernel = detail::spatial_rbf_ep(d);
    if (P == 2) off.H.resize(0, 0);  // singleton off-diagonal group
    groups.push_back(std::move(off));

    GroupSpec diag;
    diag.id = r++;
    diag.members.push_back(idx.weight_id(i, i));
    diag.feature_cols = detail::time_lag_cols(i, d.lags);
    diag.input_kernel = detail::periodic_rbf(d);
    groups.push_back(std::move(diag));
  }
  for (int l = 0; l < P; ++l) {
    GroupSpec g;
    g.id = r++;
    g.members.push_back(idx.node_id(l));
    g.feature_cols = detail::lag_cols(l, d.lags);
    g.input_kernel = KernelSpec::rbf(detail::iota(d.lags), d.lag_ls, d.variance);
    groups.push_back(std::move(g));
  }
  return groups;
}

// A set of model instances trained and evaluated together (IGP is one
// instance per task; every other family is a single instance).
struct BenchmarkAssembly {
  std::vector<ModelSpec> instances;
};

inline ModelSpec make_ggp_model(const std::string& scheme, int P, const MatrixXd& sites,
                                const KernelDefaults& d = {}) {
  ModelSpec m;
  m.name = "ggp-" + scheme;
  m.P = P;
  m.index = GPRNIndex{P, P};
  m.likelihood = LikelihoodKind::GPRNMixing;
  if (scheme == "solar-rows")
    m.groups = build_solar_grouping(P, sites, d);
  else if (scheme == "wind-offdiag")
    m.groups = build_wind_grouping(P, sites, d);
  else
    throw ConfigError("unknown grouping scheme: " + scheme);
  m.noise = detail::default_noise(P);
  m.task_columns = detail::iota(P);
  return m;
}

inline BenchmarkAssembly build_benchmark(const std::string& family, int P, int Qg,
                                         const MatrixXd& sites, const KernelDefaults& d = {}) {
  BenchmarkAssembly out;
  if (family == "gprn") {
    ModelSpec m;
    m.name = "gprn";
    m.P = P;
    m.index = GPRNIndex{P, Qg};
    m.likelihood = LikelihoodKind::GPRNMixing;
    int r = 0;
    for (int i = 0; i < P; ++i)
      for (int l = 0; l < Qg; ++l) {
        GroupSpec g;
        g.id = r++;
        g.members.push_back(m.index.weight_id(i, l));
        g.feature_cols = detail::time_lag_cols(i, d.lags);
        g.input_kernel = detail::periodic_rbf(d);
        m.groups.push_back(std::move(g));
      }
    for (int l = 0; l < Qg; ++l) {
      GroupSpec g;
      g.id = r++;
      g.members.push_back(m.index.node_id(l));
      g.feature_cols = detail::lag_cols(l % P, d.lags);
      g.input_kernel = KernelSpec::rbf(detail::iota(d.lags), d.lag_ls, d.variance);
      m.groups.push_back(std::move(g));
    }
    m.noise = detail::default_noise(P);
    m.task_columns = detail::iota(P);
    out.instances.push_back(std::move(m));
  } else if (family == "lcm") {
    ModelSpec m;
    m.name = "lcm";
    m.P = P;
    m.index = GPRNIndex{P, Qg};  // node ids only; weights are deterministic
    m.likelihood = LikelihoodKind::LCM;
    for (int l = 0; l < Qg; ++l) {
      GroupSpec g;
      g.id = l;
      g.members.push_back(l);
      g.feature_cols = detail::time_lag_cols(l % P, d.lags);
      g.input_kernel = detail::periodic_rbf(d);
      m.groups.push_back(std::move(g));
    }
    m.lcm_weights = MatrixXd::Constant(P, Qg, 1.0 / std::sqrt(double(Qg)));
    m.noise = detail::default_noise(P);
    m.task_columns = detail::iota(P);
    out.instances.push_back(std::move(m));
  } else if (family == "igp") {
    for (int i = 0; i < P; ++i) {
      ModelSpec m;
      m.name = "igp-task" + std::to_string(i);
      m.P = 1;
      m.likelihood = LikelihoodKind::Identity;
      GroupSpec g;
      g.id = 0;
      g.members.push_back(0);
      g.feature_cols = detail::time_lag_cols(i, d.lags);
      g.input_kernel = detail::periodic_rbf(d);
      m.groups.push_back(std::move(g));
      m.noise = detail::default_noise(1);
      m.task_columns = {i};
      out.instances.push_back(std::move(m));
    }
  } else if (family == "mtg") {
    // pooled rows: [time, lags(3), site-coords(2)], built by the data module
    ModelSpec m;
    m.name = "mtg";
    m.P = 1;
    m.likelihood = LikelihoodKind::Identity;
    GroupSpec g;
    g.id = 0;
    g.members.push_back(0);
    g.feature_cols = detail::iota(1 + d.lags + 2);
    g.input_kernel =
        detail::periodic_rbf(d) *
        KernelSpec::rbf({1 + d.lags, 2 + d.lags}, d.space_ls, 1.0) *
        KernelSpec::epanechnikov({1 + d.lags, 2 + d.lags}, d.ep_ls);
    m.groups.push_back(std::move(g));
    m.noise = detail::default_noise(1);
    m.task_columns = {0};
    out.instances.push_back(std::move(m));
  } else {
    throw ConfigError("unknown model family: " + family);
  }
  return out;
}

// Seeded uniform subsample of training rows (sliced to the group's columns)
// as initial inducing inputs; one independent draw per group. Sampling is
// without replacement when n >= m so K_zz never starts exactly singular.
inline void init_inducing(ModelSpec& model, const MatrixXd& X, int m, std::uint64_t seed) {
  if (m < 1) throw InputError("need at least one inducing point");
  if (X.rows() == 0) throw InputError("cannot draw inducing points from empty data");
  const Eigen::Index n = X.rows();
  for (auto& g : model.groups) {
    Rng rng(derive_seed(seed, 0x5eedu, static_cast<std::uint64_t>(g.id)));
    MatrixXd Xs = g.slice(X);
    g.Z.resize(m, Xs.cols());
    if (n >= m) {
      std::vector<Eigen::Index> pool(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
      for (int k = 0; k < m; ++k) {  // partial Fisher-Yates
        const std::size_t pick = k + rng.index(static_cast<std::size_t>(n - k));
        std::swap(pool[static_cast<std::size_t>(k)], pool[pick]);
        g.Z.row(k) = Xs.row(pool[static_cast<std::size_t>(k)]);
      }
    } else {
      for (int k = 0; k < m; ++k)
        g.Z.row(k) = Xs.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n))));
    }
  }
}

// Per-group prior quantities shared by the ELBO and prediction:
//   A = K_xz K_zz^{-1}            (per function, applied blockwise)
//   cond_var(n) = k(x_n,x_n) − k(x_n,Z) K_zz^{-1} k(Z,x_n)   (clamped at 0)
// and the per-point conditional covariance across member functions is
// K_hh · cond_var(n).
struct PriorBlocks {
  MatrixXd Khh;
  CholFactor Lhh;
  CholFactor Lzz;
  MatrixXd Kxz;
  MatrixXd A;
  VectorXd cond_var;
};

inline PriorBlocks prior_blocks(const GroupSpec& g, const MatrixXd& X,
                                const JitterLadder& ladder = {}) {
  PriorBlocks b;
  if (g.Z.rows() == 0) throw InputError("group has no inducing inputs");
  MatrixXd Xs = g.slice(X);
  b.Khh = g.function_cov();
  b.Lhh = chol(b.Khh, ladder);
  MatrixXd Kzz = g.input_kernel.gram(g.Z);
  b.Lzz = chol(Kzz, ladder);
  b.Kxz = g.input_kernel.cross_gram(Xs, g.Z);
  b.A = b.Lzz.solve(b.Kxz.transpose()).transpose();
  VectorXd kxx = g.input_kernel.gram_diag(Xs);
  b.cond_var = (kxx - b.A.cwiseProduct(b.Kxz).rowwise().sum()).cwiseMax(0.0);
  return b;
}

// log N(y; W g, Sigma_y) with per-task diagonal noise; masked tasks (mask 0)
// contribute nothing.
inline double log_likelihood(const VectorXd& y, const MatrixXd& W, const VectorXd& g,
                             const LikelihoodParams& params,
                             const VectorXd* mask = nullptr) {
  if (W.rows() != y.size() || W.cols() != g.size() ||
      params.log_noise_var.size() != y.size())
    throw InputError("log_likelihood shape mismatch");
  VectorXd mean = W * g;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (mask && (*mask)(i) == 0.0) continue;
    const double lv = params.log_noise_var(i);
    const double resid = y(i) - mean(i);
    acc += -0.5 * (kLog2Pi + lv + resid * resid * std::exp(-lv));
  }
  return acc;
}

}  // namespace ggp
