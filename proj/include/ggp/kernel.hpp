#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ggp/common.hpp"

namespace ggp {

// Covariance primitives. All positive hyperparameters are stored as
// unconstrained log-values; exponentiation restores positivity.
//
//   RBF           per-dimension (ARD) lengthscales + signal variance
//   Periodic      exp-sine-squared on a single feature (period, lengthscale, variance)
//   Epanechnikov  compact support: max(0, 1 - (d/l)^2), no variance of its own
enum class PrimitiveType { RBF, Periodic, Epanechnikov };

struct KernelPrimitive {
  PrimitiveType type;
  std::vector<int> features;  // columns of the kernel input this primitive reads

  int hyper_count() const {
    switch (type) {
      case PrimitiveType::RBF: return static_cast<int>(features.size()) + 1;
      case PrimitiveType::Periodic: return 3;  // log period, log lengthscale, log variance
      case PrimitiveType::Epanechnikov: return 1;
    }
    return 0;
  }
};

namespace detail {

// Strided view of one input point (a matrix row or a contiguous vector).
struct PointRef {
  const double* base;
  Eigen::Index stride;
  double operator[](int f) const { return base[f * stride]; }
};

inline PointRef row_ref(const MatrixXd& m, Eigen::Index i) {
  return PointRef{m.data() + i, m.rows()};
}

inline PointRef vec_ref(const VectorXd& v) { return PointRef{v.data(), 1}; }

// logh points at the primitive's slice of the kernel's hyper vector.
inline double primitive_value(const KernelPrimitive& prim, const double* logh,
                              PointRef x, PointRef z) {
  switch (prim.type) {
    case PrimitiveType::RBF: {
      const int d = static_cast<int>(prim.features.size());
      double q = 0.0;
      for (int i = 0; i < d; ++i) {
        const double delta = x[prim.features[i]] - z[prim.features[i]];
        q += delta * delta * std::exp(-2.0 * logh[i]);
      }
      return std::exp(logh[d] - 0.5 * q);
    }
    case PrimitiveType::Periodic: {
      const double delta = x[prim.features[0]] - z[prim.features[0]];
      const double p = std::exp(logh[0]);
      const double inv_l2 = std::exp(-2.0 * logh[1]);
      const double s = std::sin(kPi * delta / p);
      return std::exp(logh[2] - 2.0 * s * s * inv_l2);
    }
    case PrimitiveType::Epanechnikov: {
      double d2 = 0.0;
      for (int f : prim.features) {
        const double delta = x[f] - z[f];
        d2 += delta * delta;
      }
      const double q = d2 * std::exp(-2.0 * logh[0]);
      return q < 1.0 ? 1.0 - q : 0.0;
    }
  }
  return 0.0;
}

// d value / d logh_i for each of the primitive's hypers, written to out.
inline void primitive_hyper_grad(const KernelPrimitive& prim, const double* logh,
                                 PointRef x, PointRef z, double value, double* out) {
  switch (prim.type) {
    case PrimitiveType::RBF: {
      const int d = static_cast<int>(prim.features.size());
      for (int i = 0; i < d; ++i) {
        const double delta = x[prim.features[i]] - z[prim.features[i]];
        out[i] = value * delta * delta * std::exp(-2.0 * logh[i]);
      }
      out[d] = value;
      return;
    }
    case PrimitiveType::Periodic: {
      const double delta = x[prim.features[0]] - z[prim.features[0]];
      const double p = std::exp(logh[0]);
      const double inv_l2 = std::exp(-2.0 * logh[1]);
      const double u = kPi * delta / p;
      const double s = std::sin(u);
      out[0] = value * 2.0 * kPi * delta * std::sin(2.0 * u) * inv_l2 / p;
      out[1] = value * 4.0 * s * s * inv_l2;
      out[2] = value;
      return;
    }
    case PrimitiveType::Epanechnikov: {
      double d2 = 0.0;
      for (int f : prim.features) {
        const double delta = x[f] - z[f];
        d2 += delta * delta;
      }
      const double q = d2 * std::exp(-2.0 * logh[0]);
      // Subgradient 0 at the support boundary and outside.
      out[0] = q < 1.0 ? 2.0 * q : 0.0;
      return;
    }
  }
}

// weight * d value / d z_f accumulated into gz (full input-width row); gx gets
// the negated contribution. All primitives depend on x - z only.
inline void primitive_input_grad(const KernelPrimitive& prim, const double* logh,
                                 PointRef x, PointRef z, double value, double weight,
                                 double* gx, double* gz) {
  switch (prim.type) {
    case PrimitiveType::RBF: {
      const int d = static_cast<int>(prim.features.size());
      for (int i = 0; i < d; ++i) {
        const int f = prim.features[i];
        const double delta = x[f] - z[f];
        const double g = weight * value * delta * std::exp(-2.0 * logh[i]);
        if (gz) gz[f] += g;
        if (gx) gx[f] -= g;
      }
      return;
    }
    case PrimitiveType::Periodic: {
      const int f = prim.features[0];
      const double delta = x[f] - z[f];
      const double p = std::exp(logh[0]);
      const double inv_l2 = std::exp(-2.0 * logh[1]);
      const double u = kPi * delta / p;
      const double g = weight * value * 2.0 * kPi * std::sin(2.0 * u) * inv_l2 / p;
      if (gz) gz[f] += g;
      if (gx) gx[f] -= g;
      return;
    }
    case PrimitiveType::Epanechnikov: {
      double d2 = 0.0;
      for (int f : prim.features) {
        const double delta = x[f] - z[f];
        d2 += delta * delta;
      }
      const double inv_l2 = std::exp(-2.0 * logh[0]);
      if (d2 * inv_l2 >= 1.0) return;
      for (int f : prim.features) {
        const double delta = x[f] - z[f];
        const double g = weight * 2.0 * delta * inv_l2;
        if (gz) gz[f] += g;
        if (gx) gx[f] -= g;
      }
      return;
    }
  }
}

}  // namespace detail

// A product of covariance primitives with log-space hyperparameters.
// Nested products flatten on composition; the product is the only combinator.
// Evaluation is read-only and safe to call concurrently.
class KernelSpec {
 public:
  KernelSpec() = default;

  static KernelSpec rbf(std::vector<int> features, double lengthscale = 1.0,
                        double variance = 1.0) {
    KernelSpec k;
    KernelPrimitive p{PrimitiveType::RBF, std::move(features)};
    k.prims_.push_back(p);
    VectorXd h(p.hyper_count());
    for (int i = 0; i + 1 < h.size(); ++i) h(i) = std::log(lengthscale);
    h(h.size() - 1) = std::log(variance);
    k.log_hyper_ = h;
    return k;
  }

  static KernelSpec periodic(int feature, double period, double lengthscale = 1.0,
                             double variance = 1.0) {
    KernelSpec k;
    k.prims_.push_back(KernelPrimitive{PrimitiveType::Periodic, {feature}});
    VectorXd h(3);
    h << std::log(period), std::log(lengthscale), std::log(variance);
    k.log_hyper_ = h;
    return k;
  }

  static KernelSpec epanechnikov(std::vector<int> features, double lengthscale = 1.0) {
    KernelSpec k;
    k.prims_.push_back(KernelPrimitive{PrimitiveType::Epanechnikov, std::move(features)});
    VectorXd h(1);
    h << std::log(lengthscale);
    k.log_hyper_ = h;
    return k;
  }

  KernelSpec operator*(const KernelSpec& other) const {
    KernelSpec k;
    k.prims_ = prims_;
    k.prims_.insert(k.prims_.end(), other.prims_.begin(), other.prims_.end());
    k.log_hyper_.resize(log_hyper_.size() + other.log_hyper_.size());
    k.log_hyper_ << log_hyper_, other.log_hyper_;
    return k;
  }

  const std::vector<KernelPrimitive>& primitives() const { return prims_; }

  int hyper_count() const { return static_cast<int>(log_hyper_.size()); }

  const VectorXd& log_hyper() const { return log_hyper_; }

  void set_log_hyper(const VectorXd& h) {
    if (h.size() != log_hyper_.size())
      throw InputError("kernel hyperparameter vector has wrong length");
    log_hyper_ = h;
  }

  // Smallest input width the kernel can evaluate.
  int input_dim() const {
    int d = 0;
    for (const auto& p : prims_)
      for (int f : p.features) d = std::max(d, f + 1);
    return d;
  }

  std::vector<std::string> hyper_names() const {
    std::vector<std::string> names;
    for (std::size_t pi = 0; pi < prims_.size(); ++pi) {
      const auto& p = prims_[pi];
      const std::string tag = "p" + std::to_string(pi) + ".";
      switch (p.type) {
        case PrimitiveType::RBF:
          for (std::size_t i = 0; i < p.features.size(); ++i)
            names.push_back(tag + "rbf.log_lengthscale" + std::to_string(i));
          names.push_back(tag + "rbf.log_variance");
          break;
        case PrimitiveType::Periodic:
          names.push_back(tag + "per.log_period");
          names.push_back(tag + "per.log_lengthscale");
          names.push_back(tag + "per.log_variance");
          break;
        case PrimitiveType::Epanechnikov:
          names.push_back(tag + "epan.log_lengthscale");
          break;
      }
    }
    return names;
  }

  double eval(const VectorXd& x, const VectorXd& z) const { return eval(log_hyper_, x, z); }

  double eval(const VectorXd& logh, const VectorXd& x, const VectorXd& z) const {
    check_dim(x.size());
    check_dim(z.size());
    return value_at(logh, detail::vec_ref(x), detail::vec_ref(z));
  }

  // Symmetric Gram: each unordered pair evaluated once, then mirrored.
  MatrixXd gram(const MatrixXd& X) const { return gram(log_hyper_, X); }

  MatrixXd gram(const VectorXd& logh, const MatrixXd& X) const {
    check_dim(X.cols());
    const Eigen::Index n = X.rows();
    MatrixXd K(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i; j < n; ++j) {
        const double v = value_at(logh, detail::row_ref(X, i), detail::row_ref(X, j));
        K(i, j) = v;
        K(j, i) = v;
      }
    }
    return K;
  }

  MatrixXd cross_gram(const MatrixXd& X, const MatrixXd& Z) const {
    return cross_gram(log_hyper_, X, Z);
  }

  MatrixXd cross_gram(const VectorXd& logh, const MatrixXd& X, const MatrixXd& Z) const {
    check_dim(X.cols());
    check_dim(Z.cols());
    MatrixXd K(X.rows(), Z.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      for (Eigen::Index k = 0; k < Z.rows(); ++k)
        K(i, k) = value_at(logh, detail::row_ref(X, i), detail::row_ref(Z, k));
    return K;
  }

  // kappa(x, x) per row; equals the product of the primitives' variances.
  VectorXd gram_diag(const VectorXd& logh, const MatrixXd& X) const {
    check_dim(X.cols());
    VectorXd d(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      d(i) = value_at(logh, detail::row_ref(X, i), detail::row_ref(X, i));
    return d;
  }

  VectorXd gram_diag(const MatrixXd& X) const { return gram_diag(log_hyper_, X); }

  // One matrix per unconstrained hyperparameter: d gram / d logh. With Z the
  // matrices are cross-Gram shaped, without it symmetric Gram shaped.
  std::vector<MatrixXd> grad_hyper(const MatrixXd& X) const {
    return grad_hyper(log_hyper_, X, std::nullopt);
  }

  std::vector<MatrixXd> grad_hyper(const MatrixXd& X, const MatrixXd& Z) const {
    return grad_hyper(log_hyper_, X, std::optional<MatrixXd>(Z));
  }

  std::vector<MatrixXd> grad_hyper(const VectorXd& logh, const MatrixXd& X,
                                   const std::optional<MatrixXd>& Z = std::nullopt) const {
    const MatrixXd& right = Z ? *Z : X;
    check_dim(X.cols());
    check_dim(right.cols());
    const int H = hyper_count();
    std::vector<MatrixXd> grads(H, MatrixXd::Zero(X.rows(), right.rows()));
    std::vector<double> buf(H);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const Eigen::Index j0 = Z ? 0 : i;
      for (Eigen::Index j = j0; j < right.rows(); ++j) {
        pair_hyper_grad(logh, detail::row_ref(X, i), detail::row_ref(right, j), buf.data());
        for (int h = 0; h < H; ++h) {
          grads[h](i, j) = buf[h];
          if (!Z) grads[h](j, i) = buf[h];
        }
      }
    }
    return grads;
  }

  // Reverse-mode accumulation for the Gram diagonal: adj(i) weights
  // d kappa(x_i, x_i) / d logh. Stationary primitives have zero input
  // gradient at zero distance, so only hypers receive contributions.
  void accumulate_diag_gradients(const VectorXd& logh, const MatrixXd& X,
                                 const VectorXd& adj, VectorXd* g_logh) const {
    check_dim(X.cols());
    if (adj.size() != X.rows()) throw InputError("kernel diag adjoint has wrong length");
    if (!g_logh) return;
    std::vector<double> buf(hyper_count());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      if (adj(i) == 0.0) continue;
      const auto xi = detail::row_ref(X, i);
      pair_hyper_grad(logh, xi, xi, buf.data());
      for (int h = 0; h < hyper_count(); ++h) (*g_logh)(h) += adj(i) * buf[h];
    }
  }

  // Reverse-mode accumulation: given adj = d objective / d cross_gram(X, Z),
  // adds chain contributions to the hyper gradient and input coordinates.
  // For a symmetric Gram whose inputs are optimized, call with the same matrix
  // on both sides; row and column contributions then both accumulate.
  void accumulate_cross_gradients(const VectorXd& logh, const MatrixXd& X,
                                  const MatrixXd& Z, const MatrixXd& adj,
                                  VectorXd* g_logh, MatrixXd* gX, MatrixXd* gZ) const {
    check_dim(X.cols());
    check_dim(Z.cols());
    if (adj.rows() != X.rows() || adj.cols() != Z.rows())
      throw InputError("kernel adjoint has wrong shape");
    const int H = hyper_count();
    std::vector<double> hbuf(H);
    std::vector<double> vals(prims_.size());
    std::vector<double> gxrow(X.cols(), 0.0), gzrow(Z.cols(), 0.0);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const auto xi = detail::row_ref(X, i);
      for (Eigen::Index k = 0; k < Z.rows(); ++k) {
        const double w = adj(i, k);
        if (w == 0.0) continue;
        const auto zk = detail::row_ref(Z, k);
        factor_values(logh, xi, zk, vals.data());
        if (g_logh) {
          int off = 0;
          for (std::size_t pi = 0; pi < prims_.size(); ++pi) {
            const auto& p = prims_[pi];
            double rest = 1.0;
            for (std::size_t pj = 0; pj < prims_.size(); ++pj)
              if (pj != pi) rest *= vals[pj];
            detail::primitive_hyper_grad(p, logh.data() + off, xi, zk, vals[pi], hbuf.data() + off);
            for (int h = 0; h < p.hyper_count(); ++h) (*g_logh)(off + h) += w * rest * hbuf[off + h];
            off += p.hyper_count();
          }
        }
        if (gX || gZ) {
          std::fill(gxrow.begin(), gxrow.end(), 0.0);
          std::fill(gzrow.begin(), gzrow.end(), 0.0);
          int off = 0;
          for (std::size_t pi = 0; pi < prims_.size(); ++pi) {
            double rest = 1.0;
            for (std::size_t pj = 0; pj < prims_.size(); ++pj)
              if (pj != pi) rest *= vals[pj];
            detail::primitive_input_grad(prims_[pi], logh.data() + off, xi, zk, vals[pi],
                                         w * rest, gX ? gxrow.data() : nullptr,
                                         gZ ? gzrow.data() : nullptr);
            off += prims_[pi].hyper_count();
          }
          if (gX)
            for (Eigen::Index c = 0; c < X.cols(); ++c) (*gX)(i, c) += gxrow[c];
          if (gZ)
            for (Eigen::Index c = 0; c < Z.cols(); ++c) (*gZ)(k, c) += gzrow[c];
        }
      }
    }
  }

 private:
  std::vector<KernelPrimitive> prims_;
  VectorXd log_hyper_;

  void check_dim(Eigen::Index d) const {
    if (d < input_dim())
      throw InputError("kernel input has dimension " + std::to_string(d) +
                       ", needs at least " + std::to_string(input_dim()));
  }

  double value_at(const VectorXd& logh, detail::PointRef a, detail::PointRef b) const {
    double v = 1.0;
    int off = 0;
    for (const auto& p : prims_) {
      v *= detail::primitive_value(p, logh.data() + off, a, b);
      off += p.hyper_count();
    }
    return v;
  }

  void factor_values(const VectorXd& logh, detail::PointRef a, detail::PointRef b,
                     double* vals) const {
    int off = 0;
    for (std::size_t pi = 0; pi < prims_.size(); ++pi) {
      vals[pi] = detail::primitive_value(prims_[pi], logh.data() + off, a, b);
      off += prims_[pi].hyper_count();
    }
  }

  void pair_hyper_grad(const VectorXd& logh, detail::PointRef a, detail::PointRef b,
                       double* out) const {
    std::vector<double> vals(prims_.size());
    factor_values(logh, a, b, vals.data());
    int off = 0;
    for (std::size_t pi = 0; pi < prims_.size(); ++pi) {
      const auto& p = prims_[pi];
      double rest = 1.0;
      for (std::size_t pj = 0; pj < prims_.size(); ++pj)
        if (pj != pi) rest *= vals[pj];
      detail::primitive_hyper_grad(p, logh.data() + off, a, b, vals[pi], out + off);
      for (int h = 0; h < p.hyper_count(); ++h) out[off + h] *= rest;
      off += p.hyper_count();
    }
  }
};

}  // namespace ggp
