#pragma once

// Minimal reverse-mode tape over dense Eigen matrices. Scalars are 1x1.
// The op set is exactly what the ELBO needs — matrix products, elementwise
// maps, Cholesky with the jitter ladder, triangular solves, kernel Gram
// constructors — each with a hand-written adjoint rule that is finite-
// difference tested in isolation.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ggp/common.hpp"
#include "ggp/kernel.hpp"
#include "ggp/kron_linalg.hpp"

namespace ggp::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  // ---- leaves ----
  Var param(MatrixXd v) { return push(std::move(v), true, nullptr); }
  Var param(const VectorXd& v) { return push(MatrixXd(v), true, nullptr); }
  Var constant(MatrixXd v) { return push(std::move(v), false, nullptr); }
  Var constant(const VectorXd& v) { return push(MatrixXd(v), false, nullptr); }
  Var scalar(double v) { return constant(MatrixXd(MatrixXd::Constant(1, 1, v))); }

  const MatrixXd& val(Var a) const { return node(a).value; }
  double sval(Var a) const {
    const MatrixXd& m = node(a).value;
    if (m.size() != 1) throw StructureError("sval on a non-scalar tape node");
    return m(0, 0);
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    chol_dims_.clear();
  }

  // Dimensions of every Cholesky factorization taken since the last clear;
  // the complexity tests count entries of a given size.
  const std::vector<Eigen::Index>& chol_dims() const { return chol_dims_; }

  // ---- arithmetic ----
  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    return push(val(a) + val(b), rg(a) || rg(b), [a, b, rg_a = rg(a), rg_b = rg(b)](Tape& t, const MatrixXd& g) {
      if (rg_a) t.adj(a) += g;
      if (rg_b) t.adj(b) += g;
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    return push(val(a) - val(b), rg(a) || rg(b), [a, b, rg_a = rg(a), rg_b = rg(b)](Tape& t, const MatrixXd& g) {
      if (rg_a) t.adj(a) += g;
      if (rg_b) t.adj(b) -= g;
    });
  }

  Var neg(Var a) {
    return push(-val(a), rg(a), [a](Tape& t, const MatrixXd& g) { t.adj(a) -= g; });
  }

  Var scale(Var a, double c) {
    return push(c * val(a), rg(a), [a, c](Tape& t, const MatrixXd& g) { t.adj(a) += c * g; });
  }

  Var offset(Var a, double c) {
    return push(MatrixXd((val(a).array() + c).matrix()), rg(a),
                [a](Tape& t, const MatrixXd& g) { t.adj(a) += g; });
  }

  Var matmul(Var a, Var b) {
    if (val(a).cols() != val(b).rows()) throw StructureError("matmul shape mismatch");
    return push(val(a) * val(b), rg(a) || rg(b), [a, b, rg_a = rg(a), rg_b = rg(b)](Tape& t, const MatrixXd& g) {
      if (rg_a) t.adj(a) += g * t.val(b).transpose();
      if (rg_b) t.adj(b) += t.val(a).transpose() * g;
    });
  }

  Var cmul(Var a, Var b) {
    check_same_shape(a, b, "cmul");
    return push(val(a).cwiseProduct(val(b)), rg(a) || rg(b),
                [a, b, rg_a = rg(a), rg_b = rg(b)](Tape& t, const MatrixXd& g) {
                  if (rg_a) t.adj(a) += g.cwiseProduct(t.val(b));
                  if (rg_b) t.adj(b) += g.cwiseProduct(t.val(a));
                });
  }

  // s is 1x1 and broadcasts over a
  Var cmul_scalar(Var a, Var s) {
    return push(sval(s) * val(a), rg(a) || rg(s),
                [a, s, rg_a = rg(a), rg_s = rg(s)](Tape& t, const MatrixXd& g) {
                  if (rg_a) t.adj(a) += t.sval(s) * g;
                  if (rg_s) t.adj(s)(0, 0) += (g.array() * t.val(a).array()).sum();
                });
  }

  // out(i,j) = a(i,j) * v(i), v an n×1 column
  Var scale_rows(Var a, Var v) {
    if (val(v).cols() != 1 || val(v).rows() != val(a).rows())
      throw StructureError("scale_rows needs a matching column vector");
    MatrixXd out = (val(a).array().colwise() * val(v).col(0).array()).matrix();
    return push(std::move(out), rg(a) || rg(v),
                [a, v, rg_a = rg(a), rg_v = rg(v)](Tape& t, const MatrixXd& g) {
                  if (rg_a)
                    t.adj(a) += (g.array().colwise() * t.val(v).col(0).array()).matrix();
                  if (rg_v)
                    t.adj(v).col(0) += g.cwiseProduct(t.val(a)).rowwise().sum();
                });
  }

  Var transpose(Var a) {
    return push(val(a).transpose(), rg(a),
                [a](Tape& t, const MatrixXd& g) { t.adj(a) += g.transpose(); });
  }

  Var block(Var a, Eigen::Index r0, Eigen::Index c0, Eigen::Index r, Eigen::Index c) {
    if (r0 + r > val(a).rows() || c0 + c > val(a).cols())
      throw StructureError("block out of range");
    return push(val(a).block(r0, c0, r, c), rg(a),
                [a, r0, c0, r, c](Tape& t, const MatrixXd& g) {
                  t.adj(a).block(r0, c0, r, c) += g;
                });
  }

  Var hstack(const std::vector<Var>& parts) {
    if (parts.empty()) throw StructureError("hstack of nothing");
    Eigen::Index rows = val(parts[0]).rows(), cols = 0;
    bool any = false;
    for (Var p : parts) {
      if (val(p).rows() != rows) throw StructureError("hstack row mismatch");
      cols += val(p).cols();
      any = any || rg(p);
    }
    MatrixXd out(rows, cols);
    Eigen::Index off = 0;
    for (Var p : parts) {
      out.middleCols(off, val(p).cols()) = val(p);
      off += val(p).cols();
    }
    return push(std::move(out), any, [parts](Tape& t, const MatrixXd& g) {
      Eigen::Index off = 0;
      for (Var p : parts) {
        const Eigen::Index w = t.val(p).cols();
        if (t.rg(p)) t.adj(p) += g.middleCols(off, w);
        off += w;
      }
    });
  }

  // K×1 column out of 1x1 scalars
  Var vstack_scalars(const std::vector<Var>& parts) {
    if (parts.empty()) throw StructureError("vstack_scalars of nothing");
    MatrixXd out(static_cast<Eigen::Index>(parts.size()), 1);
    bool any = false;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      out(static_cast<Eigen::Index>(i), 0) = sval(parts[i]);
      any = any || rg(parts[i]);
    }
    return push(std::move(out), any, [parts](Tape& t, const MatrixXd& g) {
      for (std::size_t i = 0; i < parts.size(); ++i)
        if (t.rg(parts[i])) t.adj(parts[i])(0, 0) += g(static_cast<Eigen::Index>(i), 0);
    });
  }

  // column-major reshape, same element order
  Var reshape(Var a, Eigen::Index r, Eigen::Index c) {
    if (val(a).size() != r * c) throw StructureError("reshape size mismatch");
    MatrixXd out = Eigen::Map<const MatrixXd>(val(a).data(), r, c);
    return push(std::move(out), rg(a), [a](Tape& t, const MatrixXd& g) {
      const MatrixXd& v = t.val(a);
      t.adj(a) += Eigen::Map<const MatrixXd>(g.data(), v.rows(), v.cols());
    });
  }

  Var tile_rows(Var a, int times) {
    if (times < 1) throw StructureError("tile_rows needs times >= 1");
    const Eigen::Index n = val(a).rows();
    MatrixXd out(n * times, val(a).cols());
    for (int s = 0; s < times; ++s) out.middleRows(s * n, n) = val(a);
    return push(std::move(out), rg(a), [a, times, n](Tape& t, const MatrixXd& g) {
      for (int s = 0; s < times; ++s) t.adj(a) += g.middleRows(s * n, n);
    });
  }

  // ---- elementwise maps ----
  Var exp(Var a) {
    MatrixXd out = val(a).array().exp().matrix();
    return push(std::move(out), rg(a), [a](Tape& t, const MatrixXd& g) {
      // reuse the stored output: d exp = exp
      t.adj(a) += g.cwiseProduct(t.out_val());
    });
  }

  Var log(Var a) {
    return push(MatrixXd(val(a).array().log().matrix()), rg(a), [a](Tape& t, const MatrixXd& g) {
      t.adj(a) += g.cwiseQuotient(t.val(a));
    });
  }

  Var sqrt(Var a) {
    MatrixXd out = val(a).array().sqrt().matrix();
    return push(std::move(out), rg(a), [a](Tape& t, const MatrixXd& g) {
      t.adj(a) += (0.5 * g.array() / t.val(a).array().sqrt().max(1e-150)).matrix();
    });
  }

  Var square(Var a) {
    return push(MatrixXd(val(a).array().square().matrix()), rg(a), [a](Tape& t, const MatrixXd& g) {
      t.adj(a) += 2.0 * g.cwiseProduct(t.val(a));
    });
  }

  // max(a, c) elementwise, zero gradient where clamped
  Var clamp_min(Var a, double c) {
    return push(MatrixXd(val(a).array().max(c).matrix()), rg(a), [a, c](Tape& t, const MatrixXd& g) {
      t.adj(a) += (t.val(a).array() > c).cast<double>().matrix().cwiseProduct(g);
    });
  }

  // ---- reductions ----
  Var sum(Var a) {
    return push(MatrixXd::Constant(1, 1, val(a).sum()), rg(a),
                [a](Tape& t, const MatrixXd& g) {
                  t.adj(a).array() += g(0, 0);
                });
  }

  Var rowsum(Var a) {
    return push(val(a).rowwise().sum(), rg(a), [a](Tape& t, const MatrixXd& g) {
      t.adj(a).colwise() += g.col(0);
    });
  }

  Var trace(Var a) {
    if (val(a).rows() != val(a).cols()) throw StructureError("trace of non-square");
    return push(MatrixXd::Constant(1, 1, val(a).trace()), rg(a),
                [a](Tape& t, const MatrixXd& g) {
                  t.adj(a).diagonal().array() += g(0, 0);
                });
  }

  Var diag(Var a) {
    if (val(a).rows() != val(a).cols()) throw StructureError("diag of non-square");
    return push(val(a).diagonal(), rg(a), [a](Tape& t, const MatrixXd& g) {
      t.adj(a).diagonal() += g.col(0);
    });
  }

  Var make_diag(Var a) {
    if (val(a).cols() != 1) throw StructureError("make_diag needs a column");
    MatrixXd out = val(a).col(0).asDiagonal();
    return push(std::move(out), rg(a), [a](Tape& t, const MatrixXd& g) {
      t.adj(a).col(0) += g.diagonal();
    });
  }

  // Lower triangle of the input, diagonal exponentiated, upper zeroed — the
  // unconstrained parameterization of a Cholesky factor.
  Var ltri_expdiag(Var a) {
    if (val(a).rows() != val(a).cols()) throw StructureError("ltri_expdiag of non-square");
    MatrixXd out = val(a).triangularView<Eigen::StrictlyLower>();
    out.diagonal() = val(a).diagonal().array().exp().matrix();
    return push(std::move(out), rg(a), [a](Tape& t, const MatrixXd& g) {
      MatrixXd d = g.triangularView<Eigen::StrictlyLower>();
      d.diagonal() = g.diagonal().cwiseProduct(t.val(a).diagonal().array().exp().matrix());
      t.adj(a) += d;
    });
  }

  // ---- factorizations and solves ----
  // Lower Cholesky factor of a + jitter·I via the escalation ladder. The
  // adjoint of the (symmetric) input is the symmetrized pullback
  //   ā = ½ L⁻ᵀ (Φ(Lᵀ L̄) + Φ(Lᵀ L̄)ᵀ) L⁻¹,  Φ = tril with halved diagonal,
  // plus jitter/tr(a) · tr(ā) on the diagonal because the jitter scales with
  // the diagonal mean of the input.
  Var chol(Var a, const JitterLadder& ladder = {}) {
    CholFactor f = ggp::chol(val(a), ladder);
    chol_dims_.push_back(f.L.rows());
    const double jit = f.jitter;
    return push(std::move(f.L), rg(a), [a, jit](Tape& t, const MatrixXd& g) {
      const MatrixXd& L = t.out_val();
      MatrixXd phi = (L.transpose() * g).triangularView<Eigen::Lower>();
      phi.diagonal() *= 0.5;
      MatrixXd s = phi + phi.transpose();
      MatrixXd t1 = L.transpose().triangularView<Eigen::Upper>().solve(s);  // L⁻ᵀ s
      MatrixXd t2 = L.transpose().triangularView<Eigen::Upper>().solve(t1.transpose());
      MatrixXd abar = 0.5 * t2.transpose();  // ½ L⁻ᵀ s L⁻¹
      const double tr_a = t.val(a).trace();
      if (jit > 0.0 && tr_a > 0.0) abar.diagonal().array() += jit / tr_a * abar.trace();
      t.adj(a) += abar;
    });
  }

  // (L Lᵀ)⁻¹ b given the lower factor
  Var chol_solve(Var l, Var b) {
    const MatrixXd& L = val(l);
    if (L.rows() != val(b).rows()) throw StructureError("chol_solve shape mismatch");
    MatrixXd y = L.triangularView<Eigen::Lower>().solve(val(b));
    y = L.transpose().triangularView<Eigen::Upper>().solve(y);
    return push(std::move(y), rg(l) || rg(b),
                [l, b, rg_l = rg(l), rg_b = rg(b)](Tape& t, const MatrixXd& g) {
                  const MatrixXd& L = t.val(l);
                  MatrixXd z = L.triangularView<Eigen::Lower>().solve(g);
                  z = L.transpose().triangularView<Eigen::Upper>().solve(z);  // K⁻¹ ḡ
                  if (rg_b) t.adj(b) += z;
                  if (rg_l) {
                    // K̄ = −z yᵀ ; L̄ += (K̄ + K̄ᵀ) L, masked to the lower
                    // triangle since the forward pass never reads above it
                    const MatrixXd& y = t.out_val();
                    MatrixXd dl = (z * y.transpose() + y * z.transpose()) * L;
                    t.adj(l) -= MatrixXd(dl.triangularView<Eigen::Lower>());
                  }
                });
  }

  Var kron(Var a, Var b) {
    const MatrixXd &A = val(a), &B = val(b);
    if (A.rows() > 64 || B.rows() > 64)
      throw StructureError("dense kron op is test-scale only");
    MatrixXd out(A.rows() * B.rows(), A.cols() * B.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i)
      for (Eigen::Index j = 0; j < A.cols(); ++j)
        out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
    return push(std::move(out), rg(a) || rg(b),
                [a, b, rg_a = rg(a), rg_b = rg(b)](Tape& t, const MatrixXd& g) {
                  const MatrixXd &A = t.val(a), &B = t.val(b);
                  for (Eigen::Index i = 0; i < A.rows(); ++i)
                    for (Eigen::Index j = 0; j < A.cols(); ++j) {
                      auto blk = g.block(i * B.rows(), j * B.cols(), B.rows(), B.cols());
                      if (rg_a) t.adj(a)(i, j) += (blk.array() * B.array()).sum();
                      if (rg_b) t.adj(b) += A(i, j) * blk;
                    }
                });
  }

  // ---- kernel constructors ----
  // kern must outlive the tape; logh is an H×1 column, X/Z are point matrices.
  Var gram(const KernelSpec* kern, Var logh, Var x) {
    MatrixXd out = kern->gram(val(logh).col(0), val(x));
    return push(std::move(out), rg(logh) || rg(x),
                [kern, logh, x, rg_h = rg(logh), rg_x = rg(x)](Tape& t, const MatrixXd& g) {
                  VectorXd gh = VectorXd::Zero(t.val(logh).rows());
                  MatrixXd gx = MatrixXd::Zero(t.val(x).rows(), t.val(x).cols());
                  MatrixXd gz = MatrixXd::Zero(t.val(x).rows(), t.val(x).cols());
                  kern->accumulate_cross_gradients(t.val(logh).col(0), t.val(x), t.val(x), g,
                                                   rg_h ? &gh : nullptr, rg_x ? &gx : nullptr,
                                                   rg_x ? &gz : nullptr);
                  if (rg_h) t.adj(logh).col(0) += gh;
                  if (rg_x) t.adj(x) += gx + gz;
                });
  }

  Var cross_gram(const KernelSpec* kern, Var logh, Var x, Var z) {
    MatrixXd out = kern->cross_gram(val(logh).col(0), val(x), val(z));
    return push(std::move(out), rg(logh) || rg(x) || rg(z),
                [kern, logh, x, z, rg_h = rg(logh), rg_x = rg(x), rg_z = rg(z)](
                    Tape& t, const MatrixXd& g) {
                  VectorXd gh = VectorXd::Zero(t.val(logh).rows());
                  MatrixXd gx = MatrixXd::Zero(t.val(x).rows(), t.val(x).cols());
                  MatrixXd gz = MatrixXd::Zero(t.val(z).rows(), t.val(z).cols());
                  kern->accumulate_cross_gradients(t.val(logh).col(0), t.val(x), t.val(z), g,
                                                   rg_h ? &gh : nullptr, rg_x ? &gx : nullptr,
                                                   rg_z ? &gz : nullptr);
                  if (rg_h) t.adj(logh).col(0) += gh;
                  if (rg_x) t.adj(x) += gx;
                  if (rg_z) t.adj(z) += gz;
                });
  }

  Var gram_diag(const KernelSpec* kern, Var logh, Var x) {
    MatrixXd out = kern->gram_diag(val(logh).col(0), val(x));
    return push(std::move(out), rg(logh),
                [kern, logh, x, rg_h = rg(logh)](Tape& t, const MatrixXd& g) {
                  if (!rg_h) return;
                  VectorXd gh = VectorXd::Zero(t.val(logh).rows());
                  kern->accumulate_diag_gradients(t.val(logh).col(0), t.val(x), g.col(0), &gh);
                  t.adj(logh).col(0) += gh;
                });
  }

  // ---- probability helpers ----
  Var softmax(Var a) {
    if (val(a).cols() != 1) throw StructureError("softmax needs a column");
    Eigen::ArrayXd e = (val(a).col(0).array() - val(a).col(0).maxCoeff()).exp();
    MatrixXd p = (e / e.sum()).matrix();
    return push(std::move(p), rg(a), [a](Tape& t, const MatrixXd& g) {
      const MatrixXd& p = t.out_val();
      const double dot = (p.array() * g.array()).sum();
      t.adj(a) += p.cwiseProduct(g) - dot * p;
    });
  }

  Var lse(Var a) {
    if (val(a).cols() != 1) throw StructureError("lse needs a column");
    const double mx = val(a).col(0).maxCoeff();
    const double out = mx + std::log((val(a).col(0).array() - mx).exp().sum());
    return push(MatrixXd::Constant(1, 1, out), rg(a), [a](Tape& t, const MatrixXd& g) {
      Eigen::ArrayXd e = (t.val(a).col(0).array() - t.val(a).col(0).maxCoeff()).exp();
      t.adj(a).col(0) += (g(0, 0) * e / e.sum()).matrix();
    });
  }

  // ---- reverse sweep ----
  void backward(Var root) {
    if (node(root).value.size() != 1)
      throw StructureError("backward root must be scalar");
    for (auto& n : nodes_) n.adj.resize(0, 0);
    adj(root)(0, 0) = 1.0;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.back || n.adj.size() == 0) continue;
      current_out_ = id;
      n.back(*this, n.adj);
    }
    current_out_ = -1;
  }

  MatrixXd grad(Var a) const {
    const Node& n = node(a);
    if (n.adj.size() == 0) return MatrixXd::Zero(n.value.rows(), n.value.cols());
    return n.adj;
  }

  bool rg(Var a) const { return node(a).requires_grad; }

  // Lazily zero-initialized adjoint accumulator.
  MatrixXd& adj(Var a) {
    Node& n = nodes_.at(static_cast<std::size_t>(a.id));
    if (n.adj.size() == 0) n.adj = MatrixXd::Zero(n.value.rows(), n.value.cols());
    return n.adj;
  }

 private:
  struct Node {
    MatrixXd value;
    MatrixXd adj;
    bool requires_grad = false;
    std::function<void(Tape&, const MatrixXd&)> back;
  };

  std::vector<Node> nodes_;
  std::vector<Eigen::Index> chol_dims_;
  int current_out_ = -1;

  const Node& node(Var a) const { return nodes_.at(static_cast<std::size_t>(a.id)); }

  // Value of the node whose backward rule is currently running.
  const MatrixXd& out_val() const {
    return nodes_.at(static_cast<std::size_t>(current_out_)).value;
  }

  Var push(MatrixXd v, bool requires_grad,
           std::function<void(Tape&, const MatrixXd&)> back) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    if (requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void check_same_shape(Var a, Var b, const char* what) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw StructureError(std::string(what) + " shape mismatch");
  }
};

}  // namespace ggp::ad
