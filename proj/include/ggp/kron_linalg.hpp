#pragma once

#include <cmath>

#include "ggp/common.hpp"

namespace ggp {

// Escalating-jitter Cholesky: rung a applies base·multiplier^a × mean(diag).
struct JitterLadder {
  double base_rel = 1e-6;
  double multiplier = 10.0;
  int max_attempts = 4;
};

// Lower-triangular factor of M + jitter·I, with the jitter that was applied.
struct CholFactor {
  MatrixXd L;
  double jitter = 0.0;

  Eigen::Index dim() const { return L.rows(); }

  double logdet() const { return 2.0 * L.diagonal().array().log().sum(); }

  // (L Lᵀ)⁻¹ B
  MatrixXd solve(const MatrixXd& B) const {
    MatrixXd Y = L.triangularView<Eigen::Lower>().solve(B);
    return L.transpose().triangularView<Eigen::Upper>().solve(Y);
  }

  // L⁻¹ B (half-solve, used for whitened quadratic forms)
  MatrixXd lower_solve(const MatrixXd& B) const {
    return L.triangularView<Eigen::Lower>().solve(B);
  }

  // diag((L Lᵀ)⁻¹); entry j is the squared norm of column j of L⁻¹.
  VectorXd inv_diag() const {
    MatrixXd Linv = lower_solve(MatrixXd::Identity(dim(), dim()));
    return Linv.array().square().colwise().sum().transpose();
  }

  double trace_inv() const {
    MatrixXd Linv = lower_solve(MatrixXd::Identity(dim(), dim()));
    return Linv.array().square().sum();
  }
};

// Cholesky with the jitter ladder. Reports the minimal successful rung.
inline CholFactor chol(const MatrixXd& M, const JitterLadder& ladder = {}) {
  if (M.rows() != M.cols()) throw InputError("chol needs a square matrix");
  const double scale = M.diagonal().mean();
  double jitter = ladder.base_rel * scale;
  for (int attempt = 0; attempt < ladder.max_attempts; ++attempt) {
    Eigen::LLT<MatrixXd> llt(M + jitter * MatrixXd::Identity(M.rows(), M.cols()));
    if (llt.info() == Eigen::Success) return CholFactor{MatrixXd(llt.matrixL()), jitter};
    jitter *= ladder.multiplier;
  }
  throw NotPositiveDefinite("matrix not positive definite after " +
                            std::to_string(ladder.max_attempts) + " jitter attempts");
}

// left ⊗ right with both factors pre-factorized; the big matrix is never
// formed. left indexes functions (Q_r), right indexes inputs (m or n).
struct KronPSD {
  CholFactor left;
  CholFactor right;

  Eigen::Index rows() const { return left.dim() * right.dim(); }
};

inline KronPSD make_kron_psd(const MatrixXd& left, const MatrixXd& right,
                             const JitterLadder& ladder = {}) {
  return KronPSD{chol(left, ladder), chol(right, ladder)};
}

// logdet(left ⊗ right) = dim(right)·logdet(left) + dim(left)·logdet(right).
inline double kron_logdet(const CholFactor& left, const CholFactor& right) {
  return static_cast<double>(right.dim()) * left.logdet() +
         static_cast<double>(left.dim()) * right.logdet();
}

inline double kron_logdet(const KronPSD& K) { return kron_logdet(K.left, K.right); }

// (left ⊗ right)⁻¹ B, columnwise via vec(right⁻¹ V leftᵀ⁻¹) with V the m×Q_r
// unstacking of a column (function-major: column j of V = function j's block).
inline MatrixXd kron_solve(const KronPSD& K, const MatrixXd& B) {
  const Eigen::Index q = K.left.dim(), m = K.right.dim();
  if (B.rows() != q * m) throw InputError("kron_solve: row count must be Q_r*m");
  MatrixXd out(B.rows(), B.cols());
  for (Eigen::Index c = 0; c < B.cols(); ++c) {
    Eigen::Map<const MatrixXd> V(B.col(c).data(), m, q);
    MatrixXd W = K.right.solve(V);               // right⁻¹ V
    MatrixXd T = K.left.solve(W.transpose());    // left⁻¹ Vᵀ right⁻ᵀ
    out.col(c) = Eigen::Map<const VectorXd>(MatrixXd(T.transpose()).data(), q * m);
  }
  return out;
}

// tr((left ⊗ right)⁻¹) = tr(left⁻¹)·tr(right⁻¹)
inline double kron_trace_inv(const KronPSD& K) {
  return K.left.trace_inv() * K.right.trace_inv();
}

// tr(K⁻¹ S) for diagonal S: Kronecker inverse diagonal dotted with diag(S).
// diag entries follow the same function-major layout as kron_solve.
inline double trace_inv_times(const KronPSD& K, const VectorXd& s_diag) {
  const Eigen::Index q = K.left.dim(), m = K.right.dim();
  if (s_diag.size() != q * m) throw InputError("trace_inv_times: diagonal has wrong length");
  VectorXd dl = K.left.inv_diag(), dr = K.right.inv_diag();
  double acc = 0.0;
  for (Eigen::Index j = 0; j < q; ++j) acc += dl(j) * dr.dot(s_diag.segment(j * m, m));
  return acc;
}

// tr(K⁻¹ (S_hh ⊗ S_zz)) = tr(left⁻¹ S_hh)·tr(right⁻¹ S_zz)
inline double trace_inv_times(const KronPSD& K, const MatrixXd& S_hh, const MatrixXd& S_zz) {
  if (S_hh.rows() != K.left.dim() || S_zz.rows() != K.right.dim())
    throw InputError("trace_inv_times: factor shapes do not match");
  return K.left.solve(S_hh).trace() * K.right.solve(S_zz).trace();
}

}  // namespace ggp
