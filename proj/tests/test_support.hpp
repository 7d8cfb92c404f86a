#pragma once

// Shared oracles for the test suite: finite differences, dense Kronecker
// reference implementations, and random matrix factories. Everything here is
// deliberately naive — the point is independence from the library code paths.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ggp/common.hpp"

namespace testsup {

using ggp::MatrixXd;
using ggp::VectorXd;

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-10, std::abs(a), std::abs(b)});
}

// Central finite differences of a scalar function of a flat parameter vector.
inline VectorXd fd_grad(const std::function<double(const VectorXd&)>& f, VectorXd x,
                        double h = 1e-5) {
  VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double x0 = x(i);
    x(i) = x0 + h;
    const double fp = f(x);
    x(i) = x0 - h;
    const double fm = f(x);
    x(i) = x0;
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Worst relative error between an analytic gradient and its FD estimate,
// with a scale guard so near-zero entries compare absolutely.
inline double max_grad_rel_err(const VectorXd& analytic, const VectorXd& fd) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({1.0, std::abs(analytic(i)), std::abs(fd(i))});
    worst = std::max(worst, std::abs(analytic(i) - fd(i)) / scale);
  }
  return worst;
}

// Dense Kronecker product; guard against accidental large-scale use.
inline MatrixXd dense_kron(const MatrixXd& A, const MatrixXd& B) {
  if (A.rows() > 64 || B.rows() > 64)
    throw std::runtime_error("dense_kron oracle is test-scale only");
  MatrixXd K(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return K;
}

inline MatrixXd random_matrix(ggp::Rng& rng, Eigen::Index r, Eigen::Index c) {
  return rng.normal_matrix(r, c);
}

// Random symmetric positive definite matrix with eigenvalues bounded away
// from zero.
inline MatrixXd random_spd(ggp::Rng& rng, Eigen::Index n, double floor = 0.1) {
  MatrixXd A = rng.normal_matrix(n, n);
  MatrixXd S = A * A.transpose() / static_cast<double>(n);
  S += floor * MatrixXd::Identity(n, n);
  return S;
}

}  // namespace testsup
