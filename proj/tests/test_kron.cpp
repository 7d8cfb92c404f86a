#include <catch2/catch_amalgamated.hpp>

#include "ggp/kron_linalg.hpp"
#include "test_support.hpp"

using ggp::CholFactor;
using ggp::JitterLadder;
using ggp::KronPSD;
using ggp::MatrixXd;
using ggp::VectorXd;
using testsup::dense_kron;

TEST_CASE("chol of the identity applies the base jitter rung") {
  MatrixXd I = MatrixXd::Identity(4, 4);
  CholFactor f = ggp::chol(I);
  CHECK(f.jitter == Catch::Approx(1e-6));
  CHECK((f.L * f.L.transpose() - (I + f.jitter * I)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("chol reconstructs a random SPD matrix") {
  ggp::Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    MatrixXd M = testsup::random_spd(rng, 6, 1.0);
    CholFactor f = ggp::chol(M);
    MatrixXd R = f.L * f.L.transpose() - M - f.jitter * MatrixXd::Identity(6, 6);
    CHECK(R.cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("chol reports the minimal successful rung") {
  // eigenvalue -5e-5: rungs 1e-6·scale and 1e-5·scale fail, 1e-4·scale works
  MatrixXd M = VectorXd{{1.0, 1.0, -5e-5}}.asDiagonal();
  CholFactor f = ggp::chol(M);
  CHECK(f.jitter == Catch::Approx(1e-4 * M.diagonal().mean()));
}

TEST_CASE("chol throws after exhausting the ladder") {
  MatrixXd M = MatrixXd::Identity(3, 3);
  M(2, 2) = -1.0;  // eigenvalue -1, max jitter 1e-3·(1/3) nowhere near enough
  CHECK_THROWS_AS(ggp::chol(M), ggp::NotPositiveDefinite);
}

TEST_CASE("chol rejects non-square input") {
  CHECK_THROWS_AS(ggp::chol(MatrixXd::Zero(2, 3)), ggp::InputError);
}

TEST_CASE("kron_logdet identity and diagonal cases") {
  JitterLadder no_jitter{0.0, 10.0, 1};
  CholFactor i3 = ggp::chol(MatrixXd::Identity(3, 3), no_jitter);
  CholFactor i5 = ggp::chol(MatrixXd::Identity(5, 5), no_jitter);
  CHECK(ggp::kron_logdet(i3, i5) == Catch::Approx(0.0).margin(1e-12));

  CholFactor a = ggp::chol(2.0 * MatrixXd::Identity(2, 2), no_jitter);
  CholFactor b = ggp::chol(3.0 * MatrixXd::Identity(3, 3), no_jitter);
  CHECK(ggp::kron_logdet(a, b) ==
        Catch::Approx(3.0 * 2.0 * std::log(2.0) + 2.0 * 3.0 * std::log(3.0)));
}

TEST_CASE("kron_logdet matches the dense Kronecker oracle") {
  ggp::Rng rng(9);
  JitterLadder no_jitter{0.0, 10.0, 1};
  for (int t = 0; t < 10; ++t) {
    MatrixXd A = testsup::random_spd(rng, 3, 0.5), B = testsup::random_spd(rng, 4, 0.5);
    double got = ggp::kron_logdet(ggp::chol(A, no_jitter), ggp::chol(B, no_jitter));
    MatrixXd K = dense_kron(A, B);
    double want = std::log(K.determinant());
    CHECK(std::abs(got - want) < 1e-9 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("kron_solve is the identity map for I kron I") {
  JitterLadder no_jitter{0.0, 10.0, 1};
  KronPSD K{ggp::chol(MatrixXd::Identity(3, 3), no_jitter),
            ggp::chol(MatrixXd::Identity(4, 4), no_jitter)};
  ggp::Rng rng(11);
  MatrixXd B = rng.normal_matrix(12, 2);
  CHECK((ggp::kron_solve(K, B) - B).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("kron_solve matches the dense solve and round-trips") {
  ggp::Rng rng(13);
  JitterLadder no_jitter{0.0, 10.0, 1};
  for (int t = 0; t < 10; ++t) {
    MatrixXd A = testsup::random_spd(rng, 5, 0.5), B = testsup::random_spd(rng, 6, 0.5);
    KronPSD K{ggp::chol(A, no_jitter), ggp::chol(B, no_jitter)};
    MatrixXd dense = dense_kron(A, B);
    MatrixXd rhs = rng.normal_matrix(30, 3);
    MatrixXd got = ggp::kron_solve(K, rhs);
    MatrixXd want = dense.llt().solve(rhs);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-8);

    VectorXd v = rng.normal_vector(30);
    VectorXd back = ggp::kron_solve(K, dense * v);
    CHECK((back - v).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("kron_solve layout: vec ordering is function-major") {
  ggp::Rng rng(17);
  JitterLadder no_jitter{0.0, 10.0, 1};
  MatrixXd A = testsup::random_spd(rng, 3, 0.5);  // function factor
  MatrixXd B = testsup::random_spd(rng, 4, 0.5);  // input factor
  KronPSD K{ggp::chol(A, no_jitter), ggp::chol(B, no_jitter)};
  MatrixXd V = rng.normal_matrix(4, 3);  // column j = function j's block
  VectorXd vecV = Eigen::Map<const VectorXd>(V.data(), 12);
  VectorXd got = ggp::kron_solve(K, vecV);
  MatrixXd X = B.llt().solve(V) * A.llt().solve(MatrixXd::Identity(3, 3));
  CHECK((got - Eigen::Map<const VectorXd>(X.data(), 12)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("kron_solve validates the row count") {
  JitterLadder no_jitter{0.0, 10.0, 1};
  KronPSD K{ggp::chol(MatrixXd::Identity(2, 2), no_jitter),
            ggp::chol(MatrixXd::Identity(3, 3), no_jitter)};
  CHECK_THROWS_AS(ggp::kron_solve(K, MatrixXd::Zero(5, 1)), ggp::InputError);
}

TEST_CASE("kron_trace_inv identity and diagonal cases") {
  JitterLadder no_jitter{0.0, 10.0, 1};
  KronPSD K{ggp::chol(MatrixXd::Identity(3, 3), no_jitter),
            ggp::chol(MatrixXd::Identity(5, 5), no_jitter)};
  CHECK(ggp::kron_trace_inv(K) == Catch::Approx(15.0));

  MatrixXd D1 = VectorXd{{2.0, 4.0}}.asDiagonal();
  MatrixXd D2 = VectorXd{{1.0, 5.0}}.asDiagonal();
  KronPSD K2{ggp::chol(D1, no_jitter), ggp::chol(D2, no_jitter)};
  CHECK(ggp::kron_trace_inv(K2) == Catch::Approx(0.75 * 1.2));
}

TEST_CASE("kron_trace_inv matches the dense oracle") {
  ggp::Rng rng(19);
  JitterLadder no_jitter{0.0, 10.0, 1};
  for (int t = 0; t < 10; ++t) {
    MatrixXd A = testsup::random_spd(rng, 4, 0.5), B = testsup::random_spd(rng, 3, 0.5);
    KronPSD K{ggp::chol(A, no_jitter), ggp::chol(B, no_jitter)};
    MatrixXd dense_inv = dense_kron(A, B).inverse();
    CHECK(std::abs(ggp::kron_trace_inv(K) - dense_inv.trace()) < 1e-9);
  }
}

TEST_CASE("trace_inv_times diagonal covariance") {
  JitterLadder no_jitter{0.0, 10.0, 1};
  ggp::Rng rng(23);

  KronPSD I{ggp::chol(MatrixXd::Identity(2, 2), no_jitter),
            ggp::chol(MatrixXd::Identity(3, 3), no_jitter)};
  CHECK(ggp::trace_inv_times(I, VectorXd::Ones(6)) == Catch::Approx(6.0));

  // one nonzero entry s at position p -> s * (K^{-1})_pp
  MatrixXd A = testsup::random_spd(rng, 2, 0.5), B = testsup::random_spd(rng, 3, 0.5);
  KronPSD K{ggp::chol(A, no_jitter), ggp::chol(B, no_jitter)};
  MatrixXd dense_inv = dense_kron(A, B).inverse();
  for (int p = 0; p < 6; ++p) {
    VectorXd s = VectorXd::Zero(6);
    s(p) = 1.7;
    CHECK(ggp::trace_inv_times(K, s) == Catch::Approx(1.7 * dense_inv(p, p)).margin(1e-10));
  }

  // dense random diagonal
  VectorXd s = rng.normal_vector(6).cwiseAbs();
  MatrixXd S = s.asDiagonal();
  CHECK(ggp::trace_inv_times(K, s) == Catch::Approx((dense_inv * S).trace()).margin(1e-10));
}

TEST_CASE("trace_inv_times kron-full covariance matches the dense oracle") {
  ggp::Rng rng(29);
  JitterLadder no_jitter{0.0, 10.0, 1};
  for (int t = 0; t < 10; ++t) {
    MatrixXd A = testsup::random_spd(rng, 4, 0.5), B = testsup::random_spd(rng, 5, 0.5);
    MatrixXd Shh = testsup::random_spd(rng, 4, 0.3), Szz = testsup::random_spd(rng, 5, 0.3);
    KronPSD K{ggp::chol(A, no_jitter), ggp::chol(B, no_jitter)};
    double got = ggp::trace_inv_times(K, Shh, Szz);
    double want = (dense_kron(A, B).inverse() * dense_kron(Shh, Szz)).trace();
    CHECK(std::abs(got - want) < 1e-8 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("CholFactor inv_diag matches the dense inverse diagonal") {
  ggp::Rng rng(31);
  MatrixXd A = testsup::random_spd(rng, 6, 0.5);
  JitterLadder no_jitter{0.0, 10.0, 1};
  CholFactor f = ggp::chol(A, no_jitter);
  VectorXd got = f.inv_diag();
  VectorXd want = A.inverse().diagonal();
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(f.trace_inv() == Catch::Approx(want.sum()));
}
