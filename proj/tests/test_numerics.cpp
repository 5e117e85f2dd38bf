#include "doctest.h"

#include <cmath>
#include <numeric>

#include "fedlora/numerics.hpp"
#include "oracles.hpp"

using namespace fedlora;

TEST_CASE("gaussian_matrix with zero spread returns the mean") {
  RngStream rng(1, 2);
  CHECK(gaussian_matrix(2, 2, 0.0, 0.0, rng) == Matrix(2, 2));
  CHECK(gaussian_matrix(2, 3, 1.5, 0.0, rng) == Matrix(2, 3, 1.5));
}

TEST_CASE("gaussian_matrix is a pure function of the stream state") {
  RngStream a(42, 7);
  RngStream b(42, 7);
  CHECK(gaussian_matrix(1000, 10, 0, 1, a) == gaussian_matrix(1000, 10, 0, 1, b));
  RngStream c(42, 8);
  RngStream d(42, 7);
  CHECK_FALSE(gaussian_matrix(5, 5, 0, 1, c) == gaussian_matrix(5, 5, 0, 1, d));
}

TEST_CASE("gaussian_matrix sample moments") {
  RngStream rng(3, 0);
  const Matrix g = gaussian_matrix(1000, 10, 0, 1, rng);
  double sum = 0.0;
  for (double v : g.values()) sum += v;
  const double mean = sum / static_cast<double>(g.size());
  double ss = 0.0;
  for (double v : g.values()) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(g.size() - 1));
  CHECK(std::abs(mean) < 0.05);
  CHECK(sd >= 0.97);
  CHECK(sd <= 1.03);
}

TEST_CASE("gaussian_matrix argument checks") {
  RngStream rng(1, 1);
  CHECK_THROWS_AS(gaussian_matrix(0, 3, 0, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_matrix(3, 0, 0, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_matrix(3, 3, 0, -1, rng), std::invalid_argument);
}

TEST_CASE("svd of simple diagonal matrices") {
  const auto id = singular_values(Matrix::identity(3));
  REQUIRE(id.size() == 3);
  for (double s : id) CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  const auto d = singular_values(Matrix{{1, 0, 0}, {0, 3, 0}, {0, 0, 2}});
  CHECK(d[0] == doctest::Approx(3.0));
  CHECK(d[1] == doctest::Approx(2.0));
  CHECK(d[2] == doctest::Approx(1.0));
}

TEST_CASE("svd of a generic rank-3 product has exactly three nonzero values") {
  RngStream rng(5, 0);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix m = matmul(gaussian_matrix(10, 3, 0, 1, rng), gaussian_matrix(3, 10, 0, 1, rng));
    const auto s = singular_values(m);
    const auto above = std::count_if(s.begin(), s.end(), [](double v) { return v > 1e-8; });
    CHECK(static_cast<std::size_t>(above) == oracle::elimination_rank(m));
    CHECK(above == 3);
  }
}

TEST_CASE("svd reconstructs random matrices up to 64x64") {
  RngStream rng(6, 0);
  for (auto [r, c] : {std::pair{1, 1}, {5, 3}, {3, 5}, {20, 20}, {64, 64}, {64, 17}}) {
    const Matrix m = gaussian_matrix(r, c, 0, 1, rng);
    const SvdResult s = svd(m);
    CHECK(std::is_sorted(s.singular_values.rbegin(), s.singular_values.rend()));
    Matrix us = s.left_vectors;
    for (std::size_t i = 0; i < us.rows(); ++i)
      for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= s.singular_values[j];
    const Matrix back = oracle::naive_matmul(us, oracle::naive_transpose(s.right_vectors));
    CHECK(frobenius_distance(back, m) / m.norm() < 1e-8);
  }
}

TEST_CASE("svd rejects empty and non-finite input") {
  CHECK_THROWS_AS(svd(Matrix()), std::invalid_argument);
  Matrix bad(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(svd(bad), std::invalid_argument);
}

TEST_CASE("effective_rank counts singular values to the threshold") {
  // Singular values (5, 4, 3, 0, 0): cumulative 5, 9, 12 against 0.9 * 12 = 10.8.
  Matrix m(5, 5);
  m(0, 0) = 5;
  m(1, 1) = 4;
  m(2, 2) = 3;
  CHECK(effective_rank(m, 0.9) == 3);
  CHECK(effective_rank(m, 0.4) == 1);
  CHECK(effective_rank(Matrix(4, 6), 0.9) == 0);
  CHECK_THROWS_AS(effective_rank(m, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(effective_rank(m, 1.5), std::invalid_argument);
}

TEST_CASE("effective_rank is bounded and monotone in the threshold") {
  RngStream rng(8, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix m = gaussian_matrix(7, 4, 0, 1, rng);
    std::size_t prev = 0;
    for (double tau : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0}) {
      const std::size_t r = effective_rank(m, tau);
      CHECK(r >= prev);
      CHECK(r <= 4);
      prev = r;
    }
  }
}

TEST_CASE("effective_rank recovers an exact rank-k product with separated spectrum") {
  RngStream rng(9, 0);
  for (std::size_t k : {1, 2, 3, 5}) {
    // Q1 diag(σ) Q2ᵀ with σ in [1, 2].
    const Matrix q1 = orthonormal_column_basis(gaussian_matrix(10, k, 0, 1, rng));
    const Matrix q2 = orthonormal_column_basis(gaussian_matrix(10, k, 0, 1, rng));
    Matrix s(k, k);
    for (std::size_t i = 0; i < k; ++i) s(i, i) = 2.0 - static_cast<double>(i) / static_cast<double>(k);
    const Matrix m = matmul(matmul(q1, s), q2.transpose());
    for (double tau : {0.9, 0.99, 1.0 - 1e-9}) CHECK(effective_rank(m, tau) == k);
  }
}

TEST_CASE("frobenius_distance") {
  CHECK(frobenius_distance(Matrix(2, 2, 3.0), Matrix(2, 2, 3.0)) == 0.0);
  CHECK(frobenius_distance(Matrix(2, 2), Matrix(2, 2, 1.0)) == doctest::Approx(2.0));
  RngStream rng(10, 0);
  const Matrix a = gaussian_matrix(10, 10, 0, 1, rng);
  const Matrix b = gaussian_matrix(10, 10, 0, 1, rng);
  const Matrix d = a - b;
  CHECK(frobenius_distance(a, b) ==
        doctest::Approx(std::sqrt(oracle::trace(oracle::naive_matmul(d, oracle::naive_transpose(d))))).epsilon(1e-12));
  CHECK_THROWS_AS(frobenius_distance(Matrix(2, 2), Matrix(2, 3)), std::invalid_argument);
}

TEST_CASE("orthogonal_complement_sample is orthogonal and rank-additive") {
  RngStream rng(20, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix B0 = gaussian_matrix(10, 4, 0, 1, rng);
    const Matrix A0 = gaussian_matrix(4, 10, 0, 1, rng);
    auto [D, C] = orthogonal_complement_sample(A0, B0, 2, rng);
    CHECK(D.rows() == 10);
    CHECK(D.cols() == 2);
    CHECK(C.rows() == 2);
    CHECK(C.cols() == 10);
    CHECK(oracle::max_abs(oracle::naive_matmul(oracle::naive_transpose(D), B0)) < 1e-10);
    CHECK(oracle::max_abs(oracle::naive_matmul(C, oracle::naive_transpose(A0))) < 1e-10);
    const Matrix sum = matmul(B0, A0) + matmul(D, C);
    CHECK(oracle::elimination_rank(matmul(B0, A0)) == 4);
    CHECK(oracle::elimination_rank(sum) == 6);
    CHECK(numerical_rank(sum) == 6);
  }
}

TEST_CASE("orthogonal_complement_sample edge cases") {
  RngStream rng(21, 0);
  const Matrix B0 = gaussian_matrix(5, 3, 0, 1, rng);
  const Matrix A0 = gaussian_matrix(3, 6, 0, 1, rng);
  auto [D, C] = orthogonal_complement_sample(A0, B0, 0, rng);
  CHECK(D.cols() == 0);
  CHECK(C.rows() == 0);
  CHECK(matmul(D, C) == Matrix(5, 6));
  CHECK_THROWS_AS(orthogonal_complement_sample(A0, B0, 3, rng), std::invalid_argument);
}

TEST_CASE("rng streams with equal ids replay and distinct ids diverge") {
  RngStream a(99, derive_stream_id(1, 2));
  RngStream b(99, derive_stream_id(1, 2));
  RngStream c(99, derive_stream_id(1, 3));
  RngStream d(99, derive_stream_id(2, 2));
  bool all_equal = true;
  bool c_differs = false;
  bool d_differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    all_equal &= va == b.next_u64();
    c_differs |= va != c.next_u64();
    d_differs |= va != d.next_u64();
  }
  CHECK(all_equal);
  CHECK(c_differs);
  CHECK(d_differs);
  CHECK(derive_stream_id(1, 2) != derive_stream_id(2, 1));
}

TEST_CASE("linear solves") {
  const Matrix spd{{4, 1}, {1, 3}};
  const Matrix rhs{{1}, {2}};
  const Matrix x = solve_spd(spd, rhs);
  CHECK(oracle::relative_error(matmul(spd, x), rhs) < 1e-14);
  CHECK_THROWS_AS(solve_spd(Matrix{{1, 2}, {2, 1}}, rhs), std::invalid_argument);
  CHECK_THROWS_AS(solve(Matrix{{1, 2}, {2, 4}}, rhs), std::invalid_argument);
  const auto eig = symmetric_eigen(spd);
  CHECK(eig.values[0] <= eig.values[1]);
  CHECK(eig.values[0] + eig.values[1] == doctest::Approx(7.0));
}
