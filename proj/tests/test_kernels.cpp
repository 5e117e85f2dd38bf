#include "doctest.h"

#include "fedlora/kernels.hpp"
#include "fedlora/numerics.hpp"
#include "oracles.hpp"

using namespace fedlora;
using kernels::Op;

TEST_CASE("serial gemm matches a long-double triple loop for every transpose combination") {
  RngStream rng(11, 0);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 2}, {17, 9, 13}, {40, 1, 7}}) {
    const Matrix a = gaussian_matrix(m, k, 0, 1, rng);
    const Matrix b = gaussian_matrix(k, n, 0, 1, rng);
    const Matrix want = oracle::naive_matmul(a, b);
    const Matrix at = oracle::naive_transpose(a);
    const Matrix bt = oracle::naive_transpose(b);
    CHECK(oracle::relative_error(kernels::gemm_serial(a, Op::kNone, b, Op::kNone), want) < 1e-14);
    CHECK(oracle::relative_error(kernels::gemm_serial(at, Op::kTranspose, b, Op::kNone), want) < 1e-14);
    CHECK(oracle::relative_error(kernels::gemm_serial(a, Op::kNone, bt, Op::kTranspose), want) < 1e-14);
    CHECK(oracle::relative_error(kernels::gemm_serial(at, Op::kTranspose, bt, Op::kTranspose), want) < 1e-14);
  }
}

TEST_CASE("parallel gemm is bit-identical to the serial kernel") {
  RngStream rng(12, 0);
  for (auto [m, k, n] : {std::tuple{5, 3, 4}, {64, 64, 64}, {257, 33, 71}}) {
    const Matrix a = gaussian_matrix(m, k, 0, 1, rng);
    const Matrix b = gaussian_matrix(k, n, 0, 1, rng);
    CHECK(kernels::gemm_parallel(a, Op::kNone, b, Op::kNone) == kernels::gemm_serial(a, Op::kNone, b, Op::kNone));
    const Matrix bt = b.transpose();
    CHECK(kernels::gemm_parallel(a, Op::kNone, bt, Op::kTranspose) ==
          kernels::gemm_serial(a, Op::kNone, bt, Op::kTranspose));
  }
}

TEST_CASE("dispatching gemm agrees with the serial kernel above and below the threshold") {
  RngStream rng(13, 0);
  const Matrix small_a = gaussian_matrix(4, 4, 0, 1, rng);
  const Matrix big_a = gaussian_matrix(128, 64, 0, 1, rng);
  const Matrix big_b = gaussian_matrix(64, 96, 0, 1, rng);
  CHECK(matmul(small_a, small_a) == kernels::gemm_serial(small_a, Op::kNone, small_a, Op::kNone));
  CHECK(matmul(big_a, big_b) == kernels::gemm_serial(big_a, Op::kNone, big_b, Op::kNone));
  CHECK(matmul_tn(big_a, big_a) == kernels::gemm_serial(big_a, Op::kTranspose, big_a, Op::kNone));
}

TEST_CASE("gemm rejects mismatched inner dimensions and handles empty inner dimension") {
  CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), std::invalid_argument);
  const Matrix z = matmul(Matrix(3, 0), Matrix(0, 4));
  CHECK(z.rows() == 3);
  CHECK(z.cols() == 4);
  CHECK(z.squared_norm() == 0.0);
}
