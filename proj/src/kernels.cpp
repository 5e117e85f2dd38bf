#include "fedlora/kernels.hpp"

#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fedlora::kernels {
namespace {

struct Operands {
  Matrix lhs;  // op(a), materialized row-major
  Matrix rhs;  // op(b)
};

Operands prepare(const Matrix& a, Op op_a, const Matrix& b, Op op_b) {
  Operands ops{op_a == Op::kTranspose ? a.transpose() : a,
               op_b == Op::kTranspose ? b.transpose() : b};
  if (ops.lhs.cols() != ops.rhs.rows()) {
    throw std::invalid_argument("gemm: inner dimension mismatch " + shape_string(ops.lhs) +
                                " * " + shape_string(ops.rhs));
  }
  return ops;
}

// One output row; i-k-j order so every entry accumulates over k in the same
// sequence regardless of which thread owns the row.
inline void accumulate_row(const Matrix& lhs, const Matrix& rhs, Matrix& out, std::size_t i) {
  const std::size_t inner = lhs.cols();
  const std::size_t n = rhs.cols();
  double* c = out.data() + i * n;
  const double* a = lhs.data() + i * inner;
  for (std::size_t k = 0; k < inner; ++k) {
    const double aik = a[k];
    const double* b = rhs.data() + k * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += aik * b[j];
  }
}

}  // namespace

Matrix gemm_serial(const Matrix& a, Op op_a, const Matrix& b, Op op_b) {
  const Operands ops = prepare(a, op_a, b, op_b);
  Matrix out(ops.lhs.rows(), ops.rhs.cols());
  for (std::size_t i = 0; i < out.rows(); ++i) accumulate_row(ops.lhs, ops.rhs, out, i);
  return out;
}

Matrix gemm_parallel(const Matrix& a, Op op_a, const Matrix& b, Op op_b) {
  const Operands ops = prepare(a, op_a, b, op_b);
  Matrix out(ops.lhs.rows(), ops.rhs.cols());
  const auto rows = static_cast<long long>(out.rows());
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < rows; ++i)
    accumulate_row(ops.lhs, ops.rhs, out, static_cast<std::size_t>(i));
  return out;
}

Matrix gemm(const Matrix& a, Op op_a, const Matrix& b, Op op_b) {
  const std::size_t m = op_a == Op::kTranspose ? a.cols() : a.rows();
  const std::size_t k = op_a == Op::kTranspose ? a.rows() : a.cols();
  const std::size_t n = op_b == Op::kTranspose ? b.rows() : b.cols();
  bool nested = false;
#ifdef _OPENMP
  nested = omp_in_parallel() != 0;
#endif
  if (!nested && m * k * n >= kParallelThreshold) return gemm_parallel(a, op_a, b, op_b);
  return gemm_serial(a, op_a, b, op_b);
}

}  // namespace fedlora::kernels
