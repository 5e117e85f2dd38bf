#pragma once

#include <cstddef>

#include "fedlora/matrix.hpp"

// GEMM kernels. The serial variants are the reference implementation; the
// OpenMP variants split output rows across threads and share the per-row
// inner loop, so both produce bit-identical results.
namespace fedlora::kernels {

enum class Op { kNone, kTranspose };

Matrix gemm_serial(const Matrix& a, Op op_a, const Matrix& b, Op op_b);
Matrix gemm_parallel(const Matrix& a, Op op_a, const Matrix& b, Op op_b);

/// Picks the parallel kernel for large products outside an active parallel
/// region, the serial one otherwise.
Matrix gemm(const Matrix& a, Op op_a, const Matrix& b, Op op_b);

/// Multiply-add count above which gemm() goes parallel.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

}  // namespace fedlora::kernels
