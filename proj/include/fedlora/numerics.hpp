#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fedlora/matrix.hpp"

namespace fedlora {

/// Raised when a computation produces non-finite values.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic random stream identified by (root_seed, stream_id).
///
/// The engine seed is a SplitMix64 mix of both ids, so streams with distinct
/// ids are decorrelated while equal ids replay the same sequence. A stream is
/// single-owner; copy it to fork an identical replay.
class RngStream {
 public:
  RngStream(std::uint64_t root_seed, std::uint64_t stream_id);

  std::uint64_t root_seed() const { return root_seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform(double lo = 0.0, double hi = 1.0);
  std::uint64_t next_u64() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t root_seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t splitmix64(std::uint64_t x);

/// Stream id for (purpose, index) pairs, e.g. (kDataStream, client_id).
std::uint64_t derive_stream_id(std::uint64_t purpose, std::uint64_t index);

struct SvdResult {
  std::vector<double> singular_values;  // descending
  Matrix left_vectors;                  // rows × k
  Matrix right_vectors;                 // cols × k
};

/// Singular values below this fraction of σ_max count as exact zeros.
inline constexpr double kRankTolerance = 1e-10;

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double mean, double stddev,
                       RngStream& rng);

/// Thin SVD (k = min(rows, cols)) with singular values sorted descending.
SvdResult svd(const Matrix& m);

std::vector<double> singular_values(const Matrix& m);

/// Smallest j whose top-j singular values reach `threshold` of their sum;
/// 0 for the zero matrix.
std::size_t effective_rank(const Matrix& m, double threshold);

/// Count of singular values above kRankTolerance·σ_max.
std::size_t numerical_rank(const Matrix& m);

double frobenius_distance(const Matrix& a, const Matrix& b);

/// Orthonormal basis (as columns) of the column space of m.
Matrix orthonormal_column_basis(const Matrix& m);

/// Draws D (m×out_rank) with columns orthogonal to col(colspace_of) and
/// C (out_rank×n) with rows orthogonal to row(rowspace_of). Gaussian draws
/// are projected onto each complement and re-orthogonalized.
std::pair<Matrix, Matrix> orthogonal_complement_sample(const Matrix& rowspace_of,
                                                       const Matrix& colspace_of,
                                                       std::size_t out_rank, RngStream& rng);

struct SymmetricEigen {
  std::vector<double> values;  // ascending
  Matrix vectors;              // columns
};

SymmetricEigen symmetric_eigen(const Matrix& m);

/// Solves m·x = rhs for symmetric positive-definite m.
Matrix solve_spd(const Matrix& m, const Matrix& rhs);

/// Solves m·x = rhs for square m by partial-pivot LU; throws on singular m.
Matrix solve(const Matrix& m, const Matrix& rhs);

}  // namespace fedlora
