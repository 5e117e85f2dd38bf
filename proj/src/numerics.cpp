#include "fedlora/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Dense>

namespace fedlora {
namespace {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const EigenRowMajor> view(const Matrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

Matrix from_eigen(const Eigen::MatrixXd& e) {
  Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index j = 0; j < e.cols(); ++j)
      m(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = e(i, j);
  return m;
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

// m -= basis·(basisᵀ·m)
void project_out(Matrix& m, const Matrix& basis) {
  if (basis.cols() == 0 || m.cols() == 0) return;
  m -= matmul(basis, matmul_tn(basis, m));
}

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_stream_id(std::uint64_t purpose, std::uint64_t index) {
  return splitmix64(splitmix64(purpose) ^ index);
}

RngStream::RngStream(std::uint64_t root_seed, std::uint64_t stream_id)
    : root_seed_(root_seed),
      stream_id_(stream_id),
      engine_(splitmix64(splitmix64(root_seed) ^ splitmix64(stream_id + 0x632be59bd9b4e019ULL))) {}

double RngStream::normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }

double RngStream::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double mean, double stddev,
                       RngStream& rng) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("gaussian_matrix: zero dimension");
  if (!(stddev >= 0.0)) throw std::invalid_argument("gaussian_matrix: negative stddev");
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal(mean, stddev);
  return m;
}

SvdResult svd(const Matrix& m) {
  if (m.empty()) throw std::invalid_argument("svd: empty matrix");
  require_finite(m, "svd");
  Eigen::JacobiSVD<Eigen::MatrixXd> solver(Eigen::MatrixXd(view(m)),
                                           Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult out;
  const auto& sv = solver.singularValues();
  out.singular_values.assign(sv.data(), sv.data() + sv.size());
  out.left_vectors = from_eigen(solver.matrixU());
  out.right_vectors = from_eigen(solver.matrixV());
  return out;
}

std::vector<double> singular_values(const Matrix& m) {
  if (m.empty()) throw std::invalid_argument("singular_values: empty matrix");
  require_finite(m, "singular_values");
  Eigen::JacobiSVD<Eigen::MatrixXd> solver{Eigen::MatrixXd(view(m))};
  const auto& sv = solver.singularValues();
  return {sv.data(), sv.data() + sv.size()};
}

std::size_t effective_rank(const Matrix& m, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("effective_rank: threshold must lie in (0, 1]");
  }
  std::vector<double> s = singular_values(m);
  if (s.empty() || s.front() == 0.0) return 0;
  const double floor = kRankTolerance * s.front();
  for (double& v : s)
    if (v < floor) v = 0.0;
  const double total = std::accumulate(s.begin(), s.end(), 0.0);
  double cumulative = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    cumulative += s[j];
    if (cumulative >= threshold * total) return j + 1;
  }
  return s.size();
}

std::size_t numerical_rank(const Matrix& m) {
  const std::vector<double> s = singular_values(m);
  if (s.empty() || s.front() == 0.0) return 0;
  return static_cast<std::size_t>(std::count_if(
      s.begin(), s.end(), [&](double v) { return v > kRankTolerance * s.front(); }));
}

double frobenius_distance(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "frobenius_distance");
  return (a - b).norm();
}

Matrix orthonormal_column_basis(const Matrix& m) {
  if (m.rows() == 0) return Matrix(0, 0);
  if (m.cols() == 0) return Matrix(m.rows(), 0);
  const SvdResult s = svd(m);
  const std::size_t r = numerical_rank(m);
  return s.left_vectors.block(0, 0, m.rows(), r);
}

std::pair<Matrix, Matrix> orthogonal_complement_sample(const Matrix& rowspace_of,
                                                       const Matrix& colspace_of,
                                                       std::size_t out_rank, RngStream& rng) {
  const std::size_t m = colspace_of.rows();
  const std::size_t n = rowspace_of.cols();
  const Matrix col_basis = orthonormal_column_basis(colspace_of);
  const Matrix row_basis = orthonormal_column_basis(rowspace_of.transpose());
  if (out_rank > m - col_basis.cols() || out_rank > n - row_basis.cols()) {
    throw std::invalid_argument("orthogonal_complement_sample: complement dimension too small for rank " +
                                std::to_string(out_rank));
  }
  if (out_rank == 0) return {Matrix(m, 0), Matrix(0, n)};

  Matrix d = gaussian_matrix(m, out_rank, 0.0, 1.0, rng);
  project_out(d, col_basis);
  project_out(d, col_basis);

  Matrix ct = gaussian_matrix(n, out_rank, 0.0, 1.0, rng);
  project_out(ct, row_basis);
  project_out(ct, row_basis);
  return {std::move(d), ct.transpose()};
}

SymmetricEigen symmetric_eigen(const Matrix& m) {
  if (m.rows() != m.cols() || m.empty()) {
    throw std::invalid_argument("symmetric_eigen: matrix must be square and nonempty");
  }
  require_finite(m, "symmetric_eigen");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver{Eigen::MatrixXd(view(m))};
  SymmetricEigen out;
  const auto& ev = solver.eigenvalues();
  out.values.assign(ev.data(), ev.data() + ev.size());
  out.vectors = from_eigen(solver.eigenvectors());
  return out;
}

Matrix solve_spd(const Matrix& m, const Matrix& rhs) {
  if (m.rows() != m.cols() || m.rows() != rhs.rows()) {
    throw std::invalid_argument("solve_spd: shape mismatch");
  }
  Eigen::LLT<Eigen::MatrixXd> llt{Eigen::MatrixXd(view(m))};
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("solve_spd: matrix is not positive definite");
  }
  return from_eigen(llt.solve(Eigen::MatrixXd(view(rhs))));
}

Matrix solve(const Matrix& m, const Matrix& rhs) {
  if (m.rows() != m.cols() || m.rows() != rhs.rows()) {
    throw std::invalid_argument("solve: shape mismatch");
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu{Eigen::MatrixXd(view(m))};
  if (!lu.isInvertible()) throw std::invalid_argument("solve: singular matrix");
  return from_eigen(lu.solve(Eigen::MatrixXd(view(rhs))));
}

}  // namespace fedlora
