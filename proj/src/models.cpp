#include "fedlora/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fedlora {
namespace {

void check_lora_shapes(const Matrix& W0, const CommonAdapter& common, const ClientAdapter& client,
                       const RegressionData& data) {
  const std::size_t m = W0.rows();
  const std::size_t n = W0.cols();
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("lora: shape mismatch in " + what);
  };
  if (common.B.rows() != m || common.A.cols() != n || common.B.cols() != common.A.rows()) fail("common adapter");
  if (client.D.rows() != m || client.C.cols() != n || client.D.cols() != client.C.rows()) fail("client adapter");
  if (data.X.cols() != m || data.Y.cols() != n || data.X.rows() != data.Y.rows()) fail("data");
  if (data.samples() == 0) fail("data (no samples)");
}

Matrix effective_weight(const Matrix& W0, const CommonAdapter& common, const ClientAdapter& client) {
  Matrix W = W0 + common.product();
  if (client.rank() > 0) W += client.product();
  return W;
}

// c·Xᵀ(XW − Y) with c = 2/samples: the loss gradient with respect to W.
Matrix weight_gradient(const Matrix& W, const RegressionData& data) {
  Matrix residual = matmul(data.X, W) - data.Y;
  return matmul_tn(data.X, residual) * (2.0 / static_cast<double>(data.samples()));
}

Matrix random_spd(std::size_t n, double lo, double hi, RngStream& rng) {
  const Matrix basis = orthonormal_column_basis(gaussian_matrix(n, n, 0.0, 1.0, rng));
  Matrix scaled_basis = basis;
  for (std::size_t j = 0; j < n; ++j) {
    const double lambda = rng.uniform(lo, hi);
    for (std::size_t i = 0; i < n; ++i) scaled_basis(i, j) *= lambda;
  }
  Matrix m = matmul_nt(scaled_basis, basis);
  return (m + m.transpose()) * 0.5;
}

const Matrix& single_block(const ParamBlocks& p, const char* what) {
  if (p.size() != 1) throw std::invalid_argument(std::string(what) + ": expected one block");
  return p.front();
}

}  // namespace

CommonAdapter CommonAdapter::from_blocks(ParamBlocks p) {
  if (p.size() != 2) throw std::invalid_argument("CommonAdapter: expected {B, A}");
  return {std::move(p[0]), std::move(p[1])};
}

ClientAdapter ClientAdapter::from_blocks(ParamBlocks p) {
  if (p.size() != 2) throw std::invalid_argument("ClientAdapter: expected {D, C}");
  return {std::move(p[0]), std::move(p[1])};
}

ClientAdapter ClientAdapter::none(std::size_t m, std::size_t n) { return {Matrix(m, 0), Matrix(0, n)}; }

void validate_two_level(const Matrix& W0, const CommonAdapter& common, const ClientAdapter& client) {
  if (common.B.rows() != W0.rows() || common.A.cols() != W0.cols() ||
      common.B.cols() != common.A.rows() || client.D.rows() != W0.rows() ||
      client.C.cols() != W0.cols() || client.D.cols() != client.C.rows()) {
    throw std::invalid_argument("two-level adapter shapes inconsistent with W0 " + shape_string(W0));
  }
  if (common.rank() < 1) throw std::invalid_argument("common adapter rank must be >= 1");
  if (client.rank() == 0 || client.rank() >= common.rank()) {
    throw std::invalid_argument("client adapter rank must satisfy 0 < r~ < r");
  }
}

RegressionData RegressionData::subset(Batch batch) const {
  if (batch.full()) return *this;
  return {X.gather_rows(batch.rows), Y.gather_rows(batch.rows), role};
}

double lora_loss(const Matrix& W0, const CommonAdapter& common, const ClientAdapter& client,
                 const RegressionData& data) {
  check_lora_shapes(W0, common, client, data);
  const Matrix residual = matmul(data.X, effective_weight(W0, common, client)) - data.Y;
  return residual.squared_norm() / static_cast<double>(data.samples());
}

LoraGradients lora_grads(const Matrix& W0, const CommonAdapter& common,
                         const ClientAdapter& client, const RegressionData& data) {
  check_lora_shapes(W0, common, client, data);
  const Matrix G = weight_gradient(effective_weight(W0, common, client), data);
  return {matmul_nt(G, common.A), matmul_tn(common.B, G), matmul_nt(G, client.C),
          matmul_tn(client.D, G)};
}

LoraCrossHvp lora_cross_hvp(const Matrix& W0, const CommonAdapter& common,
                            const ClientAdapter& client, const RegressionData& data,
                            const Matrix& v_D, const Matrix& v_C) {
  check_lora_shapes(W0, common, client, data);
  fedlora::require_same_shape(v_D, client.D, "lora_cross_hvp v_D");
  fedlora::require_same_shape(v_C, client.C, "lora_cross_hvp v_C");
  // Directional change of W along (v_D, v_C), pushed through c·XᵀX.
  Matrix dW = matmul(v_D, client.C) + matmul(client.D, v_C);
  const Matrix M =
      matmul_tn(data.X, matmul(data.X, dW)) * (2.0 / static_cast<double>(data.samples()));
  return {matmul_nt(M, common.A), matmul_tn(common.B, M)};
}

LoraRegressionTask::LoraRegressionTask(Matrix W0, RegressionData data)
    : W0_(std::move(W0)), data_(std::move(data)) {}

double LoraRegressionTask::loss(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const {
  return lora_loss(W0_, CommonAdapter::from_blocks(x), ClientAdapter::from_blocks(y),
                   data_.subset(batch));
}

ParamBlocks LoraRegressionTask::grad_x(const ParamBlocks& x, const ParamBlocks& y,
                                       Batch batch) const {
  LoraGradients g = lora_grads(W0_, CommonAdapter::from_blocks(x), ClientAdapter::from_blocks(y),
                               data_.subset(batch));
  return {std::move(g.grad_B), std::move(g.grad_A)};
}

ParamBlocks LoraRegressionTask::grad_y(const ParamBlocks& x, const ParamBlocks& y,
                                       Batch batch) const {
  LoraGradients g = lora_grads(W0_, CommonAdapter::from_blocks(x), ClientAdapter::from_blocks(y),
                               data_.subset(batch));
  return {std::move(g.grad_D), std::move(g.grad_C)};
}

ParamBlocks LoraRegressionTask::cross_hvp(const ParamBlocks& x, const ParamBlocks& y,
                                          const ParamBlocks& v, Batch batch) const {
  if (v.size() != 2) throw std::invalid_argument("cross_hvp: v must be {v_D, v_C}");
  LoraCrossHvp h = lora_cross_hvp(W0_, CommonAdapter::from_blocks(x),
                                  ClientAdapter::from_blocks(y), data_.subset(batch), v[0], v[1]);
  return {std::move(h.hv_B), std::move(h.hv_A)};
}

ParamBlocks cross_hvp_fd(const BilevelTask& task, const ParamBlocks& x, const ParamBlocks& y,
                         const ParamBlocks& v, double step, Batch batch) {
  if (!(step > 0.0)) throw std::invalid_argument("cross_hvp_fd: step must be positive");
  require_same_shape(y, v, "cross_hvp_fd");
  ParamBlocks y_plus = y;
  axpy(y_plus, step, v);
  ParamBlocks y_minus = y;
  axpy(y_minus, -step, v);
  ParamBlocks out = subtract(task.grad_x(x, y_plus, batch), task.grad_x(x, y_minus, batch));
  out = scaled(std::move(out), 0.5 / step);
  if (!all_finite(out)) throw NumericFailure("cross_hvp_fd: non-finite result");
  return out;
}

// ---- QuadraticBilevel ------------------------------------------------------

QuadraticBilevel::QuadraticBilevel(Matrix H, Matrix P, Matrix Q, Matrix b)
    : H_(std::move(H)), P_(std::move(P)), Q_(std::move(Q)), b_(std::move(b)) {
  const std::size_t ny = P_.rows();
  const std::size_t nx = P_.cols();
  if (H_.rows() != ny || H_.cols() != ny || Q_.rows() != nx || Q_.cols() != nx ||
      b_.rows() != ny || b_.cols() != 1) {
    throw std::invalid_argument("QuadraticBilevel: inconsistent shapes");
  }
  mu_ = symmetric_eigen(H_).values.front();
  if (!(mu_ > 0.0)) throw std::invalid_argument("QuadraticBilevel: H must be positive definite");
  Matrix joint(nx + ny, nx + ny);
  joint.set_block(0, 0, Q_);
  joint.set_block(0, nx, P_.transpose());
  joint.set_block(nx, 0, P_);
  joint.set_block(nx, nx, H_);
  smoothness_ = symmetric_eigen(joint).values.back();
}

double QuadraticBilevel::loss(const ParamBlocks& xs, const ParamBlocks& ys, Batch) const {
  const Matrix& x = single_block(xs, "QuadraticBilevel::loss x");
  const Matrix& y = single_block(ys, "QuadraticBilevel::loss y");
  const Matrix lin = matmul(P_, x) + b_;
  return 0.5 * dot(y, matmul(H_, y)) + dot(y, lin) + 0.5 * dot(x, matmul(Q_, x));
}

ParamBlocks QuadraticBilevel::grad_x(const ParamBlocks& xs, const ParamBlocks& ys, Batch) const {
  const Matrix& x = single_block(xs, "QuadraticBilevel::grad_x x");
  const Matrix& y = single_block(ys, "QuadraticBilevel::grad_x y");
  return {matmul(Q_, x) + matmul_tn(P_, y)};
}

ParamBlocks QuadraticBilevel::grad_y(const ParamBlocks& xs, const ParamBlocks& ys, Batch) const {
  const Matrix& x = single_block(xs, "QuadraticBilevel::grad_y x");
  const Matrix& y = single_block(ys, "QuadraticBilevel::grad_y y");
  return {matmul(H_, y) + matmul(P_, x) + b_};
}

ParamBlocks QuadraticBilevel::cross_hvp(const ParamBlocks&, const ParamBlocks&,
                                        const ParamBlocks& v, Batch) const {
  return {matmul_tn(P_, single_block(v, "QuadraticBilevel::cross_hvp v"))};
}

Matrix QuadraticBilevel::lower_solution(const Matrix& x) const {
  Matrix y = solve(H_, matmul(P_, x) + b_);
  y *= -1.0;
  return y;
}

std::optional<ParamBlocks> QuadraticBilevel::exact_lower_solution(const ParamBlocks& x) const {
  return ParamBlocks{lower_solution(single_block(x, "exact_lower_solution"))};
}

std::optional<ParamBlocks> QuadraticBilevel::exact_phi_gradient(const ParamBlocks& x) const {
  return ParamBlocks{quadratic_phi_and_grad(*this, single_block(x, "exact_phi_gradient")).gradient};
}

PhiValue quadratic_phi_and_grad(const QuadraticBilevel& q, const Matrix& x) {
  const Matrix y_star = q.lower_solution(x);
  const ParamBlocks xs{x};
  const ParamBlocks ys{y_star};
  return {q.loss(xs, ys, {}), std::move(q.grad_x(xs, ys, {}).front())};
}

QuadraticBilevel make_random_quadratic(std::size_t dim_x, std::size_t dim_y,
                                       const QuadraticSpectrum& spectrum, RngStream& rng) {
  if (dim_x == 0 || dim_y == 0) throw std::invalid_argument("make_random_quadratic: zero dimension");
  if (!(spectrum.lower_min > 0.0 && spectrum.lower_max >= spectrum.lower_min &&
        spectrum.reduced_min > 0.0 && spectrum.reduced_max >= spectrum.reduced_min)) {
    throw std::invalid_argument("make_random_quadratic: invalid spectrum bounds");
  }
  Matrix H = random_spd(dim_y, spectrum.lower_min, spectrum.lower_max, rng);
  Matrix P = gaussian_matrix(dim_y, dim_x, 0.0, spectrum.coupling, rng);
  const Matrix S = random_spd(dim_x, spectrum.reduced_min, spectrum.reduced_max, rng);
  Matrix Q = S + matmul_tn(P, solve_spd(H, P));
  Q = (Q + Q.transpose()) * 0.5;
  Matrix b = gaussian_matrix(dim_y, 1, 0.0, 1.0, rng);
  return QuadraticBilevel(std::move(H), std::move(P), std::move(Q), std::move(b));
}

// ---- Reduced-rank regression -----------------------------------------------

RrrFit rrr_best_fit(const RegressionData& data, std::size_t rank) {
  const std::size_t n_in = data.X.cols();
  const std::size_t n_out = data.Y.cols();
  if (data.X.rows() != data.Y.rows() || data.samples() == 0) {
    throw std::invalid_argument("rrr_best_fit: X and Y must share a nonzero sample count");
  }
  if (rank > std::min(n_in, n_out)) throw std::invalid_argument("rrr_best_fit: rank too large");

  const double inv_n = 1.0 / static_cast<double>(data.samples());
  const Matrix sxx = matmul_tn(data.X, data.X) * inv_n;
  const Matrix sxy = matmul_tn(data.X, data.Y) * inv_n;
  const SymmetricEigen sxx_eig = symmetric_eigen(sxx);
  if (!(sxx_eig.values.front() > kRankTolerance * sxx_eig.values.back())) {
    throw std::invalid_argument("rrr_best_fit: XᵀX is singular");
  }
  const Matrix w_ols = solve_spd(sxx, sxy);
  // Σ_yx Σ_xx⁻¹ Σ_xy = Σ_yx · W_ols
  Matrix m = matmul_tn(sxy, w_ols);
  m = (m + m.transpose()) * 0.5;
  const SymmetricEigen eig = symmetric_eigen(m);

  RrrFit fit;
  fit.eigenvalues.assign(eig.values.rbegin(), eig.values.rend());
  Matrix top(n_out, rank);
  for (std::size_t j = 0; j < rank; ++j)
    for (std::size_t i = 0; i < n_out; ++i) top(i, j) = eig.vectors(i, n_out - 1 - j);
  fit.W = matmul(w_ols, matmul_nt(top, top));
  fit.error = (matmul(data.X, fit.W) - data.Y).squared_norm() * inv_n;
  double tail = 0.0;
  for (std::size_t i = rank; i < fit.eigenvalues.size(); ++i) tail += std::max(0.0, fit.eigenvalues[i]);
  fit.truncation_error = std::sqrt(tail);
  return fit;
}

}  // namespace fedlora
