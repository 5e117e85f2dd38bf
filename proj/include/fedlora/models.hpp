#pragma once

#include <cstddef>
#include <optional>

#include "fedlora/matrix.hpp"
#include "fedlora/numerics.hpp"
#include "fedlora/params.hpp"

namespace fedlora {

/// Shared adapter x = {B (m×r), A (r×n)}; contributes B·A to every client.
struct CommonAdapter {
  Matrix B;
  Matrix A;

  std::size_t rank() const { return A.rows(); }
  Matrix product() const { return matmul(B, A); }
  ParamBlocks blocks() const { return {B, A}; }
  static CommonAdapter from_blocks(ParamBlocks p);
};

/// Client-private adapter y_k = {D (m×r̃), C (r̃×n)}.
struct ClientAdapter {
  Matrix D;
  Matrix C;

  std::size_t rank() const { return C.rows(); }
  Matrix product() const { return matmul(D, C); }
  ParamBlocks blocks() const { return {D, C}; }
  static ClientAdapter from_blocks(ParamBlocks p);
  /// Rank-0 adapter (contributes nothing), for algorithms without a private level.
  static ClientAdapter none(std::size_t m, std::size_t n);
};

/// Checks shapes against W0 and 0 < r̃ < r.
void validate_two_level(const Matrix& W0, const CommonAdapter& common, const ClientAdapter& client);

enum class DataRole { kTrain, kTest };

struct RegressionData {
  Matrix X;  // samples × n_in
  Matrix Y;  // samples × n_out
  DataRole role = DataRole::kTrain;

  std::size_t samples() const { return X.rows(); }
  RegressionData subset(Batch batch) const;
};

/// Differentiable f(x, y) with the derivative surface the bilevel stepper needs.
class BilevelTask {
 public:
  virtual ~BilevelTask() = default;

  virtual double loss(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const = 0;
  virtual ParamBlocks grad_x(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const = 0;
  virtual ParamBlocks grad_y(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const = 0;
  /// ∇_xy f(x, y)·v for v shaped like y; result shaped like x.
  virtual ParamBlocks cross_hvp(const ParamBlocks& x, const ParamBlocks& y, const ParamBlocks& v,
                                Batch batch) const = 0;

  virtual std::optional<ParamBlocks> exact_lower_solution(const ParamBlocks&) const {
    return std::nullopt;
  }
  virtual std::optional<ParamBlocks> exact_phi_gradient(const ParamBlocks&) const {
    return std::nullopt;
  }
};

// ---- Two-level LoRA regression -------------------------------------------

/// ‖X(W0 + BA + DC) − Y‖_F² / samples
double lora_loss(const Matrix& W0, const CommonAdapter& common, const ClientAdapter& client,
                 const RegressionData& data);

struct LoraGradients {
  Matrix grad_B;
  Matrix grad_A;
  Matrix grad_D;
  Matrix grad_C;
};

LoraGradients lora_grads(const Matrix& W0, const CommonAdapter& common,
                         const ClientAdapter& client, const RegressionData& data);

struct LoraCrossHvp {
  Matrix hv_B;
  Matrix hv_A;
};

/// Analytic ∇_xy f · (v_D, v_C) for the two-level LoRA loss.
LoraCrossHvp lora_cross_hvp(const Matrix& W0, const CommonAdapter& common,
                            const ClientAdapter& client, const RegressionData& data,
                            const Matrix& v_D, const Matrix& v_C);

/// BilevelTask over x = {B, A}, y = {D, C} on one client's training data.
class LoraRegressionTask final : public BilevelTask {
 public:
  LoraRegressionTask(Matrix W0, RegressionData data);

  double loss(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const override;
  ParamBlocks grad_x(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const override;
  ParamBlocks grad_y(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const override;
  ParamBlocks cross_hvp(const ParamBlocks& x, const ParamBlocks& y, const ParamBlocks& v,
                        Batch batch) const override;

  const Matrix& W0() const { return W0_; }
  const RegressionData& data() const { return data_; }

 private:
  Matrix W0_;
  RegressionData data_;
};

/// Central-difference estimate of ∇_xy f(x,y)·v through grad_x.
ParamBlocks cross_hvp_fd(const BilevelTask& task, const ParamBlocks& x, const ParamBlocks& y,
                         const ParamBlocks& v, double step, Batch batch = {});

inline constexpr double kGradientFdStep = 1e-5;
inline constexpr double kHvpFdStep = 1e-4;

// ---- Closed-form quadratic bilevel problem --------------------------------

/// f(x, y) = ½ yᵀHy + yᵀ(Px + b) + ½ xᵀQx with H ≻ 0.
///
/// y*(x) = −H⁻¹(Px + b) and ∇Φ(x) = Qx + Pᵀy*(x). L_{f,2} = 0.
class QuadraticBilevel final : public BilevelTask {
 public:
  QuadraticBilevel(Matrix H, Matrix P, Matrix Q, Matrix b);

  std::size_t dim_x() const { return P_.cols(); }
  std::size_t dim_y() const { return P_.rows(); }
  const Matrix& H() const { return H_; }
  const Matrix& P() const { return P_; }
  const Matrix& Q() const { return Q_; }
  const Matrix& b() const { return b_; }

  /// λ_min(H): strong-convexity modulus of the lower level.
  double mu() const { return mu_; }
  /// λ_max of the joint Hessian [[Q, Pᵀ], [P, H]].
  double smoothness() const { return smoothness_; }
  double condition_number() const { return smoothness_ / mu_; }

  double loss(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const override;
  ParamBlocks grad_x(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const override;
  ParamBlocks grad_y(const ParamBlocks& x, const ParamBlocks& y, Batch batch) const override;
  ParamBlocks cross_hvp(const ParamBlocks& x, const ParamBlocks& y, const ParamBlocks& v,
                        Batch batch) const override;
  std::optional<ParamBlocks> exact_lower_solution(const ParamBlocks& x) const override;
  std::optional<ParamBlocks> exact_phi_gradient(const ParamBlocks& x) const override;

  Matrix lower_solution(const Matrix& x) const;

 private:
  Matrix H_, P_, Q_, b_;
  double mu_ = 0.0;
  double smoothness_ = 0.0;
};

struct PhiValue {
  double value;
  Matrix gradient;
};

PhiValue quadratic_phi_and_grad(const QuadraticBilevel& q, const Matrix& x);

/// Spectrum knobs for random quadratic instances.
struct QuadraticSpectrum {
  double lower_min = 1.0;     // eigenvalues of H drawn from U[lower_min, lower_max]
  double lower_max = 1.5;
  double coupling = 0.1;      // P = coupling · N(0, 1)
  double reduced_min = 0.75;  // eigenvalues of Q − PᵀH⁻¹P drawn from U[reduced_min, reduced_max]
  double reduced_max = 1.5;
};

QuadraticBilevel make_random_quadratic(std::size_t dim_x, std::size_t dim_y,
                                       const QuadraticSpectrum& spectrum, RngStream& rng);

// ---- Reduced-rank regression oracle ---------------------------------------

struct RrrFit {
  Matrix W;                 // n_in × n_out, rank ≤ requested
  double error;             // per-sample residual loss ‖XW − Y‖²/samples
  double truncation_error;  // √(Σ_{i>rank} λ_i): distance from the unconstrained fit
  std::vector<double> eigenvalues;  // λ of Σ_yx Σ_xx⁻¹ Σ_xy, descending
};

/// Optimal rank-constrained least squares with Σ = I.
RrrFit rrr_best_fit(const RegressionData& data, std::size_t rank);

}  // namespace fedlora
