#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "fedlora/models.hpp"
#include "fedlora/params.hpp"

namespace fedlora {

ParamBlocks sgd_step(ParamBlocks params, const ParamBlocks& grads, double rate);

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

/// Moment accumulators for one parameter set; single-owner.
struct AdamWState {
  AdamWConfig config;
  ParamBlocks first_moment;
  ParamBlocks second_moment;
  std::size_t steps = 0;

  static AdamWState zeros(const AdamWConfig& config, const ParamBlocks& like);
};

/// Bias-corrected Adam step with decoupled weight decay:
///   p ← p − η·(m̂ / (√v̂ + ε) + wd·p)
/// Throws NumericFailure on non-finite gradients.
void adamw_step(AdamWState& state, ParamBlocks& params, const ParamBlocks& grads);

/// Either plain SGD or AdamW fed the hypergradient.
class UpperOptimizer {
 public:
  static UpperOptimizer sgd(double rate);
  static UpperOptimizer adamw(const AdamWConfig& config, const ParamBlocks& like);

  void apply(ParamBlocks& params, const ParamBlocks& grads);
  bool is_adamw() const { return adamw_.has_value(); }
  double rate() const { return adamw_ ? adamw_->config.learning_rate : rate_; }
  AdamWState* adamw_state() { return adamw_ ? &*adamw_ : nullptr; }
  const AdamWState* adamw_state() const { return adamw_ ? &*adamw_ : nullptr; }

 private:
  double rate_ = 0.0;
  std::optional<AdamWState> adamw_;
};

enum class HvpMode { kAnalytic, kFiniteDifference };

/// Where the mixed second derivative is evaluated: at y^t (kCurrentIterate) or y^{t+1} (kNextIterate).
enum class IndexPattern { kCurrentIterate, kNextIterate };

struct BilevelStepConfig {
  double lower_rate = 2e-3;  // α
  double upper_rate = 5e-3;  // η, used when the upper optimizer is SGD
  HvpMode hvp_mode = HvpMode::kAnalytic;
  IndexPattern index_pattern = IndexPattern::kCurrentIterate;
  std::size_t lower_steps = 1;
  double fd_step = kHvpFdStep;

  void validate() const;
};

/// The four independent samples of one local step.
struct StepBatches {
  Batch lower;        // π: lower-level gradient
  Batch upper;        // ξ: ∇_x F
  Batch upper_tilde;  // ξ̃: ∇_y F inside the correction
  Batch hvp;          // ζ: ∇_xy F
};

struct BilevelDiagnostics {
  double hypergrad_norm = 0.0;
  double lower_grad_norm = 0.0;  // ‖∇_y F(x, y'; ξ̃)‖
};

struct BilevelStepResult {
  ParamBlocks x;
  ParamBlocks y;
  ParamBlocks hypergradient;
  BilevelDiagnostics diagnostics;
};

/// One single-loop bilevel step:
///   y' = y − α∇_y F(x, y; π)
///   h  = ∇_x F(x, y'; ξ) − α∇_xy F(x, y; ζ)·∇_y F(x, y'; ξ̃)
///   x' = upper-optimizer step along h
BilevelStepResult bilevel_local_step(const BilevelTask& task, const ParamBlocks& x,
                                     const ParamBlocks& y, const BilevelStepConfig& cfg,
                                     const StepBatches& batches, UpperOptimizer& upper);

/// Only the hypergradient estimate, for checking it against ∇Φ.
ParamBlocks hypergradient_estimate(const BilevelTask& task, const ParamBlocks& x,
                                   const ParamBlocks& y, const ParamBlocks& y_next,
                                   const BilevelStepConfig& cfg, const StepBatches& batches);

/// Step sizes and constants from the convergence analysis for the quadratic case.
struct ConvergenceStepSizes {
  double alpha;
  double eta;
  double l_phi;  // L_Φ = L + L²/μ
  double n_const;
  double eta_candidates[4];
};

ConvergenceStepSizes convergence_step_sizes(double mu, double smoothness);

struct DeterministicTraceRow {
  std::size_t step;
  Matrix x;
  Matrix y;
  double grad_phi_sq;         // ‖∇Φ(x^t)‖²
  double lower_gap_before;    // ‖y^t − y*(x^t)‖
  double lower_gap_after;     // ‖y^{t+1} − y*(x^t)‖
  double hypergrad_bias;      // ‖h^t − ∇Φ(x^t)‖
};

/// Full-gradient single-machine run with the analysis step sizes α and η.
std::vector<DeterministicTraceRow> deterministic_bilevel_run(const QuadraticBilevel& q,
                                                             const Matrix& x0, const Matrix& y0,
                                                             std::size_t steps);

}  // namespace fedlora
