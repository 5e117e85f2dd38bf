#include "fedlora/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fedlora {

ParamBlocks sgd_step(ParamBlocks params, const ParamBlocks& grads, double rate) {
  axpy(params, -rate, grads);
  return params;
}

AdamWState AdamWState::zeros(const AdamWConfig& config, const ParamBlocks& like) {
  if (!(config.learning_rate > 0.0) || !(config.beta1 > 0.0 && config.beta1 < 1.0) ||
      !(config.beta2 > 0.0 && config.beta2 < 1.0) || !(config.epsilon > 0.0) ||
      !(config.weight_decay >= 0.0)) {
    throw std::invalid_argument("AdamW: invalid hyperparameters");
  }
  return {config, zeros_like(like), zeros_like(like), 0};
}

void adamw_step(AdamWState& state, ParamBlocks& params, const ParamBlocks& grads) {
  require_same_shape(params, grads, "adamw_step");
  require_same_shape(params, state.first_moment, "adamw_step state");
  if (!all_finite(grads)) throw NumericFailure("adamw_step: non-finite gradient");

  const AdamWConfig& c = state.config;
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);

  for (std::size_t b = 0; b < params.size(); ++b) {
    double* p = params[b].data();
    const double* g = grads[b].data();
    double* m = state.first_moment[b].data();
    double* v = state.second_moment[b].data();
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      p[i] -= c.learning_rate * (m_hat / (std::sqrt(v_hat) + c.epsilon) + c.weight_decay * p[i]);
    }
  }
}

UpperOptimizer UpperOptimizer::sgd(double rate) {
  if (!(rate > 0.0)) throw std::invalid_argument("SGD rate must be positive");
  UpperOptimizer o;
  o.rate_ = rate;
  return o;
}

UpperOptimizer UpperOptimizer::adamw(const AdamWConfig& config, const ParamBlocks& like) {
  UpperOptimizer o;
  o.rate_ = config.learning_rate;
  o.adamw_ = AdamWState::zeros(config, like);
  return o;
}

void UpperOptimizer::apply(ParamBlocks& params, const ParamBlocks& grads) {
  if (adamw_) {
    adamw_step(*adamw_, params, grads);
  } else {
    if (!all_finite(grads)) throw NumericFailure("sgd: non-finite gradient");
    axpy(params, -rate_, grads);
  }
}

void BilevelStepConfig::validate() const {
  if (!(lower_rate >= 0.0) || !(upper_rate > 0.0)) {
    throw std::invalid_argument("bilevel step: rates must be positive");
  }
  if (lower_steps == 0) throw std::invalid_argument("bilevel step: lower_steps must be >= 1");
  if (!(fd_step > 0.0)) throw std::invalid_argument("bilevel step: fd_step must be positive");
}

ParamBlocks hypergradient_estimate(const BilevelTask& task, const ParamBlocks& x,
                                   const ParamBlocks& y, const ParamBlocks& y_next,
                                   const BilevelStepConfig& cfg, const StepBatches& batches) {
  ParamBlocks h = task.grad_x(x, y_next, batches.upper);
  if (cfg.lower_rate == 0.0) return h;
  const ParamBlocks v = task.grad_y(x, y_next, batches.upper_tilde);
  const ParamBlocks& y_mixed = cfg.index_pattern == IndexPattern::kCurrentIterate ? y : y_next;
  const ParamBlocks correction = cfg.hvp_mode == HvpMode::kAnalytic
                                     ? task.cross_hvp(x, y_mixed, v, batches.hvp)
                                     : cross_hvp_fd(task, x, y_mixed, v, cfg.fd_step, batches.hvp);
  axpy(h, -cfg.lower_rate, correction);
  return h;
}

BilevelStepResult bilevel_local_step(const BilevelTask& task, const ParamBlocks& x,
                                     const ParamBlocks& y, const BilevelStepConfig& cfg,
                                     const StepBatches& batches, UpperOptimizer& upper) {
  cfg.validate();
  ParamBlocks y_next = y;
  for (std::size_t s = 0; s < cfg.lower_steps; ++s) {
    y_next = sgd_step(std::move(y_next), task.grad_y(x, y_next, batches.lower), cfg.lower_rate);
  }
  if (!all_finite(y_next)) throw NumericFailure("bilevel_local_step: lower level diverged");

  BilevelStepResult out;
  out.hypergradient = hypergradient_estimate(task, x, y, y_next, cfg, batches);
  out.diagnostics.hypergrad_norm = norm(out.hypergradient);
  out.diagnostics.lower_grad_norm = norm(task.grad_y(x, y_next, batches.upper_tilde));
  out.x = x;
  upper.apply(out.x, out.hypergradient);
  out.y = std::move(y_next);
  return out;
}

ConvergenceStepSizes convergence_step_sizes(double mu, double smoothness) {
  if (!(mu > 0.0) || !(smoothness >= mu)) {
    throw std::invalid_argument("convergence_step_sizes: need 0 < mu <= L");
  }
  const double L = smoothness;
  ConvergenceStepSizes s{};
  s.alpha = 1.0 / (4.0 * L);
  s.l_phi = L + L * L / mu;
  s.n_const = 25.0 * std::pow(L, 4) * (4.0 * L / mu + 1.0) / (16.0 * mu * mu);
  s.eta_candidates[0] = mu * mu / (5.0 * std::pow(L, 3) * std::sqrt(4.0 * L / mu - mu / (4.0 * L)));
  s.eta_candidates[1] = 1.0 / (8.0 * s.l_phi);
  s.eta_candidates[2] = std::sqrt(1.0 / (16.0 * s.n_const));
  s.eta_candidates[3] = std::cbrt(1.0 / (81.0 * s.n_const * s.l_phi));
  s.eta = *std::min_element(std::begin(s.eta_candidates), std::end(s.eta_candidates));
  return s;
}

std::vector<DeterministicTraceRow> deterministic_bilevel_run(const QuadraticBilevel& q,
                                                             const Matrix& x0, const Matrix& y0,
                                                             std::size_t steps) {
  if (steps == 0) throw std::invalid_argument("deterministic_bilevel_run: T must be >= 1");
  const ConvergenceStepSizes sizes = convergence_step_sizes(q.mu(), q.smoothness());
  BilevelStepConfig cfg;
  cfg.lower_rate = sizes.alpha;
  cfg.upper_rate = sizes.eta;
  UpperOptimizer upper = UpperOptimizer::sgd(sizes.eta);

  std::vector<DeterministicTraceRow> trace;
  trace.reserve(steps);
  ParamBlocks x{x0};
  ParamBlocks y{y0};
  for (std::size_t t = 0; t < steps; ++t) {
    const PhiValue phi = quadratic_phi_and_grad(q, x.front());
    const Matrix y_star = q.lower_solution(x.front());
    BilevelStepResult step = bilevel_local_step(q, x, y, cfg, {}, upper);

    DeterministicTraceRow row{t,
                              x.front(),
                              y.front(),
                              phi.gradient.squared_norm(),
                              frobenius_distance(y.front(), y_star),
                              frobenius_distance(step.y.front(), y_star),
                              frobenius_distance(step.hypergradient.front(), phi.gradient)};
    if (!std::isfinite(row.grad_phi_sq)) throw NumericFailure("deterministic_bilevel_run diverged");
    trace.push_back(std::move(row));
    x = std::move(step.x);
    y = std::move(step.y);
  }
  return trace;
}

}  // namespace fedlora
