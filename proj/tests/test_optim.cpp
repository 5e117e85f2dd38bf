#include "doctest.h"

#include <cmath>

#include "fedlora/optim.hpp"
#include "oracles.hpp"

using namespace fedlora;

namespace {

class ScalarCouple final : public BilevelTask {
 public:
  double loss(const ParamBlocks& x, const ParamBlocks& y, Batch) const override {
    const double d = y[0](0, 0) - x[0](0, 0);
    return 0.5 * d * d;
  }
  ParamBlocks grad_x(const ParamBlocks& x, const ParamBlocks& y, Batch) const override {
    return {Matrix{{x[0](0, 0) - y[0](0, 0)}}};
  }
  ParamBlocks grad_y(const ParamBlocks& x, const ParamBlocks& y, Batch) const override {
    return {Matrix{{y[0](0, 0) - x[0](0, 0)}}};
  }
  ParamBlocks cross_hvp(const ParamBlocks&, const ParamBlocks&, const ParamBlocks& v,
                        Batch) const override {
    return {Matrix{{-v[0](0, 0)}}};
  }
};

Matrix global_minimizer(const QuadraticBilevel& q) {
  // ∇Φ(x) = (Q − PᵀH⁻¹P)x − PᵀH⁻¹b
  const Matrix hinv_p = oracle::gauss_solve(q.H(), q.P());
  const Matrix hinv_b = oracle::gauss_solve(q.H(), q.b());
  const Matrix schur = q.Q() - oracle::naive_matmul(oracle::naive_transpose(q.P()), hinv_p);
  return oracle::gauss_solve(schur, oracle::naive_matmul(oracle::naive_transpose(q.P()), hinv_b));
}

}  // namespace

TEST_CASE("sgd_step arithmetic") {
  const ParamBlocks p{Matrix{{1.0, -2.0}}};
  CHECK(sgd_step(p, {Matrix(1, 2)}, 0.3) == p);
  CHECK(sgd_step({Matrix{{1.0}}}, {Matrix{{2.0}}}, 0.5)[0](0, 0) == 0.0);
  const ParamBlocks g{Matrix{{0.25, 1.5}}};
  CHECK(sgd_step(sgd_step(p, g, 0.125), g, 0.125) == sgd_step(p, g, 0.25));
  CHECK_THROWS_AS(sgd_step(p, {Matrix(2, 1)}, 0.1), std::invalid_argument);
}

TEST_CASE("adamw with zero gradient and no decay leaves parameters unchanged") {
  ParamBlocks p{Matrix{{1.0, -3.0}, {0.5, 2.0}}};
  const ParamBlocks before = p;
  AdamWState s = AdamWState::zeros({}, p);
  for (int i = 0; i < 5; ++i) adamw_step(s, p, zeros_like(p));
  CHECK(p == before);
  CHECK(s.steps == 5);
}

TEST_CASE("adamw first step is the bias-corrected sign-like update") {
  RngStream rng(1, 0);
  const ParamBlocks g{gaussian_matrix(3, 4, 0, 1, rng), gaussian_matrix(2, 2, 0, 1e-3, rng)};
  ParamBlocks p{gaussian_matrix(3, 4, 0, 1, rng), gaussian_matrix(2, 2, 0, 1, rng)};
  const ParamBlocks p0 = p;
  AdamWConfig cfg;
  cfg.learning_rate = 0.01;
  AdamWState s = AdamWState::zeros(cfg, p);
  adamw_step(s, p, g);
  for (std::size_t b = 0; b < p.size(); ++b)
    for (std::size_t i = 0; i < p[b].size(); ++i) {
      const double gi = g[b].data()[i];
      const double want = p0[b].data()[i] - cfg.learning_rate * gi / (std::abs(gi) + cfg.epsilon);
      CHECK(p[b].data()[i] == doctest::Approx(want).epsilon(1e-12));
      CHECK(std::abs(p[b].data()[i] - p0[b].data()[i]) <= cfg.learning_rate * (1 + 1e-12));
    }
}

TEST_CASE("adamw decoupled weight decay shrinks geometrically under zero gradient") {
  ParamBlocks p{Matrix{{2.0, -4.0}}};
  AdamWConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.5;
  AdamWState s = AdamWState::zeros(cfg, p);
  for (int i = 0; i < 3; ++i) adamw_step(s, p, zeros_like(p));
  const double f = std::pow(1.0 - 0.1 * 0.5, 3);
  CHECK(p[0](0, 0) == doctest::Approx(2.0 * f).epsilon(1e-14));
  CHECK(p[0](0, 1) == doctest::Approx(-4.0 * f).epsilon(1e-14));
}

TEST_CASE("optimizers reject bad input and are bit-deterministic") {
  ParamBlocks p{Matrix{{1.0}}};
  AdamWState s = AdamWState::zeros({}, p);
  CHECK_THROWS_AS(adamw_step(s, p, {Matrix{{std::nan("")}}}), NumericFailure);
  CHECK_THROWS_AS(AdamWState::zeros({0.0}, p), std::invalid_argument);
  CHECK_THROWS_AS(UpperOptimizer::sgd(0.0), std::invalid_argument);

  RngStream rng(2, 0);
  const ParamBlocks start{gaussian_matrix(4, 4, 0, 1, rng)};
  std::vector<ParamBlocks> grads;
  for (int i = 0; i < 10; ++i) grads.push_back({gaussian_matrix(4, 4, 0, 1, rng)});
  auto run = [&] {
    ParamBlocks q = start;
    AdamWConfig cfg;
    cfg.weight_decay = 0.01;
    UpperOptimizer o = UpperOptimizer::adamw(cfg, q);
    for (const auto& g : grads) o.apply(q, g);
    return q;
  };
  CHECK(run() == run());
}

TEST_CASE("hypergradient equals the true gradient at the exact lower solution") {
  RngStream rng(3, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const QuadraticBilevel q = make_random_quadratic(8, 8, {}, rng);
    const ParamBlocks x{gaussian_matrix(8, 1, 0, 1, rng)};
    const ParamBlocks y = *q.exact_lower_solution(x);
    BilevelStepConfig cfg;
    cfg.lower_rate = 0.1;
    const ParamBlocks h = hypergradient_estimate(q, x, y, y, cfg, {});
    CHECK(oracle::max_abs(h[0] - (*q.exact_phi_gradient(x))[0]) < 1e-9);

    UpperOptimizer sgd = UpperOptimizer::sgd(0.05);
    const BilevelStepResult r = bilevel_local_step(q, x, y, cfg, {}, sgd);
    CHECK(oracle::max_abs(r.hypergradient[0] - (*q.exact_phi_gradient(x))[0]) < 1e-9);
    CHECK(oracle::max_abs(r.y[0] - y[0]) < 1e-12);
  }
}

TEST_CASE("bilevel step on a stationary scalar couple does not move") {
  const ScalarCouple s;
  const ParamBlocks x{Matrix{{0.75}}};
  const ParamBlocks y{Matrix{{0.75}}};
  BilevelStepConfig cfg;
  cfg.lower_rate = 0.3;
  UpperOptimizer sgd = UpperOptimizer::sgd(0.2);
  const BilevelStepResult r = bilevel_local_step(s, x, y, cfg, {}, sgd);
  CHECK(r.x == x);
  CHECK(r.y == y);
  CHECK(r.diagnostics.hypergrad_norm == 0.0);
}

TEST_CASE("zero lower rate reduces the hypergradient to the partial gradient") {
  RngStream rng(4, 0);
  const QuadraticBilevel q = make_random_quadratic(3, 4, {}, rng);
  const ParamBlocks x{gaussian_matrix(3, 1, 0, 1, rng)};
  const ParamBlocks y{gaussian_matrix(4, 1, 0, 1, rng)};
  BilevelStepConfig cfg;
  cfg.lower_rate = 0.0;
  UpperOptimizer sgd = UpperOptimizer::sgd(0.1);
  const BilevelStepResult r = bilevel_local_step(q, x, y, cfg, {}, sgd);
  CHECK(r.y == y);
  CHECK(r.hypergradient == q.grad_x(x, y, {}));
  CHECK(r.x == sgd_step(x, q.grad_x(x, y, {}), 0.1));
}

TEST_CASE("bilevel step follows the update formulas with the chosen batches") {
  RngStream rng(5, 0);
  const Matrix X = gaussian_matrix(30, 5, 0, 1, rng);
  const Matrix Y = gaussian_matrix(30, 4, 0, 1, rng);
  const LoraRegressionTask task(Matrix(5, 4), {X, Y, DataRole::kTrain});
  const ParamBlocks x{gaussian_matrix(5, 3, 0, 1, rng), gaussian_matrix(3, 4, 0, 1, rng)};
  const ParamBlocks y{gaussian_matrix(5, 2, 0, 1, rng), gaussian_matrix(2, 4, 0, 1, rng)};
  const std::vector<std::size_t> pi{0, 1, 2}, xi{3, 4, 5, 6}, xt{7, 8}, ze{9, 10, 11};
  const StepBatches b{{pi}, {xi}, {xt}, {ze}};

  for (IndexPattern pattern : {IndexPattern::kCurrentIterate, IndexPattern::kNextIterate}) {
    BilevelStepConfig cfg;
    cfg.lower_rate = 0.01;
    cfg.upper_rate = 0.02;
    cfg.index_pattern = pattern;
    UpperOptimizer sgd = UpperOptimizer::sgd(cfg.upper_rate);
    const BilevelStepResult r = bilevel_local_step(task, x, y, cfg, b, sgd);

    ParamBlocks y1 = y;
    axpy(y1, -0.01, task.grad_y(x, y, b.lower));
    const ParamBlocks v = task.grad_y(x, y1, b.upper_tilde);
    const ParamBlocks& at = pattern == IndexPattern::kCurrentIterate ? y : y1;
    ParamBlocks h = task.grad_x(x, y1, b.upper);
    axpy(h, -0.01, task.cross_hvp(x, at, v, b.hvp));
    CHECK(oracle::relative_error(r.y, y1) < 1e-15);
    CHECK(oracle::relative_error(r.hypergradient, h) < 1e-15);
    ParamBlocks x1 = x;
    axpy(x1, -0.02, h);
    CHECK(oracle::relative_error(r.x, x1) < 1e-15);
  }
}

TEST_CASE("finite-difference HVP mode matches the analytic mode on the LoRA task") {
  RngStream rng(6, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix X = gaussian_matrix(25, 6, 0, 1, rng);
    const LoraRegressionTask task(gaussian_matrix(6, 5, 0, 0.3, rng),
                                  {X, gaussian_matrix(25, 5, 0, 1, rng), DataRole::kTrain});
    const ParamBlocks x{gaussian_matrix(6, 3, 0, 1, rng), gaussian_matrix(3, 5, 0, 1, rng)};
    const ParamBlocks y{gaussian_matrix(6, 2, 0, 1, rng), gaussian_matrix(2, 5, 0, 1, rng)};
    BilevelStepConfig a;
    a.lower_rate = 0.05;
    BilevelStepConfig f = a;
    f.hvp_mode = HvpMode::kFiniteDifference;
    UpperOptimizer o1 = UpperOptimizer::sgd(0.01);
    UpperOptimizer o2 = UpperOptimizer::sgd(0.01);
    const BilevelStepResult ra = bilevel_local_step(task, x, y, a, {}, o1);
    const BilevelStepResult rf = bilevel_local_step(task, x, y, f, {}, o2);
    CHECK(oracle::relative_error(rf.hypergradient, ra.hypergradient) < 1e-5);
    CHECK(oracle::relative_error(rf.x, ra.x) < 1e-5);
  }
}

TEST_CASE("extra lower steps repeat the lower update") {
  RngStream rng(7, 0);
  const QuadraticBilevel q = make_random_quadratic(3, 3, {}, rng);
  const ParamBlocks x{gaussian_matrix(3, 1, 0, 1, rng)};
  const ParamBlocks y{gaussian_matrix(3, 1, 0, 1, rng)};
  BilevelStepConfig cfg;
  cfg.lower_rate = 0.2;
  cfg.lower_steps = 3;
  UpperOptimizer sgd = UpperOptimizer::sgd(0.1);
  const BilevelStepResult r = bilevel_local_step(q, x, y, cfg, {}, sgd);
  ParamBlocks yy = y;
  for (int i = 0; i < 3; ++i) yy = sgd_step(yy, q.grad_y(x, yy, {}), 0.2);
  CHECK(r.y == yy);
  cfg.lower_steps = 0;
  CHECK_THROWS_AS(bilevel_local_step(q, x, y, cfg, {}, sgd), std::invalid_argument);
}

TEST_CASE("convergence step sizes follow the closed-form constants") {
  const double mu = 0.8;
  const double L = 2.5;
  const ConvergenceStepSizes s = convergence_step_sizes(mu, L);
  const double lphi = L + L * L / mu;
  const double N = 25 * L * L * L * L * (4 * L / mu + 1) / (16 * mu * mu);
  const double c1 = mu * mu / (5 * L * L * L * std::sqrt(4 * L / mu - mu / (4 * L)));
  const double c2 = 1 / (8 * lphi);
  const double c3 = std::sqrt(1 / (16 * N));
  const double c4 = std::cbrt(1 / (81 * N * lphi));
  CHECK(s.alpha == doctest::Approx(1 / (4 * L)));
  CHECK(s.l_phi == doctest::Approx(lphi));
  CHECK(s.n_const == doctest::Approx(N));
  CHECK(s.eta == doctest::Approx(std::min({c1, c2, c3, c4})));
  CHECK(s.eta > 0.0);
  CHECK_THROWS_AS(convergence_step_sizes(2.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(convergence_step_sizes(0.0, 1.0), std::invalid_argument);
}

TEST_CASE("lower-level contraction and hypergradient bias bounds hold at random points") {
  RngStream rng(8, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const QuadraticBilevel q = make_random_quadratic(8, 8, {}, rng);
    const double mu = q.mu();
    const double L = q.smoothness();
    const double alpha = 1.0 / (4.0 * L);
    const ParamBlocks x{gaussian_matrix(8, 1, 0, 2, rng)};
    const ParamBlocks y{gaussian_matrix(8, 1, 0, 2, rng)};
    const Matrix ystar = q.lower_solution(x[0]);
    BilevelStepConfig cfg;
    cfg.lower_rate = alpha;
    ParamBlocks y1 = y;
    axpy(y1, -alpha, q.grad_y(x, y, {}));
    const double gap = frobenius_distance(y[0], ystar);
    const double rho = std::sqrt(1.0 - alpha * mu);
    CHECK(frobenius_distance(y1[0], ystar) <= rho * gap * (1 + 1e-12) + 1e-14);
    const ParamBlocks h = hypergradient_estimate(q, x, y, y1, cfg, {});
    const Matrix true_grad = quadratic_phi_and_grad(q, x[0]).gradient;
    CHECK(frobenius_distance(h[0], true_grad) <= L * (alpha * L + 1) * rho * gap * (1 + 1e-12) + 1e-14);
  }
}

TEST_CASE("deterministic run on a decoupled problem decreases monotonically") {
  RngStream rng(9, 0);
  const QuadraticBilevel q(Matrix::identity(4) * 1.5, Matrix(4, 3), Matrix::identity(3), gaussian_matrix(4, 1, 0, 1, rng));
  const auto trace = deterministic_bilevel_run(q, gaussian_matrix(3, 1, 0, 1, rng), gaussian_matrix(4, 1, 0, 1, rng), 200);
  REQUIRE(trace.size() == 200);
  for (std::size_t t = 1; t < trace.size(); ++t) CHECK(trace[t].grad_phi_sq < trace[t - 1].grad_phi_sq);
  CHECK(deterministic_bilevel_run(q, Matrix(3, 1), Matrix(4, 1), 1).size() == 1);
  CHECK_THROWS_AS(deterministic_bilevel_run(q, Matrix(3, 1), Matrix(4, 1), 0), std::invalid_argument);
}

TEST_CASE("deterministic run decays on random well-conditioned instances") {
  RngStream rng(10, 0);
  for (int trial = 0; trial < 5; ++trial) {
    const QuadraticBilevel q = make_random_quadratic(8, 8, {}, rng);
    const auto trace = deterministic_bilevel_run(q, gaussian_matrix(8, 1, 0, 1, rng), gaussian_matrix(8, 1, 0, 1, rng), 1000);
    double head = 0.0;
    double all = 0.0;
    for (std::size_t t = 0; t < trace.size(); ++t) {
      all += trace[t].grad_phi_sq;
      if (t < 100) head += trace[t].grad_phi_sq;
    }
    CHECK((all / 1000.0) < 0.2 * (head / 100.0));
  }
}

TEST_CASE("deterministic run started at the optimum stays there") {
  RngStream rng(11, 0);
  const QuadraticBilevel q = make_random_quadratic(6, 5, {}, rng);
  const Matrix xs = global_minimizer(q);
  const auto trace = deterministic_bilevel_run(q, xs, q.lower_solution(xs), 300);
  for (const auto& row : trace) {
    CHECK(row.grad_phi_sq <= 1e-18);
    CHECK(row.lower_gap_before <= 1e-9);
  }
}
