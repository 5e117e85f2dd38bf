#include "fedlora/federation.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace fedlora {
namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;       // "init"
constexpr std::uint64_t kClientInitStream = 0x63696e69;  // "cini"
constexpr std::uint64_t kSamplerStream = 0x73616d70;     // "samp"
constexpr std::uint64_t kEvalStream = 0x6576616c;        // "eval"
constexpr std::size_t kSamplerCount = 4;

enum Slot : std::size_t { kPi = 0, kXi = 1, kXiTilde = 2, kZeta = 3 };

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument("federation config: " + message);
}

// Runs f on every client, one OpenMP thread per client up to `threads`.
// Failures are collected and the first one (by client id) is rethrown.
template <class F>
void for_each_client(std::vector<ClientState>& clients, std::size_t threads, F&& f) {
  const auto count = static_cast<std::ptrdiff_t>(clients.size());
  std::vector<std::exception_ptr> errors(clients.size());
#pragma omp parallel for num_threads(static_cast<int>(threads)) schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      f(clients[static_cast<std::size_t>(i)]);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i]) continue;
    const std::string prefix = "client " + std::to_string(clients[i].client_id) + ": ";
    try {
      std::rethrow_exception(errors[i]);
    } catch (const NumericFailure& e) {
      throw NumericFailure(prefix + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(prefix + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error(prefix + e.what());
    }
  }
}

MetricsRecord base_metrics(const ClientState& c, const CommonAdapter& common,
                           const ClientAdapter& client, double rank_threshold) {
  MetricsRecord r;
  r.client_id = c.client_id;
  r.train_loss = lora_loss(c.W0(), common, client, c.train());
  r.test_loss = lora_loss(c.W0(), common, client, c.test);
  Matrix sum = common.product();
  if (client.rank() > 0) sum += client.product();
  r.eff_rank = static_cast<long long>(effective_rank(sum, rank_threshold));
  if (c.truth) {
    Matrix w = c.W0() + sum;
    const double d = frobenius_distance(w, *c.truth);
    r.fro_dist_sq = d * d;
  }
  r.hypergrad_norm = c.last_grad_norm;
  if (!std::isfinite(r.train_loss) || !std::isfinite(r.test_loss)) {
    throw NumericFailure("non-finite loss at evaluation");
  }
  return r;
}

ClientAdapter no_client(const ClientState& c) {
  return ClientAdapter::none(c.W0().rows(), c.W0().cols());
}

void truncate_moments(AdamWState& s, std::size_t r) {
  for (ParamBlocks* blocks : {&s.first_moment, &s.second_moment}) {
    Matrix& b = (*blocks)[0];
    Matrix& a = (*blocks)[1];
    b = b.block(0, 0, b.rows(), r);
    a = a.block(0, 0, r, a.cols());
  }
}

UpperOptimizer make_upper(const FederationConfig& cfg, const ParamBlocks& like) {
  return cfg.upper_optimizer == UpperKind::kAdamW ? UpperOptimizer::adamw(cfg.adamw_config(), like)
                                                  : UpperOptimizer::sgd(cfg.upper_rate);
}

MetricsRecord plain_evaluate(ClientState& c, double rank_threshold) {
  return base_metrics(c, c.common, c.client ? *c.client : no_client(c), rank_threshold);
}

void plain_receive(ClientState& c, const CommonAdapter& global) { c.common = global; }

Upload plain_upload(ClientState& c) { return {c.common, 0.0}; }

// One upper-optimizer step on the client's own single-level loss.
void single_level_step(ClientState& c) {
  const ParamBlocks y = no_client(c).blocks();
  ParamBlocks x = c.common.blocks();
  const ParamBlocks g = c.task.grad_x(x, y, c.samplers[kXi].next());
  c.last_grad_norm = norm(g);
  c.upper.apply(x, g);
  c.common = CommonAdapter::from_blocks(std::move(x));
}

}  // namespace

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kPf2lora: return "pf2lora";
    case Algorithm::kHomlora: return "homlora";
    case Algorithm::kHetlora: return "hetlora";
    case Algorithm::kPerFedAvg: return "perfedavg";
  }
  return "unknown";
}

Algorithm parse_algorithm(const std::string& s) {
  if (s == "pf2lora") return Algorithm::kPf2lora;
  if (s == "homlora") return Algorithm::kHomlora;
  if (s == "hetlora") return Algorithm::kHetlora;
  if (s == "perfedavg") return Algorithm::kPerFedAvg;
  throw std::invalid_argument("unknown algorithm '" + s +
                              "' (expected pf2lora, homlora, hetlora or perfedavg)");
}

void FederationConfig::validate() const {
  require(clients >= 1, "clients must be >= 1");
  require(total_steps >= 1, "total_steps must be >= 1");
  require(interval >= 1, "interval must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(lower_rate >= 0.0 && std::isfinite(lower_rate), "lower_rate must be >= 0");
  require(upper_rate > 0.0 && std::isfinite(upper_rate), "upper_rate must be > 0");
  require(adam_beta1 > 0.0 && adam_beta1 < 1.0, "adam_beta1 must lie in (0, 1)");
  require(adam_beta2 > 0.0 && adam_beta2 < 1.0, "adam_beta2 must lie in (0, 1)");
  require(adam_epsilon > 0.0, "adam_epsilon must be > 0");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(lower_steps >= 1, "lower_steps must be >= 1");
  require(fd_step > 0.0, "fd_step must be > 0");
  require(init_std >= 0.0, "init_std must be >= 0");
  require(rank_threshold > 0.0 && rank_threshold <= 1.0, "rank_threshold must lie in (0, 1]");
  require(rank >= 1, "rank must be >= 1");
  if (algorithm == Algorithm::kPf2lora) {
    require(client_rank >= 1 && client_rank < rank, "client_rank must satisfy 0 < client_rank < rank");
    require(lower_rate > 0.0, "lower_rate must be > 0 for pf2lora");
  }
  if (algorithm == Algorithm::kHetlora) {
    require(r_min >= 1 && r_min <= r_max, "need 1 <= r_min <= r_max");
    require(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
    require(lambda >= 0.0, "lambda must be >= 0");
    require(prune_tol >= 0.0, "prune_tol must be >= 0");
    require(initial_ranks.empty() || initial_ranks.size() == clients,
            "initial_ranks needs one entry per client");
    for (std::size_t r : initial_ranks) {
      require(r >= r_min && r <= r_max, "initial_ranks must lie in [r_min, r_max]");
    }
  }
}

std::size_t FederationConfig::worker_threads() const {
  return threads == 0 ? clients : std::min(threads, clients);
}

BilevelStepConfig FederationConfig::step_config() const {
  BilevelStepConfig s;
  s.lower_rate = lower_rate;
  s.upper_rate = upper_rate;
  s.hvp_mode = hvp_mode;
  s.index_pattern = index_pattern;
  s.lower_steps = lower_steps;
  s.fd_step = fd_step;
  return s;
}

AdamWConfig FederationConfig::adamw_config() const {
  return {upper_rate, adam_beta1, adam_beta2, adam_epsilon, weight_decay};
}

// ---- BatchSampler ------------------------------------------------------------

BatchSampler::BatchSampler(std::size_t population, std::size_t batch_size, RngStream rng)
    : batch_size_(batch_size), rng_(std::move(rng)) {
  if (population == 0 || batch_size == 0) {
    throw std::invalid_argument("BatchSampler: empty population or batch");
  }
  if (batch_size_ < population) {
    order_.resize(population);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }
}

void BatchSampler::reshuffle() {
  std::shuffle(order_.begin(), order_.end(), rng_.engine());
  cursor_ = 0;
}

Batch BatchSampler::next() {
  if (order_.empty()) return {};
  if (cursor_ + batch_size_ > order_.size()) reshuffle();
  Batch b{std::span<const std::size_t>(order_).subspan(cursor_, batch_size_)};
  cursor_ += batch_size_;
  return b;
}

Matrix ClientState::adapter_sum() const {
  Matrix sum = common.product();
  if (client && client->rank() > 0) sum += client->product();
  return sum;
}

// ---- scheduler -----------------------------------------------------------------

std::vector<RoundLog> run_round_scheduler(const FederationConfig& cfg,
                                          std::vector<ClientState>& clients,
                                          const AlgorithmHooks& hooks, const RoundSink& sink) {
  cfg.validate();
  if (clients.size() != cfg.clients) {
    throw std::invalid_argument("scheduler: client count differs from config");
  }
  for (std::size_t k = 0; k < clients.size(); ++k) {
    if (clients[k].client_id != k) throw std::invalid_argument("scheduler: clients out of id order");
  }
  const std::size_t threads = cfg.worker_threads();
  std::vector<RoundLog> logs;
  logs.reserve(cfg.rounds());
  std::size_t done = 0;
  for (std::size_t round = 1; done < cfg.total_steps; ++round) {
    const std::size_t steps = std::min(cfg.interval, cfg.total_steps - done);
    for_each_client(clients, threads, [&](ClientState& c) {
      for (std::size_t s = 0; s < steps; ++s) hooks.local_step(c, done + s);
    });
    done += steps;

    std::vector<Upload> uploads(clients.size());
    for_each_client(clients, threads, [&](ClientState& c) {
      uploads[c.client_id] = hooks.upload(c);
    });
    const CommonAdapter global = hooks.aggregate(std::span<const Upload>(uploads));

    RoundLog log;
    log.round = round;
    log.step = done;
    log.records.resize(clients.size());
    for_each_client(clients, threads, [&](ClientState& c) {
      hooks.receive(c, global);
      MetricsRecord r = hooks.evaluate(c);
      r.round = round;
      r.step = done;
      log.records[c.client_id] = r;
    });
    log.synced.reserve(clients.size());
    for (const ClientState& c : clients) log.synced.push_back(c.common);
    if (sink) sink(log);
    logs.push_back(std::move(log));
  }
  return logs;
}

// ---- aggregation -----------------------------------------------------------------

CommonAdapter average_common(std::span<const CommonAdapter> adapters) {
  if (adapters.empty()) throw std::invalid_argument("average_common: no adapters");
  const CommonAdapter& first = adapters.front();
  Matrix dB(first.B.rows(), first.B.cols());
  Matrix dA(first.A.rows(), first.A.cols());
  for (const CommonAdapter& a : adapters) {
    require_same_shape(a.B, first.B, "average_common B");
    require_same_shape(a.A, first.A, "average_common A");
    dB += a.B - first.B;
    dA += a.A - first.A;
  }
  const double inv = 1.0 / static_cast<double>(adapters.size());
  CommonAdapter out = first;
  out.B.axpy(inv, dB);
  out.A.axpy(inv, dA);
  return out;
}

CommonAdapter average_common(std::span<const Upload> uploads) {
  std::vector<CommonAdapter> adapters;
  adapters.reserve(uploads.size());
  for (const Upload& u : uploads) adapters.push_back(u.adapter);
  return average_common(std::span<const CommonAdapter>(adapters));
}

CommonAdapter hetlora_truncate(const CommonAdapter& global, std::size_t r_k) {
  if (r_k == 0 || r_k > global.rank()) {
    throw std::invalid_argument("hetlora_truncate: rank " + std::to_string(r_k) +
                                " outside [1, " + std::to_string(global.rank()) + "]");
  }
  return {global.B.block(0, 0, global.B.rows(), r_k), global.A.block(0, 0, r_k, global.A.cols())};
}

CommonAdapter hetlora_zero_pad(const CommonAdapter& local, std::size_t r_max) {
  if (local.rank() > r_max) {
    throw std::invalid_argument("hetlora_zero_pad: local rank exceeds r_max");
  }
  CommonAdapter out{Matrix(local.B.rows(), r_max), Matrix(r_max, local.A.cols())};
  out.B.set_block(0, 0, local.B);
  out.A.set_block(0, 0, local.A);
  return out;
}

std::vector<double> hetlora_weights(std::span<const double> norms) {
  if (norms.empty()) throw std::invalid_argument("hetlora_weights: no clients");
  double total = 0.0;
  for (double v : norms) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("hetlora_weights: norms must be finite and non-negative");
    }
    total += v;
  }
  std::vector<double> w(norms.size(), 1.0 / static_cast<double>(norms.size()));
  if (total > 0.0) {
    for (std::size_t k = 0; k < norms.size(); ++k) w[k] = norms[k] / total;
  }
  return w;
}

CommonAdapter hetlora_aggregate(std::span<const Upload> uploads) {
  if (uploads.empty()) throw std::invalid_argument("hetlora_aggregate: no uploads");
  std::vector<double> norms;
  norms.reserve(uploads.size());
  for (const Upload& u : uploads) norms.push_back(u.weight_norm);
  const std::vector<double> w = hetlora_weights(norms);
  const CommonAdapter& first = uploads.front().adapter;
  CommonAdapter out{Matrix(first.B.rows(), first.B.cols()), Matrix(first.A.rows(), first.A.cols())};
  for (std::size_t k = 0; k < uploads.size(); ++k) {
    require_same_shape(uploads[k].adapter.B, first.B, "hetlora_aggregate B");
    require_same_shape(uploads[k].adapter.A, first.A, "hetlora_aggregate A");
    out.B.axpy(w[k], uploads[k].adapter.B);
    out.A.axpy(w[k], uploads[k].adapter.A);
  }
  return out;
}

std::vector<double> column_importance(const CommonAdapter& a) {
  std::vector<double> imp(a.rank());
  for (std::size_t j = 0; j < a.rank(); ++j) {
    double b = 0.0;
    for (std::size_t i = 0; i < a.B.rows(); ++i) b += a.B(i, j) * a.B(i, j);
    double r = 0.0;
    for (std::size_t i = 0; i < a.A.cols(); ++i) r += a.A(j, i) * a.A(j, i);
    imp[j] = std::sqrt(b) * std::sqrt(r);
  }
  return imp;
}

double block_importance(const CommonAdapter& a, std::size_t first) {
  if (first >= a.rank()) return 0.0;
  const std::size_t w = a.rank() - first;
  return a.B.block(0, first, a.B.rows(), w).norm() * a.A.block(first, 0, w, a.A.cols()).norm();
}

std::size_t hetlora_penalized_count(std::size_t r_k, std::size_t r_min, double gamma,
                                    GammaMode mode) {
  if (r_k <= r_min) return 0;
  const double r = static_cast<double>(r_k);
  std::size_t count = 0;
  if (mode == GammaMode::kTrailing) {
    count = static_cast<std::size_t>(std::ceil(gamma * r - 1e-12));
  } else {
    const auto keep = static_cast<std::size_t>(std::floor(gamma * r + 1e-12));
    count = r_k - std::min(keep, r_k);
  }
  count = std::max<std::size_t>(count, 1);
  return std::min(count, r_k - r_min);
}

void add_trailing_penalty(ParamBlocks& grads, const CommonAdapter& a, std::size_t count,
                          double lambda) {
  if (count == 0 || lambda == 0.0) return;
  const std::size_t first = a.rank() - count;
  Matrix& gB = grads.at(0);
  Matrix& gA = grads.at(1);
  for (std::size_t i = 0; i < a.B.rows(); ++i)
    for (std::size_t j = first; j < a.rank(); ++j) gB(i, j) += 2.0 * lambda * a.B(i, j);
  for (std::size_t j = first; j < a.rank(); ++j)
    for (std::size_t i = 0; i < a.A.cols(); ++i) gA(j, i) += 2.0 * lambda * a.A(j, i);
}

void hetlora_prune(ClientState& c, const FederationConfig& cfg) {
  std::size_t r = c.rank_k;
  const std::vector<double> imp = column_importance(c.common);
  const double mean = std::accumulate(imp.begin(), imp.end(), 0.0) / static_cast<double>(imp.size());
  const double tol = cfg.prune_tol * mean;
  // An all-zero adapter (B still at its zero init) gives no ranking of columns.
  if (mean > 0.0) {
    while (r > cfg.r_min && imp[r - 1] < tol) --r;
  }
  if (cfg.prune_rule == PruneRule::kShrink && r == c.rank_k && cfg.lambda > 0.0 &&
      c.penalized > 0) {
    const double now = block_importance(c.common, c.rank_k - c.penalized);
    if (now < c.block_importance_start) r = std::max(cfg.r_min, c.rank_k - c.penalized);
  }
  if (r == c.rank_k) return;
  c.common = hetlora_truncate(c.common, r);
  if (AdamWState* s = c.upper.adamw_state()) truncate_moments(*s, r);
  c.rank_k = r;
}

std::vector<std::size_t> hetlora_initial_ranks(const FederationConfig& cfg) {
  if (!cfg.initial_ranks.empty()) return cfg.initial_ranks;
  std::vector<std::size_t> ranks(cfg.clients);
  const double span = static_cast<double>(cfg.r_max - cfg.r_min);
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    const double v = static_cast<double>(cfg.r_min) +
                     span * static_cast<double>(k) / static_cast<double>(cfg.clients);
    ranks[k] = std::clamp(static_cast<std::size_t>(std::lround(v)), cfg.r_min, cfg.r_max);
  }
  return ranks;
}

ParamBlocks perfedavg_direction(const LoraRegressionTask& task, const ParamBlocks& x,
                                double alpha, PerFedAvgMode mode, double fd_step, Batch inner,
                                Batch outer, Batch hvp) {
  const ParamBlocks y =
      ClientAdapter::none(task.W0().rows(), task.W0().cols()).blocks();
  ParamBlocks adapted = x;
  if (alpha != 0.0) axpy(adapted, -alpha, task.grad_x(x, y, inner));
  ParamBlocks g = task.grad_x(adapted, y, outer);
  if (mode == PerFedAvgMode::kFirstOrder || alpha == 0.0) return g;

  ParamBlocks plus = x;
  ParamBlocks minus = x;
  axpy(plus, fd_step, g);
  axpy(minus, -fd_step, g);
  ParamBlocks hv = subtract(task.grad_x(plus, y, hvp), task.grad_x(minus, y, hvp));
  hv = scaled(std::move(hv), 1.0 / (2.0 * fd_step));
  if (!all_finite(hv)) throw NumericFailure("perfedavg: non-finite Hessian-vector product");
  axpy(g, -alpha, hv);
  return g;
}

// ---- client construction ---------------------------------------------------

std::vector<ClientState> make_clients(const FederationConfig& cfg,
                                      const std::vector<ClientData>& data) {
  cfg.validate();
  if (data.size() != cfg.clients) {
    throw std::invalid_argument("federation: got " + std::to_string(data.size()) +
                                " client datasets for clients = " + std::to_string(cfg.clients));
  }
  const std::size_t m = data.front().W0.rows();
  const std::size_t n = data.front().W0.cols();
  for (const ClientData& d : data) {
    if (d.W0.rows() != m || d.W0.cols() != n) {
      throw std::invalid_argument("federation: clients must share the frozen weight shape");
    }
  }

  RngStream init_rng(cfg.seed, derive_stream_id(kInitStream, 0));
  const bool zero_b = cfg.init == InitScheme::kLoraZero;
  const std::size_t common_rank = cfg.algorithm == Algorithm::kHetlora ? cfg.r_max : cfg.rank;
  CommonAdapter global;
  global.B = zero_b ? Matrix(m, common_rank)
                    : gaussian_matrix(m, common_rank, 0.0, cfg.init_std, init_rng);
  global.A = gaussian_matrix(common_rank, n, 0.0, cfg.init_std, init_rng);

  std::vector<std::size_t> het_ranks;
  if (cfg.algorithm == Algorithm::kHetlora) het_ranks = hetlora_initial_ranks(cfg);

  std::vector<ClientState> clients;
  clients.reserve(cfg.clients);
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    const ClientData& d = data[k];
    const std::size_t population = d.train.samples();
    std::vector<BatchSampler> samplers;
    for (std::size_t s = 0; s < kSamplerCount; ++s) {
      samplers.emplace_back(population, cfg.batch_size,
                            RngStream(cfg.seed, derive_stream_id(kSamplerStream, k * kSamplerCount + s)));
    }
    ClientState c{
        .client_id = k,
        .task = LoraRegressionTask(d.W0, d.train),
        .test = d.test,
        .truth = d.truth,
        .common = global,
        .client = std::nullopt,
        .upper = {},
        .samplers = std::move(samplers),
        .eval_sampler = BatchSampler(population, cfg.batch_size,
                                     RngStream(cfg.seed, derive_stream_id(kEvalStream, k))),
    };
    if (cfg.algorithm == Algorithm::kPf2lora) {
      RngStream rng(cfg.seed, derive_stream_id(kClientInitStream, k));
      if (zero_b) {
        c.client = ClientAdapter{Matrix(m, cfg.client_rank),
                                 gaussian_matrix(cfg.client_rank, n, 0.0, cfg.init_std, rng)};
      } else {
        auto [D, C] = orthogonal_complement_sample(global.A, global.B, cfg.client_rank, rng);
        D *= cfg.init_std;
        C *= cfg.init_std;
        c.client = ClientAdapter{std::move(D), std::move(C)};
      }
      validate_two_level(d.W0, c.common, *c.client);
    }
    if (cfg.algorithm == Algorithm::kHetlora) {
      c.rank_k = het_ranks[k];
      c.common = hetlora_truncate(global, c.rank_k);
    }
    c.upper = make_upper(cfg, c.common.blocks());
    clients.push_back(std::move(c));
  }
  return clients;
}

// ---- algorithms ----------------------------------------------------------------

std::vector<RoundLog> run_homlora(const FederationConfig& cfg, std::vector<ClientState>& clients,
                                  const RoundSink& sink) {
  AlgorithmHooks hooks;
  hooks.local_step = [](ClientState& c, std::size_t) { single_level_step(c); };
  hooks.upload = plain_upload;
  hooks.aggregate = [](std::span<const Upload> u) { return average_common(u); };
  hooks.receive = plain_receive;
  hooks.evaluate = [&cfg](ClientState& c) { return plain_evaluate(c, cfg.rank_threshold); };
  return run_round_scheduler(cfg, clients, hooks, sink);
}

std::vector<RoundLog> run_pf2lora(const FederationConfig& cfg, std::vector<ClientState>& clients,
                                  const RoundSink& sink) {
  for (const ClientState& c : clients) {
    if (!c.client) throw std::invalid_argument("pf2lora: every client needs a client adapter");
    validate_two_level(c.W0(), c.common, *c.client);
  }
  const BilevelStepConfig step_cfg = cfg.step_config();
  AlgorithmHooks hooks;
  hooks.local_step = [&step_cfg](ClientState& c, std::size_t) {
    StepBatches batches;
    batches.lower = c.samplers[kPi].next();
    batches.upper = c.samplers[kXi].next();
    batches.upper_tilde = c.samplers[kXiTilde].next();
    batches.hvp = c.samplers[kZeta].next();
    BilevelStepResult r = bilevel_local_step(c.task, c.common.blocks(), c.client->blocks(),
                                             step_cfg, batches, c.upper);
    c.common = CommonAdapter::from_blocks(std::move(r.x));
    c.client = ClientAdapter::from_blocks(std::move(r.y));
    c.last_grad_norm = r.diagnostics.hypergrad_norm;
  };
  hooks.upload = plain_upload;
  hooks.aggregate = [](std::span<const Upload> u) { return average_common(u); };
  hooks.receive = plain_receive;
  hooks.evaluate = [&cfg](ClientState& c) { return plain_evaluate(c, cfg.rank_threshold); };
  return run_round_scheduler(cfg, clients, hooks, sink);
}

std::vector<RoundLog> run_hetlora(const FederationConfig& cfg, std::vector<ClientState>& clients,
                                  const RoundSink& sink) {
  auto start_phase = [&cfg](ClientState& c) {
    c.penalized = hetlora_penalized_count(c.rank_k, cfg.r_min, cfg.gamma, cfg.gamma_mode);
    c.block_importance_start = block_importance(c.common, c.rank_k - c.penalized);
  };
  for (ClientState& c : clients) {
    if (c.rank_k < cfg.r_min || c.rank_k > cfg.r_max || c.common.rank() != c.rank_k) {
      throw std::invalid_argument("hetlora: client rank outside [r_min, r_max]");
    }
    start_phase(c);
  }

  AlgorithmHooks hooks;
  hooks.local_step = [&cfg](ClientState& c, std::size_t) {
    const ParamBlocks y = no_client(c).blocks();
    ParamBlocks x = c.common.blocks();
    ParamBlocks g = c.task.grad_x(x, y, c.samplers[kXi].next());
    add_trailing_penalty(g, c.common, c.penalized, cfg.lambda);
    c.last_grad_norm = norm(g);
    c.upper.apply(x, g);
    c.common = CommonAdapter::from_blocks(std::move(x));
  };
  hooks.upload = [&cfg](ClientState& c) {
    hetlora_prune(c, cfg);
    return Upload{hetlora_zero_pad(c.common, cfg.r_max), c.common.product().norm()};
  };
  hooks.aggregate = [](std::span<const Upload> u) { return hetlora_aggregate(u); };
  hooks.receive = [start_phase](ClientState& c, const CommonAdapter& global) {
    c.common = hetlora_truncate(global, c.rank_k);
    start_phase(c);
  };
  hooks.evaluate = [&cfg](ClientState& c) {
    MetricsRecord r = plain_evaluate(c, cfg.rank_threshold);
    r.current_rank_k = static_cast<long long>(c.rank_k);
    return r;
  };
  return run_round_scheduler(cfg, clients, hooks, sink);
}

std::vector<RoundLog> run_perfedavg(const FederationConfig& cfg,
                                    std::vector<ClientState>& clients, const RoundSink& sink) {
  AlgorithmHooks hooks;
  hooks.local_step = [&cfg](ClientState& c, std::size_t) {
    ParamBlocks x = c.common.blocks();
    const Batch inner = c.samplers[kPi].next();
    const Batch outer = c.samplers[kXi].next();
    const Batch hvp = c.samplers[kZeta].next();
    const ParamBlocks d = perfedavg_direction(c.task, x, cfg.lower_rate, cfg.perfedavg_mode,
                                              cfg.fd_step, inner, outer, hvp);
    c.last_grad_norm = norm(d);
    c.upper.apply(x, d);
    c.common = CommonAdapter::from_blocks(std::move(x));
  };
  hooks.upload = plain_upload;
  hooks.aggregate = [](std::span<const Upload> u) { return average_common(u); };
  hooks.receive = plain_receive;
  hooks.evaluate = [&cfg](ClientState& c) {
    // Personalize with one inner step on a held-in batch, then measure.
    ParamBlocks x = c.common.blocks();
    if (cfg.lower_rate != 0.0) {
      axpy(x, -cfg.lower_rate, c.task.grad_x(x, no_client(c).blocks(), c.eval_sampler.next()));
    }
    return base_metrics(c, CommonAdapter::from_blocks(std::move(x)), no_client(c),
                        cfg.rank_threshold);
  };
  return run_round_scheduler(cfg, clients, hooks, sink);
}

std::vector<RoundLog> run_federation(const FederationConfig& cfg,
                                     const std::vector<ClientData>& data, const RoundSink& sink) {
  std::vector<ClientState> clients = make_clients(cfg, data);
  switch (cfg.algorithm) {
    case Algorithm::kPf2lora: return run_pf2lora(cfg, clients, sink);
    case Algorithm::kHomlora: return run_homlora(cfg, clients, sink);
    case Algorithm::kHetlora: return run_hetlora(cfg, clients, sink);
    case Algorithm::kPerFedAvg: return run_perfedavg(cfg, clients, sink);
  }
  throw std::invalid_argument("unknown algorithm");
}

}  // namespace fedlora
