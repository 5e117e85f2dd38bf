#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedlora/models.hpp"
#include "fedlora/numerics.hpp"
#include "fedlora/optim.hpp"

namespace fedlora {

enum class Algorithm { kPf2lora, kHomlora, kHetlora, kPerFedAvg };
enum class UpperKind { kAdamW, kSgd };
/// kOrthogonalGaussian: all factors N(0, σ²), client factors drawn orthogonal to
/// the common ones. kLoraZero: A, C Gaussian with B, D zero.
enum class InitScheme { kOrthogonalGaussian, kLoraZero };
/// kTrailing penalizes the last ⌈γ·r_k⌉ columns; kDecay penalizes everything
/// past ⌊γ·r_k⌋.
enum class GammaMode { kTrailing, kDecay };
/// kShrink drops the penalized block once its importance falls during a local
/// phase; kThreshold drops trailing columns under prune_tol × mean importance.
/// Both drop trailing columns that are already negligible.
enum class PruneRule { kShrink, kThreshold };
enum class PerFedAvgMode { kExact, kFirstOrder };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);

struct FederationConfig {
  Algorithm algorithm = Algorithm::kPf2lora;
  std::size_t clients = 2;        // M
  std::size_t total_steps = 2000;  // T
  std::size_t interval = 10;      // I
  std::size_t batch_size = 128;

  double lower_rate = 2e-3;  // α: lower-level SGD, or Per-FedAvg inner step
  double upper_rate = 5e-3;  // η
  UpperKind upper_optimizer = UpperKind::kAdamW;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 0.0;
  HvpMode hvp_mode = HvpMode::kAnalytic;
  IndexPattern index_pattern = IndexPattern::kCurrentIterate;
  std::size_t lower_steps = 1;
  double fd_step = kHvpFdStep;

  std::size_t rank = 4;         // r
  std::size_t client_rank = 2;  // r̃
  InitScheme init = InitScheme::kOrthogonalGaussian;
  double init_std = 1.0;

  std::size_t r_min = 1;
  std::size_t r_max = 12;
  double gamma = 0.3;
  double lambda = 0.1;
  GammaMode gamma_mode = GammaMode::kTrailing;
  PruneRule prune_rule = PruneRule::kShrink;
  double prune_tol = 1e-4;  // relative to the mean column importance
  /// Explicit HETLoRA starting ranks; empty means the interpolation rule.
  std::vector<std::size_t> initial_ranks;

  PerFedAvgMode perfedavg_mode = PerFedAvgMode::kExact;

  double rank_threshold = 0.9;
  std::uint64_t seed = 0;
  /// Worker threads for the client loop; 0 means one per client.
  std::size_t threads = 0;

  void validate() const;
  std::size_t rounds() const { return (total_steps + interval - 1) / interval; }
  std::size_t worker_threads() const;
  BilevelStepConfig step_config() const;
  AdamWConfig adamw_config() const;
};

/// What a client brings to the federation.
struct ClientData {
  Matrix W0;
  RegressionData train;
  RegressionData test;
  std::optional<Matrix> truth;  // W* when known, for fro_dist_sq
};

/// Epoch-based sampler: rows drawn without replacement, reshuffled each epoch.
/// Returns the full set when batch_size ≥ population.
class BatchSampler {
 public:
  BatchSampler(std::size_t population, std::size_t batch_size, RngStream rng);
  /// The returned span stays valid until the next call.
  Batch next();

 private:
  void reshuffle();

  std::size_t batch_size_;
  RngStream rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct ClientState {
  std::size_t client_id = 0;
  LoraRegressionTask task;  // W0 and training data
  RegressionData test;
  std::optional<Matrix> truth;
  CommonAdapter common;
  std::optional<ClientAdapter> client;
  UpperOptimizer upper;
  /// π, ξ, ξ̃, ζ in that order.
  std::vector<BatchSampler> samplers;
  BatchSampler eval_sampler;
  double last_grad_norm = 0.0;

  // HETLoRA bookkeeping.
  std::size_t rank_k = 0;
  std::size_t penalized = 0;
  double block_importance_start = 0.0;

  const Matrix& W0() const { return task.W0(); }
  const RegressionData& train() const { return task.data(); }
  /// BA + DC (no W0).
  Matrix adapter_sum() const;
};

struct MetricsRecord {
  std::size_t round = 0;
  std::size_t step = 0;
  std::size_t client_id = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double fro_dist_sq = -1.0;
  long long eff_rank = -1;
  double hypergrad_norm = -1.0;
  long long current_rank_k = -1;
};

struct RoundLog {
  std::size_t round = 0;  // 1-based
  std::size_t step = 0;   // local steps completed per client
  std::vector<MetricsRecord> records;
  /// Common adapters held by each client right after synchronization.
  std::vector<CommonAdapter> synced;
};

/// The only thing a client sends to the server.
struct Upload {
  CommonAdapter adapter;
  double weight_norm = 0.0;  // ‖B_k A_k‖_F
};

struct AlgorithmHooks {
  std::function<void(ClientState&, std::size_t step)> local_step;
  std::function<Upload(ClientState&)> upload;
  std::function<CommonAdapter(std::span<const Upload>)> aggregate;
  std::function<void(ClientState&, const CommonAdapter&)> receive;
  std::function<MetricsRecord(ClientState&)> evaluate;
};

using RoundSink = std::function<void(const RoundLog&)>;

/// Drives T local steps per client, synchronizing every I steps (a shorter
/// final phase when I does not divide T). Emits one RoundLog per sync.
std::vector<RoundLog> run_round_scheduler(const FederationConfig& cfg,
                                          std::vector<ClientState>& clients,
                                          const AlgorithmHooks& hooks, const RoundSink& sink = {});

// ---- aggregation ----------------------------------------------------------

/// Entrywise mean in client order; exact when all inputs are equal.
CommonAdapter average_common(std::span<const CommonAdapter> adapters);
CommonAdapter average_common(std::span<const Upload> uploads);

CommonAdapter hetlora_truncate(const CommonAdapter& global, std::size_t r_k);
CommonAdapter hetlora_zero_pad(const CommonAdapter& local, std::size_t r_max);
/// Non-negative weights summing to 1; uniform when every norm is zero.
std::vector<double> hetlora_weights(std::span<const double> norms);
CommonAdapter hetlora_aggregate(std::span<const Upload> uploads);

/// ‖B[:,j]‖·‖A[j,:]‖ per column.
std::vector<double> column_importance(const CommonAdapter& a);
/// ‖B[:, first:]‖_F·‖A[first:, :]‖_F.
double block_importance(const CommonAdapter& a, std::size_t first);
/// Trailing columns that carry the penalty at rank r_k, never cutting below r_min.
std::size_t hetlora_penalized_count(std::size_t r_k, std::size_t r_min, double gamma,
                                    GammaMode mode);
/// Adds the gradient of λ(‖B_blk‖² + ‖A_blk‖²) over the last `count` columns.
void add_trailing_penalty(ParamBlocks& grads, const CommonAdapter& a, std::size_t count,
                          double lambda);
/// Post-training pruning; updates common, rank_k and the optimizer moments.
void hetlora_prune(ClientState& client, const FederationConfig& cfg);
std::vector<std::size_t> hetlora_initial_ranks(const FederationConfig& cfg);

/// (I − α∇²f)∇f(x − α∇f) in exact mode, ∇f(x − α∇f) in first-order mode, where
/// f is the client's single-level LoRA loss over x = {B, A}.
ParamBlocks perfedavg_direction(const LoraRegressionTask& task, const ParamBlocks& x,
                                double alpha, PerFedAvgMode mode, double fd_step, Batch inner,
                                Batch outer, Batch hvp);

// ---- algorithms ------------------------------------------------------------

std::vector<ClientState> make_clients(const FederationConfig& cfg,
                                      const std::vector<ClientData>& data);

std::vector<RoundLog> run_homlora(const FederationConfig& cfg, std::vector<ClientState>& clients,
                                  const RoundSink& sink = {});
std::vector<RoundLog> run_pf2lora(const FederationConfig& cfg, std::vector<ClientState>& clients,
                                  const RoundSink& sink = {});
std::vector<RoundLog> run_hetlora(const FederationConfig& cfg, std::vector<ClientState>& clients,
                                  const RoundSink& sink = {});
std::vector<RoundLog> run_perfedavg(const FederationConfig& cfg,
                                    std::vector<ClientState>& clients, const RoundSink& sink = {});

/// Builds client states for cfg.algorithm and runs it.
std::vector<RoundLog> run_federation(const FederationConfig& cfg,
                                     const std::vector<ClientData>& data,
                                     const RoundSink& sink = {});

}  // namespace fedlora
