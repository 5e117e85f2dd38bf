#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedlora/federation.hpp"
#include "fedlora/models.hpp"
#include "fedlora/synthdata.hpp"

namespace fedlora {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kMetricsHeader =
    "round,step,client_id,train_loss,test_loss,fro_dist_sq,eff_rank,hypergrad_norm,current_rank_k";

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

/// Schema violation in a run configuration. `keys` names the offending keys.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& message, std::vector<std::string> keys);
  const std::vector<std::string>& keys() const { return keys_; }

 private:
  std::vector<std::string> keys_;
};

// ---- configuration -------------------------------------------------------

/// Everything a run needs: the federation knobs plus where data comes from.
struct RunConfig {
  FederationConfig fed;
  SyntheticSpec data;
  /// When non-empty, client datasets are read from CSV instead of generated.
  std::vector<std::string> train_csv;
  std::vector<std::string> test_csv;
};

/// Keys a `fed` config must set explicitly.
const std::vector<std::string>& required_config_keys();

/// Flat key/value document; unknown keys and missing required keys are errors.
/// Keys absent from `doc` keep their value in `base`.
RunConfig parse_run_config(const nlohmann::json& doc, const RunConfig& base,
                           bool enforce_required);
RunConfig load_run_config(const std::filesystem::path& path);
/// Full key set; parse_run_config(config_to_json(c), {}, true) reproduces c.
nlohmann::json config_to_json(const RunConfig& c);

std::vector<ClientData> client_data_for(const RunConfig& c);

/// Caps worker threads with FEDLORA_THREADS when set.
std::size_t threads_from_env(std::size_t clients);

// ---- metrics ---------------------------------------------------------------

/// Whole-file writer: header plus records sorted by (round, client_id).
void write_metrics(std::vector<MetricsRecord> records, const std::filesystem::path& path);
std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);
std::string format_metrics_row(const MetricsRecord& r);

/// Streaming writer: header on open, one flushed block per round.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void append(const RoundLog& log);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

// ---- manifest ----------------------------------------------------------------

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::string version = kVersion;
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
  std::vector<std::string> outputs;
  bool completed = false;

  nlohmann::json to_json() const;
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kCompleteMarker = "COMPLETE";

std::string utc_timestamp();
void write_manifest(const RunManifest& m, const std::filesystem::path& dir);
/// Sets finished_at and completed, rewrites the manifest and drops the marker.
void finish_run(RunManifest& m, const std::filesystem::path& dir);
bool run_is_complete(const std::filesystem::path& dir);

// ---- synthetic study ---------------------------------------------------------

/// Two-client rank-learning setup with the per-algorithm defaults.
RunConfig synth_defaults(Algorithm algorithm, std::uint64_t seed);

struct ClientSummary {
  std::size_t client_id = 0;
  std::size_t true_rank = 0;
  long long final_eff_rank = -1;
  long long final_rank_k = -1;
  double final_test_loss = 0.0;
  double final_train_loss = 0.0;
  double noise_floor = 0.0;         // n_out·σ²
  double relative_fro_error = 0.0;  // ‖Ŵ − W*‖_F / ‖W*‖_F
  double rank1_test_loss = 0.0;     // test loss of the best rank-1 fit on train data
  bool rank_reached_r_min = false;  // HETLoRA only
};

struct SynthResult {
  std::vector<RoundLog> logs;
  std::vector<ClientSummary> clients;
  double seconds = 0.0;
};

/// Generates the data from c.data, runs c.fed and summarizes.
SynthResult run_synth(const RunConfig& c, const RoundSink& sink = {});
nlohmann::json summary_to_json(const SynthResult& r);

/// ‖XW − Y‖²/samples.
double regression_loss(const Matrix& W, const RegressionData& data);

// ---- theory harness -----------------------------------------------------------

struct TheoryOptions {
  std::size_t instances = 5;
  std::size_t dim_x = 8;
  std::size_t dim_y = 8;
  std::size_t steps = 1600;
  std::size_t head_steps = 100;
  double ratio_limit = 0.15;
  std::uint64_t seed = 0;
  QuadraticSpectrum spectrum;
};

struct BoundViolations {
  std::size_t contraction = 0;
  std::size_t bias = 0;
  std::size_t total() const { return contraction + bias; }
};

/// Checks the per-step lower-level contraction and hypergradient-bias bounds
/// along a deterministic trace (relative 1e-12 plus absolute 1e-14 slack).
BoundViolations check_step_bounds(const std::vector<DeterministicTraceRow>& trace, double mu,
                                   double smoothness);

struct TheoryInstanceResult {
  std::size_t index = 0;
  double mu = 0.0;
  double smoothness = 0.0;
  double alpha = 0.0;
  double eta = 0.0;
  double head_mean = 0.0;  // mean ‖∇Φ‖² over the first head_steps
  double full_mean = 0.0;  // mean ‖∇Φ‖² over the run
  double ratio = 0.0;
  BoundViolations violations;
  std::vector<DeterministicTraceRow> trace;
};

struct TheoryReport {
  std::vector<TheoryInstanceResult> instances;
  double seconds = 0.0;
  bool decay_pass(double ratio_limit) const;
  std::size_t violations() const;
};

TheoryReport run_theory(const TheoryOptions& opts);
void write_theory_trace(const TheoryReport& report, const std::filesystem::path& path);
nlohmann::json theory_summary_json(const TheoryReport& report, const TheoryOptions& opts);

}  // namespace fedlora
