// Command-line driver: synth, theory and fed subcommands.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "fedlora/experiments.hpp"

namespace fs = std::filesystem;
using namespace fedlora;

namespace {

struct Overrides {
  std::optional<std::size_t> total_steps, interval, batch_size;
  std::optional<double> upper_rate, lower_rate, lambda, gamma;
  std::optional<std::string> prune_rule, gamma_mode, hvp_mode, index_pattern, upper_optimizer;
  bool noise_is_std = false;

  void add_to(CLI::App* app) {
    app->add_option("--total-steps", total_steps, "Local steps per client (T)");
    app->add_option("--interval", interval, "Steps between synchronizations (I)");
    app->add_option("--batch-size", batch_size, "Minibatch size");
    app->add_option("--upper-rate", upper_rate, "Upper-level / adapter learning rate");
    app->add_option("--lower-rate", lower_rate, "Lower-level (or inner) SGD rate");
    app->add_option("--lambda", lambda, "HETLoRA penalty");
    app->add_option("--gamma", gamma, "HETLoRA sparsity factor");
    app->add_option("--gamma-mode", gamma_mode, "trailing | decay");
    app->add_option("--prune-rule", prune_rule, "shrink | threshold");
    app->add_option("--hvp-mode", hvp_mode, "analytic | finite_difference");
    app->add_option("--index-pattern", index_pattern, "current | next");
    app->add_option("--upper-optimizer", upper_optimizer, "adamw | sgd");
    app->add_flag("--noise-is-std", noise_is_std, "Read noise levels as standard deviations");
  }

  nlohmann::json as_json() const {
    nlohmann::json j = nlohmann::json::object();
    if (total_steps) j["total_steps"] = *total_steps;
    if (interval) j["interval"] = *interval;
    if (batch_size) j["batch_size"] = *batch_size;
    if (upper_rate) j["upper_rate"] = *upper_rate;
    if (lower_rate) j["lower_rate"] = *lower_rate;
    if (lambda) j["lambda"] = *lambda;
    if (gamma) j["gamma"] = *gamma;
    if (gamma_mode) j["gamma_mode"] = *gamma_mode;
    if (prune_rule) j["hetlora_prune_rule"] = *prune_rule;
    if (hvp_mode) j["hvp_mode"] = *hvp_mode;
    if (index_pattern) j["index_pattern"] = *index_pattern;
    if (upper_optimizer) j["upper_optimizer"] = *upper_optimizer;
    if (noise_is_std) j["noise_is_std"] = true;
    return j;
  }
};

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path, {});
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what(), {});
  }
}

void print_synth(const SynthResult& r, const FederationConfig& fed) {
  for (const ClientSummary& s : r.clients) {
    std::printf("client %zu: true_rank=%zu eff_rank=%lld", s.client_id, s.true_rank, s.final_eff_rank);
    if (fed.algorithm == Algorithm::kHetlora) std::printf(" rank_k=%lld", s.final_rank_k);
    std::printf(" test_loss=%.6g noise_floor=%.6g rel_fro_err=%.4g\n", s.final_test_loss,
                s.noise_floor, s.relative_fro_error);
  }
  std::printf("rounds=%zu seconds=%.3f\n", r.logs.size(), r.seconds);
}

int run_training(const std::string& command, RunConfig cfg, const fs::path& out_dir) {
  cfg.fed.threads = threads_from_env(cfg.fed.clients);
  fs::create_directories(out_dir);
  const fs::path metrics = out_dir / "metrics.csv";
  const fs::path summary = out_dir / "summary.json";

  RunManifest manifest;
  manifest.command = command;
  manifest.config = config_to_json(cfg);
  manifest.seed = cfg.fed.seed;
  manifest.started_at = utc_timestamp();
  manifest.outputs = {metrics.string(), summary.string()};
  fs::remove(out_dir / kCompleteMarker);
  write_manifest(manifest, out_dir);

  MetricsWriter writer(metrics);
  const RoundSink sink = [&writer](const RoundLog& log) { writer.append(log); };
  if (cfg.train_csv.empty()) {
    const SynthResult r = run_synth(cfg, sink);
    std::ofstream(summary) << summary_to_json(r).dump(2) << '\n';
    print_synth(r, cfg.fed);
  } else {
    const auto logs = run_federation(cfg.fed, client_data_for(cfg), sink);
    nlohmann::json final_rows = nlohmann::json::array();
    for (const MetricsRecord& m : logs.back().records) {
      final_rows.push_back({{"client_id", m.client_id}, {"train_loss", m.train_loss},
                            {"test_loss", m.test_loss}, {"eff_rank", m.eff_rank}});
      std::printf("client %zu: train_loss=%.6g test_loss=%.6g eff_rank=%lld\n", m.client_id,
                  m.train_loss, m.test_loss, m.eff_rank);
    }
    std::ofstream(summary) << nlohmann::json{{"rounds", logs.size()}, {"clients", final_rows}}.dump(2)
                           << '\n';
  }
  finish_run(manifest, out_dir);
  std::printf("wrote %s\n", out_dir.string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated two-level LoRA simulator"};
  app.require_subcommand(1);

  // synth
  CLI::App* synth = app.add_subcommand("synth", "Two-client synthetic rank-learning study");
  std::string synth_algorithm = "pf2lora";
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  std::string synth_config;
  Overrides synth_over;
  synth->add_option("--algorithm", synth_algorithm, "pf2lora | homlora | hetlora | perfedavg")
      ->check(CLI::IsMember({"pf2lora", "homlora", "hetlora", "perfedavg"}));
  synth->add_option("--seed", synth_seed, "Root seed");
  synth->add_option("--out-dir", synth_out, "Output directory (default runs/synth-<algorithm>-<seed>)");
  synth->add_option("--config", synth_config, "JSON file of overrides on top of the study defaults");
  synth_over.add_to(synth);

  // theory
  CLI::App* theory = app.add_subcommand("theory", "Convergence harness on random quadratic bilevel problems");
  TheoryOptions topts;
  std::optional<double> mu;
  std::optional<double> smoothness;
  std::string theory_out;
  theory->add_option("--seed", topts.seed, "Root seed");
  theory->add_option("--instances", topts.instances, "Random instances");
  theory->add_option("--steps", topts.steps, "Steps per run (T)");
  theory->add_option("--head-steps", topts.head_steps, "Steps in the reference window");
  theory->add_option("--ratio-limit", topts.ratio_limit, "Pass threshold for full/head mean ratio");
  theory->add_option("--dim-x", topts.dim_x, "Upper dimension");
  theory->add_option("--dim-y", topts.dim_y, "Lower dimension");
  theory->add_option("--coupling", topts.spectrum.coupling, "Scale of the coupling matrix");
  theory->add_option("--mu", mu, "Lower curvature bound; with --L draws uncoupled instances in [mu, L]");
  theory->add_option("--L", smoothness, "Upper curvature bound");
  theory->add_option("--out-dir", theory_out, "Output directory (default runs/theory-<seed>)");

  // fed
  CLI::App* fed = app.add_subcommand("fed", "Run any algorithm from a config file");
  std::string fed_config;
  std::string fed_out;
  std::optional<std::string> fed_algorithm;
  std::optional<std::uint64_t> fed_seed;
  fed->add_option("--config", fed_config, "JSON config")->required();
  fed->add_option("--out-dir", fed_out, "Output directory (default runs/fed-<seed>)");
  fed->add_option("--algorithm", fed_algorithm, "Override the config's algorithm");
  fed->add_option("--seed", fed_seed, "Override the config's seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      RunConfig cfg = synth_defaults(parse_algorithm(synth_algorithm), synth_seed);
      if (!synth_config.empty()) cfg = parse_run_config(read_json_file(synth_config), cfg, false);
      cfg = parse_run_config(synth_over.as_json(), cfg, false);
      if (!cfg.train_csv.empty()) throw ConfigError("synth generates its own data", {"train_csv"});
      const fs::path out = synth_out.empty()
                               ? fs::path("runs") / ("synth-" + synth_algorithm + "-" + std::to_string(synth_seed))
                               : fs::path(synth_out);
      return run_training("synth", cfg, out);
    }
    if (theory->parsed()) {
      if (mu || smoothness) {
        if (!mu || !smoothness) throw ConfigError("--mu and --L must be given together", {"mu", "L"});
        if (!(*mu > 0.0) || !(*smoothness >= *mu)) {
          throw std::invalid_argument("theory: need 0 < mu <= L");
        }
        topts.spectrum = {*mu, *smoothness, 0.0, *mu, *smoothness};
      }
      const fs::path out = theory_out.empty() ? fs::path("runs") / ("theory-" + std::to_string(topts.seed))
                                              : fs::path(theory_out);
      fs::create_directories(out);
      RunManifest manifest;
      manifest.command = "theory";
      manifest.config = {{"seed", topts.seed},         {"instances", topts.instances},
                         {"steps", topts.steps},       {"head_steps", topts.head_steps},
                         {"ratio_limit", topts.ratio_limit}, {"dim_x", topts.dim_x},
                         {"dim_y", topts.dim_y},       {"lower_min", topts.spectrum.lower_min},
                         {"lower_max", topts.spectrum.lower_max}, {"coupling", topts.spectrum.coupling},
                         {"reduced_min", topts.spectrum.reduced_min},
                         {"reduced_max", topts.spectrum.reduced_max}};
      manifest.seed = topts.seed;
      manifest.started_at = utc_timestamp();
      manifest.outputs = {(out / "trace.csv").string(), (out / "summary.json").string()};
      fs::remove(out / kCompleteMarker);
      write_manifest(manifest, out);

      const TheoryReport report = run_theory(topts);
      write_theory_trace(report, out / "trace.csv");
      std::ofstream(out / "summary.json") << theory_summary_json(report, topts).dump(2) << '\n';
      for (const auto& r : report.instances) {
        std::printf("instance %zu: kappa=%.3f ratio=%.4f contraction_violations=%zu bias_violations=%zu\n",
                    r.index, r.smoothness / r.mu, r.ratio, r.violations.contraction, r.violations.bias);
      }
      std::printf("decay check: %s\n", report.decay_pass(topts.ratio_limit) ? "PASS" : "FAIL");
      std::printf("step bound checks: %s\n", report.violations() == 0 ? "PASS" : "FAIL");
      finish_run(manifest, out);
      return kExitOk;
    }
    if (fed->parsed()) {
      nlohmann::json doc = read_json_file(fed_config);
      if (fed_algorithm) doc["algorithm"] = *fed_algorithm;
      if (fed_seed) doc["seed"] = *fed_seed;
      const RunConfig cfg = parse_run_config(doc, RunConfig{}, true);
      const fs::path out = fed_out.empty() ? fs::path("runs") / ("fed-" + std::to_string(cfg.fed.seed))
                                           : fs::path(fed_out);
      return run_training("fed", cfg, out);
    }
  } catch (const NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
