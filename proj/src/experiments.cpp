#include "fedlora/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fedlora/csv.hpp"

namespace fedlora {

using nlohmann::json;

ConfigError::ConfigError(const std::string& message, std::vector<std::string> keys)
    : std::invalid_argument(message), keys_(std::move(keys)) {}

namespace {

template <class E>
struct EnumNames {
  std::vector<std::pair<E, const char*>> names;

  const char* name(E v) const {
    for (const auto& [e, s] : names)
      if (e == v) return s;
    throw std::logic_error("unnamed enum value");
  }
  std::optional<E> parse(const std::string& s) const {
    for (const auto& [e, n] : names)
      if (s == n) return e;
    return std::nullopt;
  }
  std::string choices() const {
    std::string out;
    for (const auto& [e, n] : names) out += (out.empty() ? "" : ", ") + std::string(n);
    return out;
  }
};

const EnumNames<UpperKind> kUpperNames{{{UpperKind::kAdamW, "adamw"}, {UpperKind::kSgd, "sgd"}}};
const EnumNames<HvpMode> kHvpNames{
    {{HvpMode::kAnalytic, "analytic"}, {HvpMode::kFiniteDifference, "finite_difference"}}};
const EnumNames<IndexPattern> kIndexNames{
    {{IndexPattern::kCurrentIterate, "current"}, {IndexPattern::kNextIterate, "next"}}};
const EnumNames<InitScheme> kInitNames{
    {{InitScheme::kOrthogonalGaussian, "orthogonal_gaussian"}, {InitScheme::kLoraZero, "lora_zero"}}};
const EnumNames<GammaMode> kGammaNames{
    {{GammaMode::kTrailing, "trailing"}, {GammaMode::kDecay, "decay"}}};
const EnumNames<PruneRule> kPruneNames{
    {{PruneRule::kShrink, "shrink"}, {PruneRule::kThreshold, "threshold"}}};
const EnumNames<PerFedAvgMode> kPerFedAvgNames{
    {{PerFedAvgMode::kExact, "exact"}, {PerFedAvgMode::kFirstOrder, "first_order"}}};
const EnumNames<Algorithm> kAlgorithmNames{{{Algorithm::kPf2lora, "pf2lora"},
                                            {Algorithm::kHomlora, "homlora"},
                                            {Algorithm::kHetlora, "hetlora"},
                                            {Algorithm::kPerFedAvg, "perfedavg"}}};

struct KeyHandler {
  std::function<void(const json&, RunConfig&)> read;  // throws std::exception on bad value
  std::function<json(const RunConfig&)> write;
};

template <class T>
T as(const json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
    return v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw std::invalid_argument("expected a string");
    return v.get<std::string>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw std::invalid_argument("expected a number");
    return v.get<double>();
  } else {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw std::invalid_argument("expected a non-negative integer");
    }
    return v.get<T>();
  }
}

template <class T>
std::vector<T> as_list(const json& v) {
  if (!v.is_array()) throw std::invalid_argument("expected a list");
  std::vector<T> out;
  for (const json& e : v) out.push_back(as<T>(e));
  return out;
}

template <class E>
KeyHandler enum_key(E FederationConfig::*field, const EnumNames<E>& names) {
  return {[field, &names](const json& v, RunConfig& c) {
            const auto e = names.parse(as<std::string>(v));
            if (!e) throw std::invalid_argument("expected one of: " + names.choices());
            c.fed.*field = *e;
          },
          [field, &names](const RunConfig& c) { return json(names.name(c.fed.*field)); }};
}

template <class T>
KeyHandler fed_key(T FederationConfig::*field) {
  return {[field](const json& v, RunConfig& c) { c.fed.*field = as<T>(v); },
          [field](const RunConfig& c) { return json(c.fed.*field); }};
}

template <class T>
KeyHandler data_key(T SyntheticSpec::*field) {
  return {[field](const json& v, RunConfig& c) { c.data.*field = as<T>(v); },
          [field](const RunConfig& c) { return json(c.data.*field); }};
}

const std::map<std::string, KeyHandler>& handlers() {
  static const std::map<std::string, KeyHandler> table = [] {
    std::map<std::string, KeyHandler> t;
    t["algorithm"] = enum_key(&FederationConfig::algorithm, kAlgorithmNames);
    t["clients"] = fed_key(&FederationConfig::clients);
    t["total_steps"] = fed_key(&FederationConfig::total_steps);
    t["interval"] = fed_key(&FederationConfig::interval);
    t["batch_size"] = fed_key(&FederationConfig::batch_size);
    t["lower_rate"] = fed_key(&FederationConfig::lower_rate);
    t["upper_rate"] = fed_key(&FederationConfig::upper_rate);
    t["upper_optimizer"] = enum_key(&FederationConfig::upper_optimizer, kUpperNames);
    t["adam_beta1"] = fed_key(&FederationConfig::adam_beta1);
    t["adam_beta2"] = fed_key(&FederationConfig::adam_beta2);
    t["adam_epsilon"] = fed_key(&FederationConfig::adam_epsilon);
    t["weight_decay"] = fed_key(&FederationConfig::weight_decay);
    t["hvp_mode"] = enum_key(&FederationConfig::hvp_mode, kHvpNames);
    t["index_pattern"] = enum_key(&FederationConfig::index_pattern, kIndexNames);
    t["lower_steps"] = fed_key(&FederationConfig::lower_steps);
    t["fd_step"] = fed_key(&FederationConfig::fd_step);
    t["rank"] = fed_key(&FederationConfig::rank);
    t["client_rank"] = fed_key(&FederationConfig::client_rank);
    t["init"] = enum_key(&FederationConfig::init, kInitNames);
    t["init_std"] = fed_key(&FederationConfig::init_std);
    t["r_min"] = fed_key(&FederationConfig::r_min);
    t["r_max"] = fed_key(&FederationConfig::r_max);
    t["gamma"] = fed_key(&FederationConfig::gamma);
    t["lambda"] = fed_key(&FederationConfig::lambda);
    t["gamma_mode"] = enum_key(&FederationConfig::gamma_mode, kGammaNames);
    t["hetlora_prune_rule"] = enum_key(&FederationConfig::prune_rule, kPruneNames);
    t["prune_tol"] = fed_key(&FederationConfig::prune_tol);
    t["initial_ranks"] = {
        [](const json& v, RunConfig& c) { c.fed.initial_ranks = as_list<std::size_t>(v); },
        [](const RunConfig& c) { return json(c.fed.initial_ranks); }};
    t["perfedavg_mode"] = enum_key(&FederationConfig::perfedavg_mode, kPerFedAvgNames);
    t["rank_threshold"] = fed_key(&FederationConfig::rank_threshold);
    t["seed"] = {[](const json& v, RunConfig& c) {
                   c.fed.seed = as<std::uint64_t>(v);
                   c.data.seed = c.fed.seed;
                 },
                 [](const RunConfig& c) { return json(c.fed.seed); }};
    t["m"] = data_key(&SyntheticSpec::m);
    t["n"] = data_key(&SyntheticSpec::n);
    t["true_ranks"] = {[](const json& v, RunConfig& c) { c.data.ranks = as_list<std::size_t>(v); },
                       [](const RunConfig& c) { return json(c.data.ranks); }};
    t["samples"] = data_key(&SyntheticSpec::samples);
    t["noise_levels"] = {
        [](const json& v, RunConfig& c) { c.data.noise_levels = as_list<double>(v); },
        [](const RunConfig& c) { return json(c.data.noise_levels); }};
    t["noise_is_std"] = data_key(&SyntheticSpec::noise_is_std);
    t["train_fraction"] = data_key(&SyntheticSpec::train_fraction);
    t["train_csv"] = {[](const json& v, RunConfig& c) { c.train_csv = as_list<std::string>(v); },
                      [](const RunConfig& c) { return json(c.train_csv); }};
    t["test_csv"] = {[](const json& v, RunConfig& c) { c.test_csv = as_list<std::string>(v); },
                     [](const RunConfig& c) { return json(c.test_csv); }};
    return t;
  }();
  return table;
}

std::size_t data_clients(const RunConfig& c) {
  return c.train_csv.empty() ? c.data.ranks.size() : c.train_csv.size();
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : ", ") + s;
  return out;
}

}  // namespace

// ---- configuration -------------------------------------------------------------

const std::vector<std::string>& required_config_keys() {
  static const std::vector<std::string> keys{"algorithm", "total_steps", "interval", "seed"};
  return keys;
}

RunConfig parse_run_config(const json& doc, const RunConfig& base, bool enforce_required) {
  if (!doc.is_object()) throw ConfigError("config must be a key/value object", {});
  RunConfig c = base;
  std::vector<std::string> bad;
  std::vector<std::string> messages;

  if (enforce_required) {
    for (const std::string& k : required_config_keys()) {
      if (!doc.contains(k)) {
        bad.push_back(k);
        messages.push_back("missing required key '" + k + "'");
      }
    }
  }
  for (const auto& [key, value] : doc.items()) {
    const auto it = handlers().find(key);
    if (it == handlers().end()) {
      bad.push_back(key);
      messages.push_back("unknown key '" + key + "'");
      continue;
    }
    try {
      it->second.read(value, c);
    } catch (const std::exception& e) {
      bad.push_back(key);
      messages.push_back("key '" + key + "': " + e.what());
    }
  }
  if (bad.empty()) {
    if (!doc.contains("clients")) c.fed.clients = data_clients(c);
    if (c.fed.clients != data_clients(c)) {
      bad.push_back("clients");
      messages.push_back("key 'clients' = " + std::to_string(c.fed.clients) + " but the data source has " +
                         std::to_string(data_clients(c)) + " clients");
    }
    if (c.train_csv.size() != c.test_csv.size()) {
      bad.push_back("test_csv");
      messages.push_back("train_csv and test_csv need the same number of entries");
    }
  }
  if (bad.empty()) {
    try {
      c.fed.validate();
      if (c.train_csv.empty()) c.data.validate();
    } catch (const std::invalid_argument& e) {
      messages.push_back(e.what());
    }
  }
  if (!messages.empty()) {
    std::string msg = "invalid config";
    if (!bad.empty()) msg += " (offending keys: " + join(bad) + ")";
    msg += ": " + join(messages);
    throw ConfigError(msg, bad);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string(), {});
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what(), {});
  }
  return parse_run_config(doc, RunConfig{}, true);
}

json config_to_json(const RunConfig& c) {
  json doc = json::object();
  for (const auto& [key, h] : handlers()) doc[key] = h.write(c);
  return doc;
}

std::vector<ClientData> client_data_for(const RunConfig& c) {
  std::vector<ClientData> out;
  if (!c.train_csv.empty()) {
    for (std::size_t k = 0; k < c.train_csv.size(); ++k) {
      RegressionData train = read_dataset_csv(c.train_csv[k], DataRole::kTrain);
      RegressionData test = read_dataset_csv(c.test_csv[k], DataRole::kTest);
      Matrix W0(train.X.cols(), train.Y.cols());
      out.push_back({std::move(W0), std::move(train), std::move(test), std::nullopt});
    }
    return out;
  }
  for (SyntheticClient& s : make_synthetic_clients(c.data)) {
    Matrix W0(c.data.m, c.data.n);
    out.push_back({std::move(W0), std::move(s.data.train), std::move(s.data.test),
                   std::move(s.truth.W_star)});
  }
  return out;
}

std::size_t threads_from_env(std::size_t clients) {
  const char* raw = std::getenv("FEDLORA_THREADS");
  if (raw == nullptr || *raw == '\0') return clients;
  long long v = 0;
  try {
    v = csv::parse_int(raw);
  } catch (const std::exception&) {
    throw ConfigError("FEDLORA_THREADS must be a positive integer", {"FEDLORA_THREADS"});
  }
  if (v < 1) throw ConfigError("FEDLORA_THREADS must be a positive integer", {"FEDLORA_THREADS"});
  return std::min(static_cast<std::size_t>(v), clients);
}

// ---- metrics ----------------------------------------------------------------------

std::string format_metrics_row(const MetricsRecord& r) {
  std::string s;
  s += std::to_string(r.round) + ',' + std::to_string(r.step) + ',' + std::to_string(r.client_id);
  s += ',' + csv::format_real(r.train_loss);
  s += ',' + csv::format_real(r.test_loss);
  s += ',' + csv::format_real(r.fro_dist_sq);
  s += ',' + std::to_string(r.eff_rank);
  s += ',' + csv::format_real(r.hypergrad_norm);
  s += ',' + std::to_string(r.current_rank_k);
  return s;
}

void write_metrics(std::vector<MetricsRecord> records, const std::filesystem::path& path) {
  std::stable_sort(records.begin(), records.end(), [](const MetricsRecord& a, const MetricsRecord& b) {
    return std::tie(a.round, a.client_id) < std::tie(b.round, b.client_id);
  });
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << kMetricsHeader << '\n';
  for (const MetricsRecord& r : records) out << format_metrics_row(r) << '\n';
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw std::invalid_argument("metrics csv: unexpected header in " + path.string());
  }
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = csv::split(line);
    if (c.size() != 9) throw std::invalid_argument("metrics csv: expected 9 columns");
    MetricsRecord r;
    r.round = static_cast<std::size_t>(csv::parse_int(c[0]));
    r.step = static_cast<std::size_t>(csv::parse_int(c[1]));
    r.client_id = static_cast<std::size_t>(csv::parse_int(c[2]));
    r.train_loss = csv::parse_real(c[3]);
    r.test_loss = csv::parse_real(c[4]);
    r.fro_dist_sq = csv::parse_real(c[5]);
    r.eff_rank = csv::parse_int(c[6]);
    r.hypergrad_norm = csv::parse_real(c[7]);
    r.current_rank_k = csv::parse_int(c[8]);
    out.push_back(r);
  }
  return out;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : path_(path), out_(path, std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out_ << kMetricsHeader << '\n';
  out_.flush();
}

void MetricsWriter::append(const RoundLog& log) {
  std::vector<MetricsRecord> rows = log.records;
  std::sort(rows.begin(), rows.end(),
            [](const MetricsRecord& a, const MetricsRecord& b) { return a.client_id < b.client_id; });
  for (const MetricsRecord& r : rows) out_ << format_metrics_row(r) << '\n';
  out_.flush();
  if (!out_) throw std::runtime_error("write failed: " + path_.string());
}

// ---- manifest -------------------------------------------------------------------------

json RunManifest::to_json() const {
  return {{"command", command},   {"config", config},       {"version", version},
          {"seed", seed},         {"started_at", started_at}, {"finished_at", finished_at},
          {"outputs", outputs},   {"completed", completed}};
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const RunManifest& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = dir / kManifestFile;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << m.to_json().dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void finish_run(RunManifest& m, const std::filesystem::path& dir) {
  m.finished_at = utc_timestamp();
  m.completed = true;
  write_manifest(m, dir);
  std::ofstream marker(dir / kCompleteMarker, std::ios::trunc);
  marker << m.finished_at << '\n';
  if (!marker) throw std::runtime_error("cannot write completion marker in " + dir.string());
}

bool run_is_complete(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / kCompleteMarker);
}

// ---- synthetic study --------------------------------------------------------------------

RunConfig synth_defaults(Algorithm algorithm, std::uint64_t seed) {
  RunConfig c;
  c.data.seed = seed;
  FederationConfig& f = c.fed;
  f.algorithm = algorithm;
  f.seed = seed;
  f.clients = 2;
  f.total_steps = 2000;
  f.interval = 10;
  f.batch_size = 128;
  f.upper_optimizer = UpperKind::kAdamW;
  switch (algorithm) {
    case Algorithm::kPf2lora:
      f.rank = 4;
      f.client_rank = 2;
      f.upper_rate = 5e-3;
      f.lower_rate = 2e-3;
      f.init = InitScheme::kOrthogonalGaussian;
      break;
    case Algorithm::kHomlora:
    case Algorithm::kPerFedAvg:
      // Same trainable budget as r + r̃ above.
      f.rank = 6;
      f.upper_rate = 5e-3;
      f.lower_rate = algorithm == Algorithm::kPerFedAvg ? 2e-3 : 0.0;
      f.init = InitScheme::kLoraZero;
      break;
    case Algorithm::kHetlora:
      f.r_min = 1;
      f.r_max = 12;
      f.rank = 12;
      f.initial_ranks = {2, 10};
      // At 2e-3 the zero-initialized B barely moves in 2000 steps and nothing prunes.
      f.upper_rate = 2e-2;
      f.lower_rate = 0.0;
      f.lambda = 0.1;
      f.gamma = 0.3;
      f.init = InitScheme::kLoraZero;
      break;
  }
  return c;
}

double regression_loss(const Matrix& W, const RegressionData& data) {
  return (matmul(data.X, W) - data.Y).squared_norm() / static_cast<double>(data.samples());
}

SynthResult run_synth(const RunConfig& c, const RoundSink& sink) {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticSpec spec = c.data;
  spec.seed = c.fed.seed;
  const std::vector<SyntheticClient> synth = make_synthetic_clients(spec);
  RunConfig with_data = c;
  with_data.data = spec;
  with_data.train_csv.clear();
  with_data.test_csv.clear();
  FederationConfig fed = c.fed;
  fed.clients = synth.size();

  SynthResult out;
  out.logs = run_federation(fed, client_data_for(with_data), sink);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const RoundLog& last = out.logs.back();
  for (std::size_t k = 0; k < synth.size(); ++k) {
    const MetricsRecord& r = last.records[k];
    ClientSummary s;
    s.client_id = k;
    s.true_rank = synth[k].truth.true_rank;
    s.final_eff_rank = r.eff_rank;
    s.final_rank_k = r.current_rank_k;
    s.final_test_loss = r.test_loss;
    s.final_train_loss = r.train_loss;
    s.noise_floor = static_cast<double>(spec.n) * synth[k].noise_std * synth[k].noise_std;
    s.relative_fro_error = std::sqrt(std::max(r.fro_dist_sq, 0.0)) / synth[k].truth.W_star.norm();
    s.rank1_test_loss = regression_loss(rrr_best_fit(synth[k].data.train, 1).W, synth[k].data.test);
    s.rank_reached_r_min =
        fed.algorithm == Algorithm::kHetlora && r.current_rank_k == static_cast<long long>(fed.r_min);
    out.clients.push_back(s);
  }
  return out;
}

json summary_to_json(const SynthResult& r) {
  json clients = json::array();
  for (const ClientSummary& s : r.clients) {
    clients.push_back({{"client_id", s.client_id},
                       {"true_rank", s.true_rank},
                       {"final_eff_rank", s.final_eff_rank},
                       {"final_rank_k", s.final_rank_k},
                       {"final_train_loss", s.final_train_loss},
                       {"final_test_loss", s.final_test_loss},
                       {"noise_floor", s.noise_floor},
                       {"relative_fro_error", s.relative_fro_error},
                       {"rank1_test_loss", s.rank1_test_loss}});
  }
  return {{"rounds", r.logs.size()}, {"seconds", r.seconds}, {"clients", clients}};
}

// ---- theory harness -------------------------------------------------------------------------

BoundViolations check_step_bounds(const std::vector<DeterministicTraceRow>& trace, double mu,
                                   double smoothness) {
  const ConvergenceStepSizes s = convergence_step_sizes(mu, smoothness);
  const double rho = std::sqrt(1.0 - s.alpha * mu);
  const double bias_factor = smoothness * (s.alpha * smoothness + 1.0) * rho;
  auto within = [](double lhs, double rhs) { return lhs <= rhs * (1.0 + 1e-12) + 1e-14; };
  BoundViolations v;
  for (const DeterministicTraceRow& row : trace) {
    if (!within(row.lower_gap_after, rho * row.lower_gap_before)) ++v.contraction;
    if (!within(row.hypergrad_bias, bias_factor * row.lower_gap_before)) ++v.bias;
  }
  return v;
}

bool TheoryReport::decay_pass(double ratio_limit) const {
  return !instances.empty() && std::all_of(instances.begin(), instances.end(), [&](const auto& i) {
    return i.ratio <= ratio_limit;
  });
}

std::size_t TheoryReport::violations() const {
  std::size_t n = 0;
  for (const auto& i : instances) n += i.violations.total();
  return n;
}

TheoryReport run_theory(const TheoryOptions& opts) {
  if (opts.instances == 0 || opts.steps == 0) {
    throw std::invalid_argument("theory: need at least one instance and one step");
  }
  if (opts.head_steps == 0) throw std::invalid_argument("theory: head_steps must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  constexpr std::uint64_t kTheoryStream = 0x7468656f;  // "theo"
  TheoryReport report;
  for (std::size_t i = 0; i < opts.instances; ++i) {
    RngStream rng(opts.seed, derive_stream_id(kTheoryStream, i));
    const QuadraticBilevel q = make_random_quadratic(opts.dim_x, opts.dim_y, opts.spectrum, rng);
    const Matrix x0 = gaussian_matrix(opts.dim_x, 1, 0.0, 1.0, rng);
    const Matrix y0 = gaussian_matrix(opts.dim_y, 1, 0.0, 1.0, rng);

    TheoryInstanceResult r;
    r.index = i;
    r.mu = q.mu();
    r.smoothness = q.smoothness();
    const ConvergenceStepSizes s = convergence_step_sizes(r.mu, r.smoothness);
    r.alpha = s.alpha;
    r.eta = s.eta;
    r.trace = deterministic_bilevel_run(q, x0, y0, opts.steps);
    const std::size_t head = std::min(opts.head_steps, r.trace.size());
    double head_sum = 0.0;
    double full_sum = 0.0;
    for (std::size_t t = 0; t < r.trace.size(); ++t) {
      full_sum += r.trace[t].grad_phi_sq;
      if (t < head) head_sum += r.trace[t].grad_phi_sq;
    }
    r.head_mean = head_sum / static_cast<double>(head);
    r.full_mean = full_sum / static_cast<double>(r.trace.size());
    r.ratio = r.head_mean > 0.0 ? r.full_mean / r.head_mean : 0.0;
    r.violations = check_step_bounds(r.trace, r.mu, r.smoothness);
    report.instances.push_back(std::move(r));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void write_theory_trace(const TheoryReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "instance,step,grad_phi_sq,lower_gap_before,lower_gap_after,hypergrad_bias\n";
  for (const TheoryInstanceResult& r : report.instances) {
    for (const DeterministicTraceRow& row : r.trace) {
      out << r.index << ',' << row.step << ',' << csv::format_real(row.grad_phi_sq) << ','
          << csv::format_real(row.lower_gap_before) << ',' << csv::format_real(row.lower_gap_after)
          << ',' << csv::format_real(row.hypergrad_bias) << '\n';
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

json theory_summary_json(const TheoryReport& report, const TheoryOptions& opts) {
  json instances = json::array();
  for (const TheoryInstanceResult& r : report.instances) {
    instances.push_back({{"index", r.index},
                         {"mu", r.mu},
                         {"smoothness", r.smoothness},
                         {"condition_number", r.smoothness / r.mu},
                         {"alpha", r.alpha},
                         {"eta", r.eta},
                         {"head_mean_grad_phi_sq", r.head_mean},
                         {"full_mean_grad_phi_sq", r.full_mean},
                         {"ratio", r.ratio},
                         {"contraction_violations", r.violations.contraction},
                         {"bias_violations", r.violations.bias}});
  }
  return {{"instances", instances},
          {"steps", opts.steps},
          {"head_steps", opts.head_steps},
          {"ratio_limit", opts.ratio_limit},
          {"decay_pass", report.decay_pass(opts.ratio_limit)},
          {"bound_violations", report.violations()},
          {"seconds", report.seconds}};
}

}  // namespace fedlora
