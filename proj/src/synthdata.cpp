#include "fedlora/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "fedlora/csv.hpp"

namespace fedlora {
namespace {

constexpr std::uint64_t kTruthStream = 0x7472757468;  // "truth"
constexpr std::uint64_t kDataStream = 0x64617461;     // "data"

}  // namespace

GroundTruth make_ground_truth(std::size_t m, std::size_t n, std::size_t rank, RngStream& rng) {
  if (rank < 1 || rank > std::min(m, n)) {
    throw std::invalid_argument("make_ground_truth: rank must lie in [1, min(m, n)]");
  }
  GroundTruth gt;
  gt.true_rank = rank;
  gt.factor_A = gaussian_matrix(m, rank, 0.0, 1.0, rng);
  gt.factor_B = gaussian_matrix(rank, n, 0.0, 1.0, rng);
  gt.W_star = matmul(gt.factor_A, gt.factor_B);
  return gt;
}

DatasetSplit make_client_dataset(const GroundTruth& gt, std::size_t samples, double noise_std,
                                 double train_fraction, RngStream& rng) {
  if (samples < 2) throw std::invalid_argument("make_client_dataset: need at least 2 samples");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("make_client_dataset: train fraction must lie in (0, 1)");
  }
  if (!(noise_std >= 0.0)) throw std::invalid_argument("make_client_dataset: negative noise");
  const auto n_train =
      static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(samples)));
  if (n_train == 0 || n_train == samples) {
    throw std::invalid_argument("make_client_dataset: degenerate train/test split");
  }

  const Matrix X = gaussian_matrix(samples, gt.W_star.rows(), 0.0, 1.0, rng);
  Matrix Y = matmul(X, gt.W_star);
  if (noise_std > 0.0) Y += gaussian_matrix(samples, Y.cols(), 0.0, noise_std, rng);

  const std::size_t n_test = samples - n_train;
  return {{X.block(0, 0, n_train, X.cols()), Y.block(0, 0, n_train, Y.cols()), DataRole::kTrain},
          {X.block(n_train, 0, n_test, X.cols()), Y.block(n_train, 0, n_test, Y.cols()),
           DataRole::kTest}};
}

double SyntheticSpec::noise_std(std::size_t client) const {
  const double level = noise_levels.at(client);
  return noise_is_std ? level : std::sqrt(level);
}

void SyntheticSpec::validate() const {
  if (ranks.empty()) throw std::invalid_argument("synthetic spec: no clients");
  if (noise_levels.size() != ranks.size()) {
    throw std::invalid_argument("synthetic spec: one noise level per client required");
  }
  for (std::size_t r : ranks)
    if (r < 1 || r > std::min(m, n)) throw std::invalid_argument("synthetic spec: rank out of range");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("synthetic spec: train fraction must lie in (0, 1)");
  }
}

std::vector<SyntheticClient> make_synthetic_clients(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<SyntheticClient> clients;
  clients.reserve(spec.ranks.size());
  for (std::size_t k = 0; k < spec.ranks.size(); ++k) {
    RngStream truth_rng(spec.seed, derive_stream_id(kTruthStream, k));
    RngStream data_rng(spec.seed, derive_stream_id(kDataStream, k));
    SyntheticClient c;
    c.truth = make_ground_truth(spec.m, spec.n, spec.ranks[k], truth_rng);
    c.noise_std = spec.noise_std(k);
    c.data = make_client_dataset(c.truth, spec.samples, c.noise_std, spec.train_fraction, data_rng);
    clients.push_back(std::move(c));
  }
  return clients;
}

void write_dataset_csv(const std::filesystem::path& path, const RegressionData& data) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (std::size_t j = 0; j < data.X.cols(); ++j) out << (j ? "," : "") << "x_" << j;
  for (std::size_t j = 0; j < data.Y.cols(); ++j) out << ",y_" << j;
  out << '\n';
  for (std::size_t i = 0; i < data.samples(); ++i) {
    for (std::size_t j = 0; j < data.X.cols(); ++j) out << (j ? "," : "") << csv::format_real(data.X(i, j));
    for (std::size_t j = 0; j < data.Y.cols(); ++j) out << ',' << csv::format_real(data.Y(i, j));
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

RegressionData read_dataset_csv(const std::filesystem::path& path, DataRole role) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("dataset csv: missing header");
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  for (std::string_view col : csv::split(line)) {
    if (col.starts_with("x_")) {
      if (n_out != 0) throw std::invalid_argument("dataset csv: x columns must precede y columns");
      ++n_in;
    } else if (col.starts_with("y_")) {
      ++n_out;
    } else {
      throw std::invalid_argument("dataset csv: unexpected column '" + std::string(col) + "'");
    }
  }
  std::vector<double> xs;
  std::vector<double> ys;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = csv::split(line);
    if (cells.size() != n_in + n_out) throw std::invalid_argument("dataset csv: ragged row");
    for (std::size_t j = 0; j < n_in; ++j) xs.push_back(csv::parse_real(cells[j]));
    for (std::size_t j = 0; j < n_out; ++j) ys.push_back(csv::parse_real(cells[n_in + j]));
    ++rows;
  }
  return {Matrix(rows, n_in, std::move(xs)), Matrix(rows, n_out, std::move(ys)), role};
}

}  // namespace fedlora
