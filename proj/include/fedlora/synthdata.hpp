#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "fedlora/models.hpp"
#include "fedlora/numerics.hpp"

namespace fedlora {

struct GroundTruth {
  Matrix W_star;    // m×n
  std::size_t true_rank = 0;
  Matrix factor_A;  // m×true_rank
  Matrix factor_B;  // true_rank×n
};

GroundTruth make_ground_truth(std::size_t m, std::size_t n, std::size_t rank, RngStream& rng);

struct DatasetSplit {
  RegressionData train;
  RegressionData test;
};

/// X ~ N(0,1), Y = X·W* + noise, split by index at ⌊train_fraction·samples⌋.
DatasetSplit make_client_dataset(const GroundTruth& gt, std::size_t samples, double noise_std,
                                 double train_fraction, RngStream& rng);

struct SyntheticSpec {
  std::size_t m = 10;
  std::size_t n = 10;
  std::vector<std::size_t> ranks{3, 4};
  std::size_t samples = 1000;
  /// Per-client noise level. Read as a variance unless noise_is_std is set.
  std::vector<double> noise_levels{0.1, 0.2};
  bool noise_is_std = false;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;

  double noise_std(std::size_t client) const;
  void validate() const;
};

struct SyntheticClient {
  GroundTruth truth;
  DatasetSplit data;
  double noise_std = 0.0;
};

std::vector<SyntheticClient> make_synthetic_clients(const SyntheticSpec& spec);

/// Header x_0..x_{n_in−1}, y_0..y_{n_out−1}; one sample per row.
void write_dataset_csv(const std::filesystem::path& path, const RegressionData& data);
RegressionData read_dataset_csv(const std::filesystem::path& path, DataRole role = DataRole::kTrain);

}  // namespace fedlora
