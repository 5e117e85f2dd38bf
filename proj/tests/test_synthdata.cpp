#include "doctest.h"

#include <filesystem>
#include <set>

#include "fedlora/synthdata.hpp"
#include "oracles.hpp"

using namespace fedlora;
namespace fs = std::filesystem;

TEST_CASE("client dataset splits 700/300 by index") {
  RngStream rng(1, 0);
  const GroundTruth gt = make_ground_truth(10, 10, 3, rng);
  const DatasetSplit d = make_client_dataset(gt, 1000, 0.1, 0.7, rng);
  CHECK(d.train.samples() == 700);
  CHECK(d.test.samples() == 300);
  CHECK(d.train.X.cols() == 10);
  CHECK(d.test.Y.cols() == 10);
  std::set<double> first_coords;
  for (std::size_t i = 0; i < 700; ++i) first_coords.insert(d.train.X(i, 0));
  for (std::size_t i = 0; i < 300; ++i) CHECK(first_coords.count(d.test.X(i, 0)) == 0);
  CHECK_THROWS_AS(make_client_dataset(gt, 1000, -1.0, 0.7, rng), std::invalid_argument);
}

TEST_CASE("ground truth has exactly the requested rank") {
  RngStream rng(2, 0);
  for (std::size_t r = 1; r <= 6; ++r) {
    const GroundTruth gt = make_ground_truth(10, 10, r, rng);
    CHECK(gt.true_rank == r);
    CHECK(effective_rank(gt.W_star, 0.999) == r);
    CHECK(oracle::elimination_rank(gt.W_star) == r);
    CHECK(oracle::relative_error(gt.W_star, oracle::naive_matmul(gt.factor_A, gt.factor_B)) < 1e-14);
  }
}

TEST_CASE("synthetic clients are reproducible from the seed") {
  SyntheticSpec spec;
  spec.seed = 42;
  const auto a = make_synthetic_clients(spec);
  const auto b = make_synthetic_clients(spec);
  REQUIRE(a.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(a[k].truth.W_star == b[k].truth.W_star);
    CHECK(a[k].data.train.Y == b[k].data.train.Y);
    CHECK(a[k].data.test.X == b[k].data.test.X);
  }
  CHECK(a[0].truth.true_rank == 3);
  CHECK(a[1].truth.true_rank == 4);
  CHECK(a[0].truth.W_star != a[1].truth.W_star);
  spec.seed = 43;
  CHECK(make_synthetic_clients(spec)[0].truth.W_star != a[0].truth.W_star);
}

TEST_CASE("noise levels are variances unless flagged") {
  SyntheticSpec spec;
  CHECK(spec.noise_std(0) == doctest::Approx(std::sqrt(0.1)));
  CHECK(spec.noise_std(1) == doctest::Approx(std::sqrt(0.2)));
  spec.noise_is_std = true;
  CHECK(spec.noise_std(1) == 0.2);
  spec.noise_levels = {0.1};
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("noiseless data is fit exactly at the true rank") {
  SyntheticSpec spec;
  spec.noise_levels = {0.0, 0.0};
  spec.seed = 5;
  for (const SyntheticClient& c : make_synthetic_clients(spec)) {
    const RrrFit fit = rrr_best_fit(c.data.train, c.truth.true_rank);
    CHECK(fit.error < 1e-20);
    CHECK(oracle::relative_error(fit.W, c.truth.W_star) < 1e-10);
  }
}

TEST_CASE("noisy data sits at the noise floor and the truth is recoverable") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    for (const SyntheticClient& c : make_synthetic_clients(spec)) {
      const RrrFit fit = rrr_best_fit(c.data.train, c.truth.true_rank);
      const double floor = static_cast<double>(spec.n) * c.noise_std * c.noise_std;
      const Matrix resid = matmul(c.data.test.X, fit.W) - c.data.test.Y;
      const double test_loss = resid.norm() * resid.norm() / static_cast<double>(c.data.test.samples());
      CHECK(test_loss > 0.8 * floor);
      CHECK(test_loss < 1.2 * floor);
      CHECK(frobenius_distance(fit.W, c.truth.W_star) < 0.1 * c.truth.W_star.norm());
    }
  }
}

TEST_CASE("dataset CSV round trip is exact") {
  RngStream rng(3, 0);
  const GroundTruth gt = make_ground_truth(4, 3, 2, rng);
  const DatasetSplit d = make_client_dataset(gt, 50, 0.3, 0.6, rng);
  const fs::path dir = fs::temp_directory_path() / "fedlora_synth_csv";
  fs::create_directories(dir);
  write_dataset_csv(dir / "train.csv", d.train);
  const RegressionData back = read_dataset_csv(dir / "train.csv");
  CHECK(back.X == d.train.X);
  CHECK(back.Y == d.train.Y);
  CHECK_THROWS(read_dataset_csv(dir / "missing.csv"));
  fs::remove_all(dir);
}
