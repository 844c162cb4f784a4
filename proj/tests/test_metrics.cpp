// Unit tests for AUC and the calibration report.
//
// Mathematical basis: AUC = P(score+ > score-) + P(tie)/2, the normalized
// Mann-Whitney U. The O(n log n) mid-rank computation must equal O(n^2)
// pair counting exactly (both are sums of halves), and is invariant under
// strictly increasing transforms of the scores.
//
// Failure modes guarded: ties counted as wins or losses; off-by-one ranks;
// single-class inputs returning NaN instead of an error; low-count cells
// not flagged.

#include <random>

#include "doctest.h"
#include "prepadj/core.hpp"
#include "prepadj/metrics.hpp"
#include "support.hpp"

using namespace prepadj;

TEST_CASE("auc: spec examples") {
  const std::vector<double> s = {0.9, 0.1};
  const std::vector<std::uint8_t> y = {1, 0};
  CHECK(auc(s, y) == 1.0);
  const std::vector<double> flat(6, 0.3);
  const std::vector<std::uint8_t> y6 = {1, 0, 1, 0, 0, 1};
  CHECK(auc(flat, y6) == 0.5);
  const std::vector<double> s7 = {0.1, 0.4, 0.35, 0.8, 0.4, 0.7, 0.2};
  const std::vector<std::uint8_t> y7 = {0, 0, 1, 1, 1, 0, 1};
  CHECK(auc(s7, y7) == testsupport::pair_count_auc(s7, y7));
}

TEST_CASE("auc equals the pair-count oracle on random tied inputs") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> level(0, 9);
  std::bernoulli_distribution coin(0.4);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 5 + static_cast<std::size_t>(rep) * 3;
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = level(rng) / 10.0;
      y[i] = coin(rng);
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(auc(s, y) == doctest::Approx(testsupport::pair_count_auc(s, y)).epsilon(1e-14));
    // Strictly increasing transform leaves the ranking unchanged.
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3 * s[i]) - 7;
    CHECK(auc(t, y) == auc(s, y));
  }
}

TEST_CASE("auc rejects single-class labels and length mismatches") {
  const std::vector<double> s = {0.1, 0.2};
  const std::vector<std::uint8_t> ones = {1, 1};
  CHECK_THROWS_AS(auc(s, ones), DataError);
  const std::vector<std::uint8_t> short_y = {1};
  CHECK_THROWS_AS(auc(s, short_y), DataError);
}

TEST_CASE("calibration_report: low-count flags and exact zero gaps") {
  // One unit per cell: every cell is flagged.
  {
    const std::vector<double> p = {0.2, 0.7};
    const std::vector<std::uint8_t> y = {0, 1};
    const std::vector<int> cells = {0, 1};
    const auto rep = calibration_report(p, y, cells, {"a", "b"});
    REQUIRE(rep.size() == 2);
    CHECK(rep[0].low_count);
    CHECK(rep[1].low_count);
    CHECK(rep[0].count == 1);
  }
  // Constant prediction equal to the overall rate, every cell at that rate.
  {
    std::vector<double> p;
    std::vector<std::uint8_t> y;
    std::vector<int> cells;
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 20; ++i) {
        p.push_back(0.25);
        y.push_back(i % 4 == 0);
        cells.push_back(c);
      }
    }
    const auto rep = calibration_report(p, y, cells, {"x", "y", "z", "empty"});
    REQUIRE(rep.size() == 3);  // empty cell omitted
    for (const auto& c : rep) {
      CHECK(c.mean_predicted - c.empirical_rate == 0.0);
      CHECK_FALSE(c.low_count);
      CHECK(c.count == 20);
    }
  }
}
