#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace prepadj {

// Probability that a random positive outscores a random negative, ties
// counted one half. O(n log n) via mid-ranks.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

inline double auc(const Eigen::VectorXd& scores,
                  std::span<const std::uint8_t> labels) {
  return auc(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())),
             labels);
}

struct CalibrationCell {
  std::string cell;
  double mean_predicted = 0;
  double empirical_rate = 0;
  std::size_t count = 0;
  bool low_count = false;
};

inline constexpr std::size_t kLowCountThreshold = 10;

// Predicted vs observed rates per cell. `cells` holds a code in
// [0, labels_of_cells.size()) per unit; empty cells are omitted.
std::vector<CalibrationCell> calibration_report(
    std::span<const double> predicted, std::span<const std::uint8_t> labels,
    std::span<const int> cells, const std::vector<std::string>& cell_names);

}  // namespace prepadj
