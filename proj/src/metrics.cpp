#include "prepadj/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "prepadj/core.hpp"

namespace prepadj {

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DataError("auc: scores and labels differ in length");
  }
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (auto l : labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw DataError("auc: labels contain a single class");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of mid-ranks of positives (Mann-Whitney U).
  double rank_sum = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) rank_sum += mid_rank;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

std::vector<CalibrationCell> calibration_report(
    std::span<const double> predicted, std::span<const std::uint8_t> labels,
    std::span<const int> cells, const std::vector<std::string>& cell_names) {
  if (predicted.size() != labels.size() || predicted.size() != cells.size()) {
    throw DataError("calibration_report: input lengths differ");
  }
  const std::size_t k = cell_names.size();
  std::vector<double> pred_sum(k, 0.0), label_sum(k, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (cells[i] < 0) continue;
    const auto c = static_cast<std::size_t>(cells[i]);
    pred_sum[c] += predicted[i];
    label_sum[c] += labels[i];
    ++count[c];
  }
  std::vector<CalibrationCell> out;
  for (std::size_t c = 0; c < k; ++c) {
    if (count[c] == 0) continue;
    const double n = static_cast<double>(count[c]);
    out.push_back({cell_names[c], pred_sum[c] / n, label_sum[c] / n, count[c],
                   count[c] < kLowCountThreshold});
  }
  return out;
}

}  // namespace prepadj
