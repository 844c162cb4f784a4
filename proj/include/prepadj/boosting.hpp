#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "prepadj/dataset.hpp"

namespace prepadj {

enum class FeatureSource { Covariate, Stratum, Group };

// One learner input. Numeric features are quantile-binned; categorical
// features split one level against the rest.
struct FeatureSpec {
  std::string name;
  FeatureSource source = FeatureSource::Covariate;
  bool categorical = false;
  std::vector<double> cuts;          // numeric: x < cuts[b] <=> bin <= b
  std::vector<std::string> levels;   // categorical

  int n_bins() const {
    return categorical ? static_cast<int>(levels.size()) + 1
                       : static_cast<int>(cuts.size()) + 1;
  }
};

// Which table columns become features. The group column is never a
// preparedness feature; only the propensity learner may opt in.
struct FeatureSelection {
  std::vector<std::string> covariates;  // empty selects every covariate
  bool include_stratum = true;
  bool include_group = false;
};

struct BoostParams {
  int max_depth = 4;
  double eta = 0.1;
  double min_child_weight = 1.0;
  double gamma = 0.0;
  double max_delta_step = 0.0;
  double lambda = 1.0;
  int rounds = 300;
  int patience = 30;
  int max_bins = 256;

  nlohmann::json to_json() const;
  static BoostParams from_json(const nlohmann::json& j);
};

struct HyperGrid {
  std::vector<int> max_depth = {2, 4, 6};
  std::vector<double> eta = {0.05, 0.1, 0.3};
  std::vector<double> min_child_weight = {1, 10};
  std::vector<double> gamma = {0, 1};
  std::vector<double> max_delta_step = {0, 1};
  int folds = 5;

  std::vector<BoostParams> expand(const BoostParams& base) const;
  nlohmann::json to_json() const;
  static HyperGrid from_json(const nlohmann::json& j);
};

struct CvRow {
  BoostParams params;
  std::vector<double> fold_auc;
  std::vector<int> fold_best_rounds;
  double mean_auc = 0;
  int rounds = 0;  // rounded mean of per-fold best rounds
};

struct CvResult {
  BoostParams chosen;
  std::size_t chosen_index = 0;
  std::vector<CvRow> table;
};

struct TrainingReport {
  std::vector<CvRow> cv;
  BoostParams params;
  std::uint64_t seed = 0;
  std::size_t n_train = 0;
  double train_prevalence = 0;
  double holdout_auc = -1;  // negative when no holdout was scored
  int best_rounds = 0;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  int split_bin = 0;
  double threshold = 0;  // numeric features, informational
  int left = -1;
  int right = -1;
  double value = 0;  // leaf margin contribution (learning rate applied)
};

struct Tree {
  std::vector<TreeNode> nodes;
};

// Binned feature matrix, row-major.
struct BinnedData {
  std::size_t rows = 0;
  std::size_t features = 0;
  std::vector<std::uint16_t> bins;
  std::vector<std::uint32_t> offsets;  // start of each feature's histogram slot

  const std::uint16_t* row(std::size_t i) const { return bins.data() + i * features; }
};

// Boosted-trees probability model on the log-odds scale.
class BoostedModel {
 public:
  double base_score = 0;  // log-odds
  double learning_rate = 0.1;
  std::vector<FeatureSpec> features;
  std::vector<Tree> trees;
  TrainingReport report;

  // Encodes a table with this model's feature metadata. Unseen categorical
  // levels map to the "missing" level (or to no level) with a warning.
  BinnedData encode(const CohortTable& table,
                    std::vector<std::string>* warnings = nullptr) const;

  Eigen::VectorXd predict_margin(const BinnedData& data) const;
  // Probabilities clipped to [1e-6, 1 - 1e-6].
  Eigen::VectorXd predict(const CohortTable& table,
                          std::vector<std::string>* warnings = nullptr) const;

  nlohmann::json to_json() const;
  static BoostedModel from_json(const nlohmann::json& j);
};

using PreparednessModel = BoostedModel;

// Builds feature metadata (cuts and level lists) from training rows.
std::vector<FeatureSpec> build_features(const CohortTable& table,
                                        const FeatureSelection& selection,
                                        int max_bins);

// General learner: fits `labels` with the given features. When validation
// rows are supplied, training stops early on validation AUC and the model is
// truncated to the best round.
BoostedModel train_booster(const CohortTable& table,
                           std::span<const std::uint8_t> labels,
                           const FeatureSelection& selection,
                           const BoostParams& params,
                           const CohortTable* validation = nullptr,
                           std::span<const std::uint8_t> validation_labels = {});

// Exam-passage model on Complete units. Rejects feature selections that
// include the group column and tables containing Incomplete units.
PreparednessModel fit_boosted(const CohortTable& train,
                              const FeatureSelection& selection,
                              const BoostParams& params, std::uint64_t seed);

// Fold id per row, balanced sizes, reproducible from the seed.
std::vector<int> make_folds(std::size_t n, int folds, std::uint64_t seed);

CvResult cv_select(const CohortTable& train, std::span<const std::uint8_t> labels,
                   const FeatureSelection& selection, const HyperGrid& grid,
                   const BoostParams& base, std::uint64_t seed, int threads = 1);

// Preparedness mu-hat for every unit.
Eigen::VectorXd predict_mu(const PreparednessModel& model, const CohortTable& table,
                           std::vector<std::string>* warnings = nullptr);

}  // namespace prepadj
