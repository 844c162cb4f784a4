#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "prepadj/boosting.hpp"
#include "prepadj/dataset.hpp"
#include "prepadj/glm.hpp"
#include "prepadj/sensitivity.hpp"

namespace prepadj {

// Child-seed counters: every stage derives its seed as mix_seed(master, k).
enum class SeedStage : std::uint64_t {
  Synthetic = 1,
  Split = 2,
  CrossValidation = 3,
  Bootstrap = 4,
  Propensity = 5,
};

inline std::uint64_t stage_seed(std::uint64_t master, SeedStage stage) {
  return mix_seed(master, static_cast<std::uint64_t>(stage));
}

// ---------------------------------------------------------------------------
// In-memory pipeline

struct ModelOptions {
  FeatureSelection features;  // covariates empty = every covariate; strata on
  double train_fraction = 0.9;
  bool tune = true;           // cross-validate over `grid`; else use `params`
  HyperGrid grid;
  BoostParams params;
};

struct PreparednessFit {
  PreparednessModel model;
  Eigen::VectorXd mu;                   // every unit of the table
  std::vector<std::size_t> train_rows;  // table rows (Complete, 90%)
  std::vector<std::size_t> holdout_rows;
  std::optional<CvResult> cv;
  double holdout_auc = -1;              // negative when the holdout is one-class
};

// Complete units -> holdout split -> (optional) CV -> boosted fit -> mu-hat.
PreparednessFit fit_preparedness(const CohortTable& table, const ModelOptions& options,
                                 std::uint64_t seed, int threads = 1);

struct EstimateOptions {
  ModelOptions model;
  CovariateSets baselines;
  bool run_baselines = true;
  int bootstrap_replicates = 100;  // 0 skips the bootstrap
  GlmOptions glm;
  int threads = 1;
};

struct EstimateResult {
  std::vector<std::string> groups;  // comparison groups, level order
  InformationCounts counts;
  PreparednessFit prep;
  AdjustedFit adjusted;
  std::vector<std::pair<BaselineVariant, AdjustedFit>> baselines;
  std::optional<BootstrapResult> bootstrap;
};

// Runs the estimate pipeline on an already imputed table. The bootstrap
// refits the preparedness model with the hyperparameters chosen here.
EstimateResult run_estimate(const CohortTable& table, const EstimateOptions& options,
                            std::uint64_t seed);

struct CalibrationSpec {
  std::string benchmark;
  std::vector<std::string> companions;
};

struct SensitivityOptions {
  SensitivityGrid grid = SensitivityGrid::defaults();
  bool grid_explicit_effects = false;  // alpha/delta lists given explicitly
  double q_step = 0.1;
  std::optional<CalibrationSpec> calibrate;
  PropensityConfig propensity;  // seed overwritten from the master seed
  int threads = 1;
};

struct SensitivityRun {
  PropensityResult propensity;
  std::optional<ThetaCalibration> calibration;
  SensitivityGrid grid;
  SensitivityResult result;
};

SensitivityRun run_sensitivity(const CohortTable& table, const Eigen::VectorXd& mu,
                               const Eigen::VectorXd& se_boot,
                               const std::vector<std::string>& exclude_strata,
                               const SensitivityOptions& options, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Run configuration

struct SyntheticSpec {
  SyntheticTruth truth;
  bool truth_seed_given = false;
  std::size_t n_units = 50000;
  std::size_t n_strata = 40;
  std::size_t n_covariates = 4;
};

struct RunConfig {
  std::optional<std::string> input_path;
  std::optional<Schema> schema;
  std::optional<SyntheticSpec> synthetic;
  std::optional<std::uint64_t> seed;
  EstimateOptions estimate;
  bool baselines_given = false;
  SensitivityOptions sensitivity;
  std::string output_dir;
  int threads = 1;
  nlohmann::json raw;  // parsed document, overrides applied

  // Throws DataError on any structural problem.
  static RunConfig from_json(const nlohmann::json& j, const std::string& base_dir = "");
  static RunConfig load(const std::string& path);

  // FNV-1a 64 over the canonical dump of the result-relevant settings
  // (everything except output directory and thread count), hex encoded.
  std::string hash() const;
  std::uint64_t master_seed() const;
};

struct CommandFlags {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool force = false;
};

// Applies flag overrides (flags win over the config file).
void apply_flags(RunConfig& config, const CommandFlags& flags);

// Loads (or generates) the cohort described by the config, validated and
// with imputation applied.
struct LoadedCohort {
  CohortTable raw;
  Imputed imputed;
  std::optional<SyntheticCohort> synthetic;
};
LoadedCohort load_cohort(const RunConfig& config);

// Output file names, relative to the output directory.
namespace artifacts {
inline constexpr const char* kCohortCsv = "cohort.csv";
inline constexpr const char* kTruthJson = "truth.json";
inline constexpr const char* kSchemaJson = "schema.json";
inline constexpr const char* kModelJson = "model.json";
inline constexpr const char* kMuCsv = "mu.csv";
inline constexpr const char* kFitsJson = "fits.json";
inline constexpr const char* kTableCsv = "disparities_table.csv";
inline constexpr const char* kBootstrapJson = "bootstrap.json";
inline constexpr const char* kBootstrapCsv = "bootstrap_replicates.csv";
inline constexpr const char* kCvCsv = "cv_grid.csv";
inline constexpr const char* kCalibrationGroupCsv = "calibration_by_group.csv";
inline constexpr const char* kCalibrationStratumCsv = "calibration_by_stratum.csv";
inline constexpr const char* kEstimateJson = "estimate_summary.json";
inline constexpr const char* kGridCsv = "sensitivity_grid.csv";
inline constexpr const char* kBandJson = "sensitivity_band.json";
inline constexpr const char* kReportMd = "report.md";
}  // namespace artifacts

// Commands. Each returns normally on success and throws DataError (exit 2),
// MissingArtifactError (exit 3) or NumericalError (exit 4) otherwise.
void cmd_simulate(const RunConfig& config, bool force);
void cmd_estimate(const RunConfig& config, bool force);
void cmd_sensitivity(const RunConfig& config, bool force);
// Renders report.md from existing outputs and returns its text.
std::string cmd_report(const RunConfig& config, bool force);

// Maps an exception to the CLI exit code.
int exit_code_for(const std::exception& e);

// Formats an odds ratio with its log-odds standard error: "0.76 (0.06)".
std::string format_or_cell(double coefficient, double se);

std::string fnv1a_hex(const std::string& text);

}  // namespace prepadj
