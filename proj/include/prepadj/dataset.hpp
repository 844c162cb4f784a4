#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace prepadj {

// Categorical column with a frozen level ordering. Code -1 marks a missing
// cell; after imputation missing cells carry the explicit "missing" level.
struct Factor {
  std::vector<std::string> levels;
  std::vector<int> codes;

  std::size_t size() const { return codes.size(); }
  int level_index(const std::string& level) const;  // -1 when absent
  const std::string& label(std::size_t row) const;
  int add_level(const std::string& level);           // returns index
  std::vector<std::size_t> counts() const;
};

inline constexpr const char* kMissingLevel = "missing";

enum class CovariateKind { Numeric, Categorical };

struct Covariate {
  std::string name;
  CovariateKind kind = CovariateKind::Numeric;
  std::vector<double> numeric;  // NaN marks a missing cell
  Factor categorical;

  std::size_t size() const {
    return kind == CovariateKind::Numeric ? numeric.size() : categorical.size();
  }
  bool missing(std::size_t row) const;
};

// Columnar table of unit records. Treated as immutable once validated;
// every transformation returns a new table.
struct CohortTable {
  std::vector<std::string> unit_id;
  Factor group;
  Factor stratum;
  Factor cohort;
  std::vector<std::uint8_t> decision;
  std::vector<std::uint8_t> assessed;
  std::vector<std::uint8_t> passed;
  std::vector<Covariate> covariates;
  std::string reference_group = "White";

  std::size_t size() const { return unit_id.size(); }
  const Covariate& covariate(const std::string& name) const;
  int covariate_index(const std::string& name) const;  // -1 when absent
  int reference_code() const;

  // Rows in the given order (duplicates allowed, for resampling). Level
  // lists are carried over unchanged.
  CohortTable take(std::span<const std::size_t> rows) const;

  // Throws DataError naming the first violating row.
  void validate() const;
};

enum class InformationStatus { Complete, Incomplete };

std::vector<InformationStatus> classify_information(const CohortTable& table);
std::vector<std::size_t> complete_rows(const CohortTable& table);

// Counts of the four (decision, assessed) combinations.
struct InformationCounts {
  std::size_t enrolled_assessed = 0;      // a=1, t=1 (Complete)
  std::size_t enrolled_unassessed = 0;    // a=1, t=0
  std::size_t unenrolled_assessed = 0;    // a=0, t=1
  std::size_t unenrolled_unassessed = 0;  // a=0, t=0
  std::size_t total() const {
    return enrolled_assessed + enrolled_unassessed + unenrolled_assessed +
           unenrolled_unassessed;
  }
};
InformationCounts count_information(const CohortTable& table);

// Column-role mapping for CSV ingestion.
enum class ColumnType { Numeric, Categorical, Ignore };

struct Schema {
  std::string unit_id = "unit_id";
  std::string group = "group";
  std::string stratum = "stratum";
  std::string decision = "decision";
  std::string assessed = "assessed";
  std::string passed = "passed";
  std::string cohort = "cohort";
  std::string reference_group = "White";
  // Every non-role column must be typed here.
  std::vector<std::pair<std::string, ColumnType>> covariates;

  static Schema from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

CohortTable load_csv(const std::string& path, const Schema& schema);
CohortTable parse_csv(std::istream& in, const Schema& schema);
void write_csv(std::ostream& out, const CohortTable& table,
               const Schema& schema);
Schema schema_for(const CohortTable& table);

// Per-column, per-cohort means used to fill numeric gaps.
struct ImputationMeans {
  // column name -> cohort label -> mean
  std::map<std::string, std::map<std::string, double>> means;
};

struct Imputed {
  CohortTable table;
  ImputationMeans means;
};

Imputed impute_means(const CohortTable& table);
// Reuses recorded means (e.g. on held-out data). Cohorts without a recorded
// mean fall back to the pooled mean over recorded cohorts.
CohortTable apply_imputation(const CohortTable& table,
                             const ImputationMeans& means);

struct Split {
  CohortTable train;
  CohortTable holdout;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> holdout_rows;
};

Split split_holdout(const CohortTable& table, double fraction,
                    std::uint64_t seed);

CohortTable filter_rows(const CohortTable& table,
                        const std::function<bool(const CohortTable&,
                                                 std::size_t)>& keep);

// Ground truth of a generated cohort plus the knobs that shape it.
struct SyntheticTruth {
  std::vector<std::string> groups = {"White", "Black", "Hispanic", "Asian"};
  std::vector<double> group_shares = {0.5, 0.2, 0.2, 0.1};
  std::string reference_group = "White";
  // Log-odds offset of each group in the decision process (reference 0).
  std::vector<double> true_group_effects = {0.0, 0.0, 0.0, 0.0};
  // Mean shift of every numeric covariate by group (preparedness gap).
  std::vector<double> group_covariate_shift = {0.0, 0.0, 0.0, 0.0};
  double true_prep_slope = 1.0;
  double decision_intercept = -0.5;
  double stratum_effect_sd = 0.4;
  double stratum_size_sd = 0.7;

  // Success process: logit(mu) = outcome_intercept + x . weights + u * delta.
  double outcome_intercept = 0.0;
  std::vector<double> true_outcome_coefficients = {0.9, 0.6, 0.4, 0.2};
  // Per-level log-odds contributions for each categorical covariate.
  int n_categorical = 1;
  std::vector<double> categorical_level_effects = {-0.3, 0.0, 0.3};

  // Binary unmeasured confounder.
  std::vector<double> confounder_prevalence = {0.0, 0.0, 0.0, 0.0};
  double alpha_true = 0.0;
  double delta_true = 0.0;

  double assess_if_enrolled = 0.8;
  double assess_if_not_enrolled = 0.01;
  double missing_rate = 0.0;

  std::uint64_t seed = 1;

  double effect_of(const std::string& group) const;
  nlohmann::json to_json() const;
  static SyntheticTruth from_json(const nlohmann::json& j);
};

// A generated cohort with the per-unit latent quantities the generator drew.
struct SyntheticCohort {
  CohortTable table;
  SyntheticTruth truth;
  std::vector<double> mu;            // true success probability incl. u
  std::vector<double> mu_no_u;       // success probability with u = 0
  std::vector<double> decision_prob; // Pr(a = 1 | c, s, x, u)
  std::vector<std::uint8_t> u;
};

SyntheticCohort generate_synthetic(const SyntheticTruth& config,
                                   std::size_t n_units, std::size_t n_strata,
                                   std::size_t n_covariates);

}  // namespace prepadj
