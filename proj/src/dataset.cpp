#include "prepadj/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "prepadj/core.hpp"

namespace prepadj {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string row_context(std::size_t row) {
  return " (data row " + std::to_string(row + 1) + ")";
}

}  // namespace

// ---------------------------------------------------------------------------
// Factor / Covariate / CohortTable

int Factor::level_index(const std::string& level) const {
  auto it = std::find(levels.begin(), levels.end(), level);
  return it == levels.end() ? -1 : static_cast<int>(it - levels.begin());
}

const std::string& Factor::label(std::size_t row) const {
  static const std::string empty;
  const int c = codes[row];
  return c < 0 ? empty : levels[static_cast<std::size_t>(c)];
}

int Factor::add_level(const std::string& level) {
  const int idx = level_index(level);
  if (idx >= 0) return idx;
  levels.push_back(level);
  return static_cast<int>(levels.size()) - 1;
}

std::vector<std::size_t> Factor::counts() const {
  std::vector<std::size_t> out(levels.size(), 0);
  for (int c : codes) {
    if (c >= 0) ++out[static_cast<std::size_t>(c)];
  }
  return out;
}

bool Covariate::missing(std::size_t row) const {
  return kind == CovariateKind::Numeric ? std::isnan(numeric[row])
                                        : categorical.codes[row] < 0;
}

const Covariate& CohortTable::covariate(const std::string& name) const {
  const int idx = covariate_index(name);
  if (idx < 0) throw DataError("unknown covariate '" + name + "'");
  return covariates[static_cast<std::size_t>(idx)];
}

int CohortTable::covariate_index(const std::string& name) const {
  for (std::size_t i = 0; i < covariates.size(); ++i) {
    if (covariates[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

int CohortTable::reference_code() const {
  const int idx = group.level_index(reference_group);
  if (idx < 0) {
    throw DataError("reference group '" + reference_group +
                    "' is not a level of the group column");
  }
  return idx;
}

CohortTable CohortTable::take(std::span<const std::size_t> rows) const {
  CohortTable out;
  out.reference_group = reference_group;
  out.group.levels = group.levels;
  out.stratum.levels = stratum.levels;
  out.cohort.levels = cohort.levels;
  const std::size_t n = rows.size();
  out.unit_id.reserve(n);
  out.group.codes.reserve(n);
  out.stratum.codes.reserve(n);
  out.cohort.codes.reserve(n);
  out.decision.reserve(n);
  out.assessed.reserve(n);
  out.passed.reserve(n);
  for (std::size_t r : rows) {
    out.unit_id.push_back(unit_id[r]);
    out.group.codes.push_back(group.codes[r]);
    out.stratum.codes.push_back(stratum.codes[r]);
    out.cohort.codes.push_back(cohort.codes[r]);
    out.decision.push_back(decision[r]);
    out.assessed.push_back(assessed[r]);
    out.passed.push_back(passed[r]);
  }
  out.covariates.reserve(covariates.size());
  for (const auto& cov : covariates) {
    Covariate c;
    c.name = cov.name;
    c.kind = cov.kind;
    if (cov.kind == CovariateKind::Numeric) {
      c.numeric.reserve(n);
      for (std::size_t r : rows) c.numeric.push_back(cov.numeric[r]);
    } else {
      c.categorical.levels = cov.categorical.levels;
      c.categorical.codes.reserve(n);
      for (std::size_t r : rows) c.categorical.codes.push_back(cov.categorical.codes[r]);
    }
    out.covariates.push_back(std::move(c));
  }
  return out;
}

void CohortTable::validate() const {
  const std::size_t n = size();
  if (group.size() != n || stratum.size() != n || cohort.size() != n ||
      decision.size() != n || assessed.size() != n || passed.size() != n) {
    throw DataError("column lengths disagree");
  }
  for (const auto& cov : covariates) {
    if (cov.size() != n) {
      throw DataError("covariate '" + cov.name + "' has the wrong length");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (group.codes[i] < 0) throw DataError("missing group" + row_context(i));
    if (stratum.codes[i] < 0) throw DataError("missing stratum" + row_context(i));
    if (decision[i] > 1 || assessed[i] > 1 || passed[i] > 1) {
      throw DataError("flag outside {0,1}" + row_context(i));
    }
    if (passed[i] == 1 && assessed[i] == 0) {
      throw DataError("passed without assessed" + row_context(i));
    }
  }
}

// ---------------------------------------------------------------------------
// Information status

std::vector<InformationStatus> classify_information(const CohortTable& table) {
  std::vector<InformationStatus> out(table.size(), InformationStatus::Incomplete);
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table.decision[i] == 1 && table.assessed[i] == 1) {
      out[i] = InformationStatus::Complete;
    }
  }
  return out;
}

std::vector<std::size_t> complete_rows(const CohortTable& table) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table.decision[i] == 1 && table.assessed[i] == 1) rows.push_back(i);
  }
  return rows;
}

InformationCounts count_information(const CohortTable& table) {
  InformationCounts c;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const bool a = table.decision[i] == 1;
    const bool t = table.assessed[i] == 1;
    if (a && t) ++c.enrolled_assessed;
    else if (a) ++c.enrolled_unassessed;
    else if (t) ++c.unenrolled_assessed;
    else ++c.unenrolled_unassessed;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Schema and CSV

namespace {

ColumnType parse_column_type(const std::string& column, const std::string& s) {
  if (s == "numeric") return ColumnType::Numeric;
  if (s == "categorical") return ColumnType::Categorical;
  if (s == "ignore") return ColumnType::Ignore;
  throw DataError("column '" + column + "' has unknown type '" + s +
                  "' (expected numeric, categorical or ignore)");
}

const char* column_type_name(ColumnType t) {
  switch (t) {
    case ColumnType::Numeric: return "numeric";
    case ColumnType::Categorical: return "categorical";
    case ColumnType::Ignore: return "ignore";
  }
  return "ignore";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cell.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cell));
      cell.clear();
    } else if (ch != '\r') {
      cell.push_back(ch);
    }
  }
  out.push_back(std::move(cell));
  return out;
}

bool is_missing_cell(const std::string& s) { return s.empty() || s == "NA"; }

std::uint8_t parse_flag(const std::string& s, const std::string& column,
                        std::size_t row) {
  if (s == "1") return 1;
  if (s == "0") return 0;
  throw DataError("unparseable cell '" + s + "' in binary column '" + column +
                  "'" + row_context(row));
}

double parse_number(const std::string& s, const std::string& column,
                    std::size_t row) {
  if (is_missing_cell(s)) return kNaN;
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || !std::isfinite(v)) {
    throw DataError("unparseable cell '" + s + "' in numeric column '" +
                    column + "'" + row_context(row));
  }
  return v;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  out += '"';
  return out;
}

}  // namespace

Schema Schema::from_json(const nlohmann::json& j) {
  Schema s;
  s.unit_id = j.value("unit_id", s.unit_id);
  s.group = j.value("group", s.group);
  s.stratum = j.value("stratum", s.stratum);
  s.decision = j.value("decision", s.decision);
  s.assessed = j.value("assessed", s.assessed);
  s.passed = j.value("passed", s.passed);
  s.cohort = j.value("cohort", s.cohort);
  s.reference_group = j.value("reference_group", s.reference_group);
  if (j.contains("covariates")) {
    const auto& cov = j.at("covariates");
    if (cov.is_array()) {
      for (const auto& item : cov) {
        const std::string name = item.at("name").get<std::string>();
        s.covariates.emplace_back(
            name, parse_column_type(name, item.at("type").get<std::string>()));
      }
    } else {
      for (auto it = cov.begin(); it != cov.end(); ++it) {
        s.covariates.emplace_back(
            it.key(), parse_column_type(it.key(), it.value().get<std::string>()));
      }
    }
  }
  return s;
}

nlohmann::json Schema::to_json() const {
  nlohmann::json cov = nlohmann::json::array();
  for (const auto& [name, type] : covariates) {
    cov.push_back({{"name", name}, {"type", column_type_name(type)}});
  }
  return {{"unit_id", unit_id},   {"group", group},
          {"stratum", stratum},   {"decision", decision},
          {"assessed", assessed}, {"passed", passed},
          {"cohort", cohort},     {"reference_group", reference_group},
          {"covariates", cov}};
}

CohortTable load_csv(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return parse_csv(in, schema);
}

CohortTable parse_csv(std::istream& in, const Schema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV input has no header row");
  const std::vector<std::string> header = split_csv_line(line);

  std::unordered_map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (!position.emplace(header[i], i).second) {
      throw DataError("duplicate column '" + header[i] + "'");
    }
  }
  auto require = [&](const std::string& name, const char* role) {
    auto it = position.find(name);
    if (it == position.end()) {
      throw DataError(std::string("missing required column '") + name +
                      "' (" + role + ")");
    }
    return it->second;
  };
  const std::size_t c_id = require(schema.unit_id, "unit id");
  const std::size_t c_group = require(schema.group, "group");
  const std::size_t c_stratum = require(schema.stratum, "stratum");
  const std::size_t c_decision = require(schema.decision, "decision");
  const std::size_t c_assessed = require(schema.assessed, "assessed");
  const std::size_t c_passed = require(schema.passed, "passed");
  const std::size_t c_cohort = require(schema.cohort, "cohort tag");

  const std::set<std::size_t> role_columns = {c_id, c_group, c_stratum,
                                              c_decision, c_assessed, c_passed,
                                              c_cohort};
  std::unordered_map<std::string, ColumnType> typed(schema.covariates.begin(),
                                                    schema.covariates.end());

  CohortTable table;
  table.reference_group = schema.reference_group;
  std::vector<std::pair<std::size_t, std::size_t>> cov_positions;  // csv, cov
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (role_columns.count(i)) continue;
    auto it = typed.find(header[i]);
    if (it == typed.end()) {
      throw DataError("column '" + header[i] + "' has no type in the schema");
    }
    if (it->second == ColumnType::Ignore) continue;
    Covariate cov;
    cov.name = header[i];
    cov.kind = it->second == ColumnType::Numeric ? CovariateKind::Numeric
                                                 : CovariateKind::Categorical;
    cov_positions.emplace_back(i, table.covariates.size());
    table.covariates.push_back(std::move(cov));
  }
  for (const auto& [name, type] : schema.covariates) {
    if (!position.count(name)) {
      throw DataError("missing required column '" + name + "' (covariate)");
    }
  }

  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError("expected " + std::to_string(header.size()) +
                      " cells, found " + std::to_string(cells.size()) +
                      row_context(row));
    }
    table.unit_id.push_back(cells[c_id]);
    auto factor_cell = [&](Factor& f, std::size_t col) {
      const std::string& s = cells[col];
      f.codes.push_back(is_missing_cell(s) ? -1 : f.add_level(s));
    };
    factor_cell(table.group, c_group);
    factor_cell(table.stratum, c_stratum);
    factor_cell(table.cohort, c_cohort);
    table.decision.push_back(parse_flag(cells[c_decision], schema.decision, row));
    table.assessed.push_back(parse_flag(cells[c_assessed], schema.assessed, row));
    const std::string& passed = cells[c_passed];
    table.passed.push_back(
        is_missing_cell(passed) ? 0 : parse_flag(passed, schema.passed, row));
    for (const auto& [csv_col, cov_idx] : cov_positions) {
      Covariate& cov = table.covariates[cov_idx];
      if (cov.kind == CovariateKind::Numeric) {
        cov.numeric.push_back(parse_number(cells[csv_col], cov.name, row));
      } else {
        const std::string& s = cells[csv_col];
        cov.categorical.codes.push_back(
            is_missing_cell(s) ? -1 : cov.categorical.add_level(s));
      }
    }
    ++row;
  }
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table.cohort.codes[i] < 0) table.cohort.codes[i] = table.cohort.add_level(kMissingLevel);
  }
  table.validate();
  return table;
}

void write_csv(std::ostream& out, const CohortTable& table,
               const Schema& schema) {
  out << csv_escape(schema.unit_id) << ',' << csv_escape(schema.group) << ','
      << csv_escape(schema.stratum) << ',' << csv_escape(schema.cohort) << ','
      << csv_escape(schema.decision) << ',' << csv_escape(schema.assessed)
      << ',' << csv_escape(schema.passed);
  for (const auto& cov : table.covariates) out << ',' << csv_escape(cov.name);
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < table.size(); ++i) {
    out << csv_escape(table.unit_id[i]) << ','
        << csv_escape(table.group.label(i)) << ','
        << csv_escape(table.stratum.label(i)) << ','
        << csv_escape(table.cohort.label(i)) << ','
        << int(table.decision[i]) << ',' << int(table.assessed[i]) << ','
        << int(table.passed[i]);
    for (const auto& cov : table.covariates) {
      out << ',';
      if (cov.missing(i)) continue;
      if (cov.kind == CovariateKind::Numeric) {
        std::snprintf(buf, sizeof buf, "%.17g", cov.numeric[i]);
        out << buf;
      } else {
        out << csv_escape(cov.categorical.label(i));
      }
    }
    out << '\n';
  }
}

Schema schema_for(const CohortTable& table) {
  Schema s;
  s.reference_group = table.reference_group;
  for (const auto& cov : table.covariates) {
    s.covariates.emplace_back(cov.name, cov.kind == CovariateKind::Numeric
                                            ? ColumnType::Numeric
                                            : ColumnType::Categorical);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Imputation

Imputed impute_means(const CohortTable& table) {
  Imputed result;
  const std::size_t n_cohorts = table.cohort.levels.size();
  for (const auto& cov : table.covariates) {
    if (cov.kind != CovariateKind::Numeric) continue;
    std::vector<double> sum(n_cohorts, 0.0);
    std::vector<std::size_t> count(n_cohorts, 0), present(n_cohorts, 0);
    for (std::size_t i = 0; i < table.size(); ++i) {
      const auto k = static_cast<std::size_t>(table.cohort.codes[i]);
      ++present[k];
      if (!std::isnan(cov.numeric[i])) {
        sum[k] += cov.numeric[i];
        ++count[k];
      }
    }
    auto& col = result.means.means[cov.name];
    for (std::size_t k = 0; k < n_cohorts; ++k) {
      if (present[k] == 0) continue;
      if (count[k] == 0) {
        throw DataError("column '" + cov.name + "' is entirely missing in cohort '" +
                        table.cohort.levels[k] + "'");
      }
      col[table.cohort.levels[k]] = sum[k] / static_cast<double>(count[k]);
    }
  }
  result.table = apply_imputation(table, result.means);
  return result;
}

CohortTable apply_imputation(const CohortTable& table,
                             const ImputationMeans& means) {
  CohortTable out = table;
  for (auto& cov : out.covariates) {
    if (cov.kind == CovariateKind::Categorical) {
      int missing_code = -1;
      for (auto& c : cov.categorical.codes) {
        if (c >= 0) continue;
        if (missing_code < 0) missing_code = cov.categorical.add_level(kMissingLevel);
        c = missing_code;
      }
      continue;
    }
    auto col = means.means.find(cov.name);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!std::isnan(cov.numeric[i])) continue;
      if (col == means.means.end() || col->second.empty()) {
        throw DataError("no imputation mean recorded for column '" + cov.name + "'");
      }
      const std::string& tag = out.cohort.label(i);
      auto m = col->second.find(tag);
      if (m != col->second.end()) {
        cov.numeric[i] = m->second;
      } else {
        double s = 0;
        for (const auto& [k, v] : col->second) s += v;
        cov.numeric[i] = s / static_cast<double>(col->second.size());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting and filtering

Split split_holdout(const CohortTable& table, double fraction,
                    std::uint64_t seed) {
  const std::size_t n = table.size();
  if (n < 2) throw DataError("split_holdout needs at least 2 units");
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw DataError("split fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  Split s;
  s.train_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.holdout_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(s.train_rows.begin(), s.train_rows.end());
  std::sort(s.holdout_rows.begin(), s.holdout_rows.end());
  s.train = table.take(s.train_rows);
  s.holdout = table.take(s.holdout_rows);
  return s;
}

CohortTable filter_rows(
    const CohortTable& table,
    const std::function<bool(const CohortTable&, std::size_t)>& keep) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (keep(table, i)) rows.push_back(i);
  }
  return table.take(rows);
}

// ---------------------------------------------------------------------------
// Synthetic cohorts

double SyntheticTruth::effect_of(const std::string& g) const {
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] == g) return true_group_effects[i];
  }
  throw DataError("unknown synthetic group '" + g + "'");
}

nlohmann::json SyntheticTruth::to_json() const {
  nlohmann::json effects = nlohmann::json::object();
  nlohmann::json prevalence = nlohmann::json::object();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    effects[groups[i]] = true_group_effects[i];
    prevalence[groups[i]] = confounder_prevalence[i];
  }
  return {
      {"groups", groups},
      {"group_shares", group_shares},
      {"reference_group", reference_group},
      {"true_group_effects", true_group_effects},
      {"true_group_effects_by_name", effects},
      {"group_covariate_shift", group_covariate_shift},
      {"true_prep_slope", true_prep_slope},
      {"decision_intercept", decision_intercept},
      {"stratum_effect_sd", stratum_effect_sd},
      {"stratum_size_sd", stratum_size_sd},
      {"outcome_intercept", outcome_intercept},
      {"true_outcome_coefficients", true_outcome_coefficients},
      {"n_categorical", n_categorical},
      {"categorical_level_effects", categorical_level_effects},
      {"true_confounder",
       {{"prevalence", confounder_prevalence},
        {"prevalence_by_name", prevalence},
        {"alpha", alpha_true},
        {"delta", delta_true}}},
      {"assess_if_enrolled", assess_if_enrolled},
      {"assess_if_not_enrolled", assess_if_not_enrolled},
      {"missing_rate", missing_rate},
      {"seed", seed},
  };
}

SyntheticTruth SyntheticTruth::from_json(const nlohmann::json& j) {
  // The *_by_name keys are written by to_json for readability and ignored here.
  static const std::set<std::string> kKeys = {
      "groups", "group_shares", "reference_group", "true_group_effects",
      "true_group_effects_by_name", "group_covariate_shift", "true_prep_slope",
      "decision_intercept", "stratum_effect_sd", "stratum_size_sd", "outcome_intercept",
      "true_outcome_coefficients", "n_categorical", "categorical_level_effects",
      "true_confounder", "assess_if_enrolled", "assess_if_not_enrolled", "missing_rate", "seed"};
  static const std::set<std::string> kConfounderKeys = {"prevalence", "prevalence_by_name",
                                                        "alpha", "delta"};
  auto check = [](const nlohmann::json& obj, const std::set<std::string>& allowed,
                  const std::string& where) {
    if (!obj.is_object()) throw DataError("synthetic '" + where + "' must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (!allowed.count(it.key())) {
        throw DataError("unknown key '" + it.key() + "' in synthetic '" + where + "'");
      }
    }
  };
  check(j, kKeys, "truth");
  if (j.contains("true_confounder")) check(j.at("true_confounder"), kConfounderKeys, "true_confounder");
  SyntheticTruth t;
  t.groups = j.value("groups", t.groups);
  const std::size_t g = t.groups.size();
  auto per_group = [&](const char* key, std::vector<double> fallback) {
    std::vector<double> v = j.value(key, fallback);
    if (v.size() != g) {
      throw DataError(std::string("synthetic '") + key + "' needs one value per group");
    }
    return v;
  };
  t.group_shares = per_group("group_shares", g == 4 ? t.group_shares : std::vector<double>(g, 1.0 / g));
  t.reference_group = j.value("reference_group", t.groups.front());
  t.true_group_effects = per_group("true_group_effects", std::vector<double>(g, 0.0));
  t.group_covariate_shift = per_group("group_covariate_shift", std::vector<double>(g, 0.0));
  t.true_prep_slope = j.value("true_prep_slope", t.true_prep_slope);
  t.decision_intercept = j.value("decision_intercept", t.decision_intercept);
  t.stratum_effect_sd = j.value("stratum_effect_sd", t.stratum_effect_sd);
  t.stratum_size_sd = j.value("stratum_size_sd", t.stratum_size_sd);
  t.outcome_intercept = j.value("outcome_intercept", t.outcome_intercept);
  t.true_outcome_coefficients =
      j.value("true_outcome_coefficients", t.true_outcome_coefficients);
  t.n_categorical = j.value("n_categorical", t.n_categorical);
  t.categorical_level_effects =
      j.value("categorical_level_effects", t.categorical_level_effects);
  if (j.contains("true_confounder")) {
    const auto& c = j.at("true_confounder");
    t.confounder_prevalence = c.value("prevalence", std::vector<double>(g, 0.0));
    t.alpha_true = c.value("alpha", 0.0);
    t.delta_true = c.value("delta", 0.0);
  } else {
    t.confounder_prevalence = std::vector<double>(g, 0.0);
  }
  if (t.confounder_prevalence.size() != g) {
    throw DataError("synthetic confounder prevalence needs one value per group");
  }
  t.assess_if_enrolled = j.value("assess_if_enrolled", t.assess_if_enrolled);
  t.assess_if_not_enrolled = j.value("assess_if_not_enrolled", t.assess_if_not_enrolled);
  t.missing_rate = j.value("missing_rate", t.missing_rate);
  t.seed = j.value("seed", t.seed);
  return t;
}

SyntheticCohort generate_synthetic(const SyntheticTruth& config,
                                   std::size_t n_units, std::size_t n_strata,
                                   std::size_t n_covariates) {
  const std::size_t n_groups = config.groups.size();
  if (n_units < 100) throw DataError("generate_synthetic needs n_units >= 100");
  if (n_strata < 1) throw DataError("generate_synthetic needs at least one stratum");
  if (n_groups < 2) throw DataError("generate_synthetic needs at least two groups");
  for (const auto* v : {&config.group_shares, &config.true_group_effects,
                        &config.group_covariate_shift,
                        &config.confounder_prevalence}) {
    if (v->size() != n_groups) {
      throw DataError("synthetic per-group vectors must match the group count");
    }
  }
  for (double q : config.confounder_prevalence) {
    if (!(q >= 0.0 && q <= 1.0)) throw DataError("confounder prevalence outside [0,1]");
  }
  if (std::find(config.groups.begin(), config.groups.end(),
                config.reference_group) == config.groups.end()) {
    throw DataError("synthetic reference group is not one of the groups");
  }

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto bernoulli = [&](double p) -> std::uint8_t { return unif(rng) < p ? 1 : 0; };

  // Unequal stratum sizes and stratum-level decision effects.
  std::vector<double> stratum_weight(n_strata), stratum_effect(n_strata);
  for (std::size_t s = 0; s < n_strata; ++s) {
    stratum_weight[s] = std::exp(config.stratum_size_sd * normal(rng));
    stratum_effect[s] = config.stratum_effect_sd * normal(rng);
  }
  std::discrete_distribution<std::size_t> pick_stratum(stratum_weight.begin(),
                                                       stratum_weight.end());
  std::discrete_distribution<std::size_t> pick_group(config.group_shares.begin(),
                                                     config.group_shares.end());
  const std::size_t n_levels = std::max<std::size_t>(config.categorical_level_effects.size(), 1);
  std::uniform_int_distribution<std::size_t> pick_level(0, n_levels - 1);

  SyntheticCohort out;
  out.truth = config;
  CohortTable& t = out.table;
  t.reference_group = config.reference_group;
  t.group.levels = config.groups;
  for (std::size_t s = 0; s < n_strata; ++s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "S%03zu", s + 1);
    t.stratum.levels.emplace_back(buf);
  }
  t.cohort.levels = {"2011", "2012"};

  std::vector<double> weights = config.true_outcome_coefficients;
  weights.resize(n_covariates, 0.0);
  for (std::size_t j = 0; j < n_covariates; ++j) {
    Covariate c;
    c.name = "x" + std::to_string(j + 1);
    c.kind = CovariateKind::Numeric;
    c.numeric.resize(n_units);
    t.covariates.push_back(std::move(c));
  }
  for (int j = 0; j < config.n_categorical; ++j) {
    Covariate c;
    c.name = "cat" + std::to_string(j + 1);
    c.kind = CovariateKind::Categorical;
    for (std::size_t l = 0; l < n_levels; ++l) {
      c.categorical.levels.push_back(std::string(1, static_cast<char>('A' + l)));
    }
    c.categorical.codes.resize(n_units);
    t.covariates.push_back(std::move(c));
  }

  t.unit_id.resize(n_units);
  t.group.codes.resize(n_units);
  t.stratum.codes.resize(n_units);
  t.cohort.codes.resize(n_units);
  t.decision.resize(n_units);
  t.assessed.resize(n_units);
  t.passed.resize(n_units);
  out.mu.resize(n_units);
  out.mu_no_u.resize(n_units);
  out.decision_prob.resize(n_units);
  out.u.resize(n_units);

  for (std::size_t i = 0; i < n_units; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "u%07zu", i + 1);
    t.unit_id[i] = buf;
    const std::size_t g = pick_group(rng);
    const std::size_t s = pick_stratum(rng);
    t.group.codes[i] = static_cast<int>(g);
    t.stratum.codes[i] = static_cast<int>(s);
    t.cohort.codes[i] = unif(rng) < 0.5 ? 0 : 1;

    double lin = config.outcome_intercept;
    for (std::size_t j = 0; j < n_covariates; ++j) {
      const double x = config.group_covariate_shift[g] + normal(rng);
      t.covariates[j].numeric[i] = x;
      lin += weights[j] * x;
    }
    for (int j = 0; j < config.n_categorical; ++j) {
      const std::size_t level = pick_level(rng);
      t.covariates[n_covariates + static_cast<std::size_t>(j)].categorical.codes[i] =
          static_cast<int>(level);
      if (!config.categorical_level_effects.empty()) {
        lin += config.categorical_level_effects[level];
      }
    }
    const std::uint8_t u = bernoulli(config.confounder_prevalence[g]);
    out.u[i] = u;
    out.mu_no_u[i] = logistic(lin);
    out.mu[i] = logistic(lin + config.delta_true * u);

    const double decision_eta = config.decision_intercept +
                                config.true_group_effects[g] + stratum_effect[s] +
                                config.true_prep_slope * lin +
                                config.alpha_true * u;
    out.decision_prob[i] = logistic(decision_eta);
    const std::uint8_t a = bernoulli(out.decision_prob[i]);
    const std::uint8_t assessed =
        bernoulli(a ? config.assess_if_enrolled : config.assess_if_not_enrolled);
    t.decision[i] = a;
    t.assessed[i] = assessed;
    t.passed[i] = assessed ? bernoulli(out.mu[i]) : 0;
  }

  if (config.missing_rate > 0.0) {
    for (std::size_t j = 0; j < n_covariates; ++j) {
      for (std::size_t i = 0; i < n_units; ++i) {
        if (unif(rng) < config.missing_rate) {
          t.covariates[j].numeric[i] = kNaN;
        }
      }
    }
  }

  // Reject configurations that make a group's decision degenerate.
  std::vector<std::size_t> ones(n_groups, 0), totals(n_groups, 0);
  for (std::size_t i = 0; i < n_units; ++i) {
    const auto g = static_cast<std::size_t>(t.group.codes[i]);
    ++totals[g];
    ones[g] += t.decision[i];
  }
  for (std::size_t g = 0; g < n_groups; ++g) {
    if (totals[g] > 0 && (ones[g] == 0 || ones[g] == totals[g])) {
      throw DataError("degenerate synthetic config: group '" + config.groups[g] +
                      "' has all decisions equal to " +
                      std::to_string(ones[g] == 0 ? 0 : 1) + " over " +
                      std::to_string(totals[g]) + " units");
    }
  }
  t.validate();
  return out;
}

}  // namespace prepadj
