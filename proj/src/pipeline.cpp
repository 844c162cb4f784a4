#include "prepadj/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "prepadj/metrics.hpp"

namespace prepadj {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormatVersion = "prepadj-1";

// Re-throws library errors with the failing stage named, keeping the type
// (and therefore the exit code).
template <typename F>
auto with_stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const MissingArtifactError& e) {
    throw MissingArtifactError(name + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(name + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(name + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(name + ": " + e.what());
  }
}

std::string num(double v, int precision = 10) {
  if (std::isnan(v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  return out + "\"";
}

struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string command;

  nlohmann::json to_json() const {
    return {{"config_hash", config_hash},
            {"seed", seed},
            {"command", command},
            {"format", kFormatVersion}};
  }
};

// Tidy CSV whose every row ends with the provenance columns.
class TableWriter {
 public:
  TableWriter(const std::vector<std::string>& header, const Provenance& p)
      : suffix_("," + csv_cell(p.config_hash) + "," + std::to_string(p.seed)) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      out_ << (i ? "," : "") << csv_cell(header[i]);
    }
    out_ << ",config_hash,seed\n";
    width_ = header.size();
  }
  void row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw Error("internal: CSV row width mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << csv_cell(cells[i]);
    out_ << suffix_ << '\n';
  }
  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
  std::string suffix_;
  std::size_t width_ = 0;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json_artifact(const fs::path& path) {
  if (!fs::exists(path)) {
    throw MissingArtifactError("missing upstream artifact '" + path.string() +
                               "'; run the estimate command first");
  }
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw MissingArtifactError("unreadable artifact '" + path.string() + "': " + e.what());
  }
}

// Creates the output directory and refuses to clobber without --force.
fs::path prepare_outputs(const RunConfig& config, const std::vector<std::string>& names,
                         bool force) {
  if (config.output_dir.empty()) {
    throw DataError("no output directory: set \"output\" in the config or pass --out");
  }
  const fs::path dir(config.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
  if (!force) {
    for (const auto& n : names) {
      if (fs::exists(dir / n)) {
        throw DataError("output '" + (dir / n).string() + "' already exists; pass --force to overwrite");
      }
    }
  }
  return dir;
}

const std::set<std::string> kTopLevelKeys = {"seed",      "input",       "synthetic",
                                             "baselines", "model",       "bootstrap",
                                             "sensitivity", "output",    "threads"};

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object()) throw DataError("config section '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw DataError("unknown key '" + it.key() + "' in config section '" + where + "'");
    }
  }
}

std::vector<std::string> string_list(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array()) throw DataError("'" + what + "' must be a list of column names");
  return j.get<std::vector<std::string>>();
}

nlohmann::json fit_json(const AdjustedFit& fit) {
  nlohmann::json coefs = nlohmann::json::array();
  for (std::size_t i = 0; i < fit.names.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    coefs.push_back({{"term", fit.names[i]},
                     {"coefficient", fit.coefficients[k]},
                     {"se", fit.se[k]},
                     {"odds_ratio", std::exp(fit.coefficients[k])}});
  }
  return {{"coefficients", coefs},
          {"deviance", fit.deviance},
          {"gradient_norm", fit.gradient_norm},
          {"iterations", fit.iterations},
          {"converged", fit.converged},
          {"ridge", fit.ridge},
          {"separation_fallback", fit.separation_fallback},
          {"n_rows", fit.n_rows},
          {"dropped_strata", fit.dropped_strata},
          {"dropped_columns", fit.dropped_columns}};
}

const char* status_name(InformationStatus s) {
  return s == InformationStatus::Complete ? "complete" : "incomplete";
}

std::vector<std::string> default_traditional_ii(const CohortTable& table) {
  std::vector<std::string> out;
  const std::size_t k = (table.covariates.size() + 1) / 2;
  for (std::size_t i = 0; i < k; ++i) out.push_back(table.covariates[i].name);
  return out;
}

std::string estimate_hash(const RunConfig& config) {
  nlohmann::json j = config.raw;
  j.erase("output");
  j.erase("threads");
  j.erase("sensitivity");
  return fnv1a_hex(j.dump());
}

}  // namespace

// ---------------------------------------------------------------------------
// Helpers

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string format_or_cell(double coefficient, double se) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f (%.2f)", std::exp(coefficient), se);
  return buf;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const MissingArtifactError*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const Error*>(&e)) return 2;
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return 2;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 2;
  return 1;
}

// ---------------------------------------------------------------------------
// In-memory pipeline

PreparednessFit fit_preparedness(const CohortTable& table, const ModelOptions& options,
                                 std::uint64_t seed, int threads) {
  PreparednessFit out;
  const std::vector<std::size_t> complete = complete_rows(table);
  if (complete.size() < 2) throw DataError("fewer than two Complete units to train on");
  const CohortTable comp = table.take(complete);
  const Split split = split_holdout(comp, options.train_fraction, stage_seed(seed, SeedStage::Split));
  for (std::size_t r : split.train_rows) out.train_rows.push_back(complete[r]);
  for (std::size_t r : split.holdout_rows) out.holdout_rows.push_back(complete[r]);

  std::size_t positives = 0;
  for (auto r : split.train.passed) positives += r;
  if (positives == 0 || positives == split.train.size()) {
    throw NumericalError("degenerate target: every training passage outcome is identical");
  }

  BoostParams params = options.params;
  if (options.tune) {
    out.cv = cv_select(split.train, split.train.passed, options.features, options.grid, params,
                       stage_seed(seed, SeedStage::CrossValidation), threads);
    params = out.cv->chosen;
  }
  out.model = fit_boosted(split.train, options.features, params, seed);
  if (out.cv) out.model.report.cv = out.cv->table;

  std::vector<std::string> warnings;
  out.mu = predict_mu(out.model, table, &warnings);
  for (const auto& w : warnings) warn(w);

  std::size_t hold_pos = 0;
  for (auto r : split.holdout.passed) hold_pos += r;
  if (hold_pos > 0 && hold_pos < split.holdout.size()) {
    std::vector<double> scores;
    for (std::size_t r : out.holdout_rows) scores.push_back(out.mu[static_cast<Eigen::Index>(r)]);
    out.holdout_auc = auc(scores, split.holdout.passed);
  }
  out.model.report.holdout_auc = out.holdout_auc;
  return out;
}

EstimateResult run_estimate(const CohortTable& table, const EstimateOptions& options,
                            std::uint64_t seed) {
  EstimateResult res;
  res.groups = comparison_groups(table);
  if (table.reference_code() < 0) {
    throw DataError("reference group '" + table.reference_group + "' does not occur in the data");
  }
  if (res.groups.empty()) throw DataError("no comparison groups besides the reference");
  res.counts = count_information(table);

  res.prep = with_stage("preparedness model", [&] {
    return fit_preparedness(table, options.model, seed, options.threads);
  });
  res.adjusted = with_stage("adjusted regression", [&] {
    return fit_adjusted(table, res.prep.mu, options.glm);
  });
  if (options.run_baselines) {
    for (auto v : {BaselineVariant::Raw, BaselineVariant::TraditionalI,
                   BaselineVariant::TraditionalII}) {
      res.baselines.emplace_back(v, with_stage(std::string("baseline ") + baseline_name(v), [&] {
                                   return fit_baseline(table, v, options.baselines, options.glm);
                                 }));
    }
  }

  if (options.bootstrap_replicates > 0) {
    ModelOptions fixed = options.model;
    fixed.tune = false;
    fixed.params = res.prep.model.report.params;
    const std::vector<std::string> groups = res.groups;
    const GlmOptions glm = options.glm;
    const ReplicatePipeline pipeline = [fixed, groups, glm](const CohortTable& sample,
                                                            std::uint64_t s) {
      const PreparednessFit pf = fit_preparedness(sample, fixed, s, 1);
      return group_coefficients(fit_adjusted(sample, pf.mu, glm), groups);
    };
    res.bootstrap = with_stage("bootstrap", [&] {
      return bootstrap_ci(table, pipeline, group_coefficients(res.adjusted, res.groups),
                          res.groups, options.bootstrap_replicates,
                          stage_seed(seed, SeedStage::Bootstrap), options.threads);
    });
  }
  return res;
}

SensitivityRun run_sensitivity(const CohortTable& table, const Eigen::VectorXd& mu,
                               const Eigen::VectorXd& se_boot,
                               const std::vector<std::string>& exclude_strata,
                               const SensitivityOptions& options, std::uint64_t seed) {
  SensitivityRun run;
  PropensityConfig pc = options.propensity;
  pc.seed = stage_seed(seed, SeedStage::Propensity);
  run.propensity = with_stage("propensity model", [&] { return fit_propensity(table, pc); });

  run.grid = options.grid;
  if (options.calibrate) {
    run.calibration = with_stage("theta calibration", [&] {
      return calibrate_theta(table, options.calibrate->benchmark, options.calibrate->companions);
    });
    if (options.grid_explicit_effects) {
      run.grid.theta_cap = run.calibration->theta;
    } else {
      SensitivityGrid g = SensitivityGrid::for_theta(run.calibration->theta, options.q_step);
      g.q_ref = options.grid.q_ref;
      g.q_alt = options.grid.q_alt;
      run.grid = g;
    }
  }
  GridSearchOptions go;
  go.exclude_strata = exclude_strata;
  go.threads = options.threads;
  run.result = with_stage("grid search", [&] {
    return grid_search(table, run.propensity.p_hat, mu, run.grid, se_boot, go);
  });
  return run;
}

// ---------------------------------------------------------------------------
// Configuration

RunConfig RunConfig::from_json(const nlohmann::json& j, const std::string& base_dir) {
  try {
    check_keys(j, kTopLevelKeys, "top level");
    RunConfig c;
    c.raw = j;

    if (j.contains("seed")) {
      const auto& seed = j.at("seed");
      if (!seed.is_number_integer() || (!seed.is_number_unsigned() && seed.get<std::int64_t>() < 0)) {
        throw DataError("'seed' must be a nonnegative integer");
      }
      c.seed = seed.get<std::uint64_t>();
    }
    const bool has_input = j.contains("input");
    const bool has_synth = j.contains("synthetic");
    if (has_input == has_synth) {
      throw DataError("config needs exactly one of 'input' (CSV path + schema) or 'synthetic'");
    }
    if (has_input) {
      const auto& in = j.at("input");
      check_keys(in, {"path", "schema", "schema_path"}, "input");
      if (!in.contains("path")) throw DataError("'input' needs a 'path'");
      fs::path p = in.at("path").get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
      c.input_path = p.string();
      if (in.contains("schema")) {
        c.schema = Schema::from_json(in.at("schema"));
      } else if (in.contains("schema_path")) {
        fs::path sp = in.at("schema_path").get<std::string>();
        if (sp.is_relative() && !base_dir.empty()) sp = fs::path(base_dir) / sp;
        std::ifstream sin(sp);
        if (!sin) throw DataError("cannot open schema file '" + sp.string() + "'");
        c.schema = Schema::from_json(nlohmann::json::parse(sin));
      } else {
        throw DataError("'input' needs a schema mapping ('schema' or 'schema_path')");
      }
    } else {
      const auto& s = j.at("synthetic");
      check_keys(s, {"n_units", "n_strata", "n_covariates", "truth"}, "synthetic");
      SyntheticSpec spec;
      spec.n_units = s.value("n_units", spec.n_units);
      spec.n_strata = s.value("n_strata", spec.n_strata);
      spec.n_covariates = s.value("n_covariates", spec.n_covariates);
      const nlohmann::json truth = s.value("truth", nlohmann::json::object());
      spec.truth = SyntheticTruth::from_json(truth);
      spec.truth_seed_given = truth.contains("seed");
      if (spec.n_units < 100) throw DataError("synthetic 'n_units' must be at least 100");
      if (spec.n_strata < 1) throw DataError("synthetic 'n_strata' must be at least 1");
      c.synthetic = spec;
    }

    if (j.contains("baselines")) {
      const auto& b = j.at("baselines");
      check_keys(b, {"traditional_i", "traditional_ii"}, "baselines");
      if (!b.contains("traditional_i") || !b.contains("traditional_ii")) {
        throw DataError("'baselines' needs both 'traditional_i' and 'traditional_ii'");
      }
      c.estimate.baselines.traditional_i = string_list(b.at("traditional_i"), "traditional_i");
      c.estimate.baselines.traditional_ii = string_list(b.at("traditional_ii"), "traditional_ii");
      if (c.estimate.baselines.traditional_i.empty()) {
        throw DataError("Traditional I baseline needs a nonempty covariate set");
      }
      if (c.estimate.baselines.traditional_ii.empty()) {
        throw DataError("Traditional II baseline needs a nonempty covariate set");
      }
      c.baselines_given = true;
    }

    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m, {"features", "train_fraction", "tune", "grid", "params"}, "model");
      ModelOptions& mo = c.estimate.model;
      if (m.contains("features")) mo.features.covariates = string_list(m.at("features"), "features");
      mo.train_fraction = m.value("train_fraction", mo.train_fraction);
      mo.tune = m.value("tune", mo.tune);
      if (m.contains("grid")) mo.grid = HyperGrid::from_json(m.at("grid"));
      if (m.contains("params")) mo.params = BoostParams::from_json(m.at("params"));
      if (!(mo.train_fraction > 0 && mo.train_fraction < 1)) {
        throw DataError("'model.train_fraction' must lie in (0, 1)");
      }
    }

    if (j.contains("bootstrap")) {
      const auto& b = j.at("bootstrap");
      check_keys(b, {"replicates"}, "bootstrap");
      c.estimate.bootstrap_replicates = b.value("replicates", 100);
    }
    if (c.estimate.bootstrap_replicates < 2) {
      throw DataError("'bootstrap.replicates' must be at least 2");
    }

    if (j.contains("sensitivity")) {
      const auto& s = j.at("sensitivity");
      check_keys(s, {"grid", "calibrate", "propensity"}, "sensitivity");
      SensitivityOptions& so = c.sensitivity;
      if (s.contains("grid")) {
        const auto& g = s.at("grid");
        check_keys(g, {"alpha", "delta", "q_ref", "q_alt", "q_step", "theta_cap"}, "sensitivity.grid");
        so.grid = SensitivityGrid::from_json(g);
        so.grid_explicit_effects = g.contains("alpha") || g.contains("delta");
        so.q_step = g.value("q_step", 0.1);
        so.grid.cells();  // validates the cap
      }
      if (s.contains("calibrate")) {
        const auto& cal = s.at("calibrate");
        check_keys(cal, {"benchmark", "companions"}, "sensitivity.calibrate");
        CalibrationSpec spec;
        spec.benchmark = cal.at("benchmark").get<std::string>();
        if (cal.contains("companions")) spec.companions = string_list(cal.at("companions"), "companions");
        so.calibrate = spec;
      }
      if (s.contains("propensity")) {
        const auto& p = s.at("propensity");
        check_keys(p, {"learner", "params", "train_fraction"}, "sensitivity.propensity");
        const std::string learner = p.value("learner", std::string("boosted"));
        if (learner == "boosted") so.propensity.learner = PropensityLearner::Boosted;
        else if (learner == "logistic") so.propensity.learner = PropensityLearner::Logistic;
        else throw DataError("unknown propensity learner '" + learner + "' (boosted | logistic)");
        if (p.contains("params")) so.propensity.params = BoostParams::from_json(p.at("params"));
        so.propensity.train_fraction = p.value("train_fraction", 0.9);
      }
    }

    c.output_dir = j.value("output", std::string());
    if (!c.output_dir.empty() && fs::path(c.output_dir).is_relative() && !base_dir.empty()) {
      c.output_dir = (fs::path(base_dir) / c.output_dir).string();
    }
    c.threads = j.value("threads", 1);
    if (c.threads < 1) throw DataError("'threads' must be at least 1");
    c.estimate.threads = c.threads;
    c.sensitivity.threads = c.threads;
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid config: ") + e.what());
  }
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j, fs::path(path).parent_path().string());
}

std::string RunConfig::hash() const {
  nlohmann::json j = raw;
  j.erase("output");
  j.erase("threads");
  return fnv1a_hex(j.dump());
}

std::uint64_t RunConfig::master_seed() const {
  if (!seed) throw DataError("no seed: set \"seed\" in the config or pass --seed");
  return *seed;
}

void apply_flags(RunConfig& config, const CommandFlags& flags) {
  if (flags.out) {
    config.output_dir = *flags.out;
    config.raw["output"] = *flags.out;
  }
  if (flags.seed) {
    config.seed = *flags.seed;
    config.raw["seed"] = *flags.seed;
  }
  if (flags.threads) {
    if (*flags.threads < 1) throw DataError("--threads must be at least 1");
    config.threads = *flags.threads;
    config.estimate.threads = *flags.threads;
    config.sensitivity.threads = *flags.threads;
    config.raw["threads"] = *flags.threads;
  }
}

LoadedCohort load_cohort(const RunConfig& config) {
  return with_stage("load", [&] {
    LoadedCohort out;
    if (config.synthetic) {
      SyntheticTruth truth = config.synthetic->truth;
      if (!config.synthetic->truth_seed_given) {
        truth.seed = stage_seed(config.master_seed(), SeedStage::Synthetic);
      }
      out.synthetic = generate_synthetic(truth, config.synthetic->n_units,
                                         config.synthetic->n_strata,
                                         config.synthetic->n_covariates);
      out.raw = out.synthetic->table;
    } else {
      out.raw = load_csv(*config.input_path, *config.schema);
    }
    if (out.raw.reference_code() < 0) {
      throw DataError("reference group '" + out.raw.reference_group +
                      "' does not occur in the group column");
    }
    out.imputed = impute_means(out.raw);
    return out;
  });
}

// ---------------------------------------------------------------------------
// Commands

void cmd_simulate(const RunConfig& config, bool force) {
  if (!config.synthetic) throw DataError("simulate needs a 'synthetic' section in the config");
  const fs::path dir = prepare_outputs(
      config, {artifacts::kCohortCsv, artifacts::kTruthJson, artifacts::kSchemaJson}, force);
  const LoadedCohort cohort = load_cohort(config);
  const Provenance prov{config.hash(), config.master_seed(), "simulate"};

  Schema schema = schema_for(cohort.raw);
  std::ostringstream body;
  write_csv(body, cohort.raw, schema);
  std::istringstream lines(body.str());
  std::ostringstream csv;
  std::string line;
  bool header = true;
  const std::string suffix = "," + prov.config_hash + "," + std::to_string(prov.seed);
  while (std::getline(lines, line)) {
    csv << line << (header ? std::string(",config_hash,seed") : suffix) << '\n';
    header = false;
  }
  schema.covariates.emplace_back("config_hash", ColumnType::Ignore);
  schema.covariates.emplace_back("seed", ColumnType::Ignore);

  nlohmann::json truth = cohort.synthetic->truth.to_json();
  truth["n_units"] = config.synthetic->n_units;
  truth["n_strata"] = config.synthetic->n_strata;
  truth["n_covariates"] = config.synthetic->n_covariates;
  truth["provenance"] = prov.to_json();

  nlohmann::json schema_doc = schema.to_json();
  schema_doc["provenance"] = prov.to_json();

  write_text(dir / artifacts::kCohortCsv, csv.str());
  write_json(dir / artifacts::kTruthJson, truth);
  write_json(dir / artifacts::kSchemaJson, schema_doc);
}

void cmd_estimate(const RunConfig& config, bool force) {
  const fs::path dir = prepare_outputs(
      config,
      {artifacts::kModelJson, artifacts::kMuCsv, artifacts::kFitsJson, artifacts::kTableCsv,
       artifacts::kBootstrapJson, artifacts::kBootstrapCsv, artifacts::kCvCsv,
       artifacts::kCalibrationGroupCsv, artifacts::kCalibrationStratumCsv,
       artifacts::kEstimateJson},
      force);
  const std::uint64_t seed = config.master_seed();
  const LoadedCohort cohort = load_cohort(config);
  const CohortTable& table = cohort.imputed.table;
  const Provenance prov{config.hash(), seed, "estimate"};

  EstimateOptions opts = config.estimate;
  if (!config.baselines_given) {
    std::vector<std::string> all;
    for (const auto& c : table.covariates) all.push_back(c.name);
    opts.baselines.traditional_i = all;
    opts.baselines.traditional_ii = default_traditional_ii(table);
  }
  const EstimateResult est = run_estimate(table, opts, seed);
  const auto& groups = est.groups;

  // Model.
  nlohmann::json model = est.prep.model.to_json();
  model["provenance"] = prov.to_json();
  write_json(dir / artifacts::kModelJson, model);

  // Per-unit preparedness.
  {
    const auto status = classify_information(table);
    std::vector<std::string> split(table.size(), "none");
    for (auto r : est.prep.train_rows) split[r] = "train";
    for (auto r : est.prep.holdout_rows) split[r] = "holdout";
    TableWriter w({"unit_id", "group", "stratum", "status", "split", "mu_hat"}, prov);
    for (std::size_t i = 0; i < table.size(); ++i) {
      w.row({table.unit_id[i], table.group.label(i), table.stratum.label(i),
             status_name(status[i]), split[i], num(est.prep.mu[static_cast<Eigen::Index>(i)], 17)});
    }
    write_text(dir / artifacts::kMuCsv, w.str());
  }

  // Fits.
  {
    nlohmann::json baselines = nlohmann::json::object();
    for (const auto& [v, fit] : est.baselines) baselines[baseline_name(v)] = fit_json(fit);
    nlohmann::json fits = {{"groups", groups},
                           {"reference_group", table.reference_group},
                           {"adjusted", fit_json(est.adjusted)},
                           {"baselines", baselines},
                           {"covariate_sets",
                            {{"traditional_i", opts.baselines.traditional_i},
                             {"traditional_ii", opts.baselines.traditional_ii}}},
                           {"provenance", prov.to_json()}};
    write_json(dir / artifacts::kFitsJson, fits);
  }

  // Four-column odds-ratio table (coefficient rows x model columns).
  {
    std::vector<const AdjustedFit*> cols;
    std::vector<std::string> header = {"term"};
    for (const auto& [v, fit] : est.baselines) {
      cols.push_back(&fit);
      header.push_back(baseline_name(v));
    }
    cols.push_back(&est.adjusted);
    header.push_back("Preparedness-adjusted");
    TableWriter w(header, prov);
    auto add_row = [&](const std::string& label, const std::string& term) {
      std::vector<std::string> cells = {label};
      for (const AdjustedFit* f : cols) {
        const auto idx = f->index_of(term);
        cells.push_back(idx ? format_or_cell(f->coefficients[*idx], f->se[*idx]) : "");
      }
      w.row(cells);
    };
    for (const auto& g : groups) add_row(g, group_term(g));
    add_row("Preparedness logit(mu)", kPrepTerm);
    std::vector<std::string> n_row = {"Observations"};
    for (const AdjustedFit* f : cols) n_row.push_back(std::to_string(f->n_rows));
    w.row(n_row);
    write_text(dir / artifacts::kTableCsv, w.str());
  }

  // Bootstrap.
  {
    const BootstrapResult& b = *est.bootstrap;
    nlohmann::json per_group = nlohmann::json::object();
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto k = static_cast<Eigen::Index>(g);
      per_group[groups[g]] = {{"point", b.point[k]},
                              {"se_boot", b.se_boot[k]},
                              {"ci95", {b.ci95[g].first, b.ci95[g].second}},
                              {"odds_ratio", std::exp(b.point[k])},
                              {"odds_ratio_ci95", {std::exp(b.ci95[g].first), std::exp(b.ci95[g].second)}}};
    }
    write_json(dir / artifacts::kBootstrapJson,
               {{"groups", groups},
                {"estimates", per_group},
                {"replicates", b.replicates},
                {"master_seed", b.master_seed},
                {"redraws", b.redraws},
                {"model_params", est.prep.model.report.params.to_json()},
                {"provenance", prov.to_json()}});
    TableWriter w({"replicate", "group", "estimate"}, prov);
    for (Eigen::Index r = 0; r < b.replicate_estimates.rows(); ++r) {
      for (std::size_t g = 0; g < groups.size(); ++g) {
        w.row({std::to_string(r), groups[g],
               num(b.replicate_estimates(r, static_cast<Eigen::Index>(g)), 17)});
      }
    }
    write_text(dir / artifacts::kBootstrapCsv, w.str());
  }

  // Cross-validation grid.
  {
    TableWriter w({"max_depth", "eta", "min_child_weight", "gamma", "max_delta_step", "mean_auc",
                   "rounds", "chosen"},
                  prov);
    if (est.prep.cv) {
      for (std::size_t i = 0; i < est.prep.cv->table.size(); ++i) {
        const CvRow& r = est.prep.cv->table[i];
        w.row({std::to_string(r.params.max_depth), num(r.params.eta), num(r.params.min_child_weight),
               num(r.params.gamma), num(r.params.max_delta_step), num(r.mean_auc),
               std::to_string(r.rounds), i == est.prep.cv->chosen_index ? "1" : "0"});
      }
    }
    write_text(dir / artifacts::kCvCsv, w.str());
  }

  // Calibration by group and by stratum on train / holdout Complete units.
  for (const bool by_group : {true, false}) {
    TableWriter w({"sample", "cell", "mean_predicted", "empirical_rate", "count", "low_count"}, prov);
    for (const auto& [name, rows] : {std::pair{"train", &est.prep.train_rows},
                                     std::pair{"holdout", &est.prep.holdout_rows}}) {
      std::vector<double> pred;
      std::vector<std::uint8_t> labels;
      std::vector<int> cells;
      for (std::size_t r : *rows) {
        pred.push_back(est.prep.mu[static_cast<Eigen::Index>(r)]);
        labels.push_back(table.passed[r]);
        cells.push_back(by_group ? table.group.codes[r] : table.stratum.codes[r]);
      }
      const auto report = calibration_report(pred, labels, cells,
                                             by_group ? table.group.levels : table.stratum.levels);
      for (const auto& c : report) {
        w.row({name, c.cell, num(c.mean_predicted), num(c.empirical_rate), std::to_string(c.count),
               c.low_count ? "1" : "0"});
      }
    }
    write_text(dir / (by_group ? artifacts::kCalibrationGroupCsv : artifacts::kCalibrationStratumCsv),
               w.str());
  }

  // Summary.
  {
    const InformationCounts& ic = est.counts;
    nlohmann::json means = nlohmann::json::object();
    for (const auto& [col, per] : cohort.imputed.means.means) {
      for (const auto& [cohort_label, m] : per) means[col][cohort_label] = m;
    }
    nlohmann::json summary = {
        {"n_units", table.size()},
        {"groups", groups},
        {"reference_group", table.reference_group},
        {"information_counts",
         {{"enrolled_assessed", ic.enrolled_assessed},
          {"enrolled_unassessed", ic.enrolled_unassessed},
          {"unenrolled_assessed", ic.unenrolled_assessed},
          {"unenrolled_unassessed", ic.unenrolled_unassessed},
          {"complete", ic.enrolled_assessed},
          {"incomplete", ic.total() - ic.enrolled_assessed}}},
        {"imputation_means", means},
        {"preparedness_model",
         {{"n_train", est.prep.train_rows.size()},
          {"n_holdout", est.prep.holdout_rows.size()},
          {"holdout_auc", est.prep.holdout_auc},
          {"params", est.prep.model.report.params.to_json()},
          {"tuned", est.prep.cv.has_value()}}},
        {"dropped_strata", est.adjusted.dropped_strata},
        {"estimate_hash", estimate_hash(config)},
        {"provenance", prov.to_json()}};
    write_json(dir / artifacts::kEstimateJson, summary);
  }
}

void cmd_sensitivity(const RunConfig& config, bool force) {
  const std::uint64_t seed = config.master_seed();
  const fs::path dir(config.output_dir.empty() ? "." : config.output_dir);
  if (config.output_dir.empty()) {
    throw DataError("no output directory: set \"output\" in the config or pass --out");
  }
  // Upstream artifacts first: a missing estimate run is exit 3.
  const nlohmann::json summary = read_json_artifact(dir / artifacts::kEstimateJson);
  const nlohmann::json boot = read_json_artifact(dir / artifacts::kBootstrapJson);
  if (!fs::exists(dir / artifacts::kMuCsv)) {
    throw MissingArtifactError("missing upstream artifact '" + (dir / artifacts::kMuCsv).string() +
                               "'; run the estimate command first");
  }
  if (summary.value("estimate_hash", std::string()) != estimate_hash(config)) {
    throw MissingArtifactError(
        "estimate outputs in '" + dir.string() +
        "' were produced by a different configuration; rerun the estimate command");
  }
  prepare_outputs(config, {artifacts::kGridCsv, artifacts::kBandJson}, force);

  const LoadedCohort cohort = load_cohort(config);
  const CohortTable& table = cohort.imputed.table;
  const Provenance prov{config.hash(), seed, "sensitivity"};
  const std::vector<std::string> groups = comparison_groups(table);

  // mu-hat in table order, checked against unit ids.
  Eigen::VectorXd mu(static_cast<Eigen::Index>(table.size()));
  {
    std::istringstream in(read_text(dir / artifacts::kMuCsv));
    std::string line;
    std::getline(in, line);
    std::size_t i = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cells.push_back(cell);
      if (cells.size() < 6 || i >= table.size() || cells[0] != table.unit_id[i]) {
        throw MissingArtifactError("mu.csv does not match the cohort; rerun the estimate command");
      }
      mu[static_cast<Eigen::Index>(i)] = std::stod(cells[5]);
      ++i;
    }
    if (i != table.size()) {
      throw MissingArtifactError("mu.csv does not cover every unit; rerun the estimate command");
    }
  }
  Eigen::VectorXd se(static_cast<Eigen::Index>(groups.size())), point(se.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& e = boot.at("estimates").at(groups[g]);
    se[static_cast<Eigen::Index>(g)] = e.at("se_boot").get<double>();
    point[static_cast<Eigen::Index>(g)] = e.at("point").get<double>();
  }
  const auto exclude = summary.at("dropped_strata").get<std::vector<std::string>>();

  const SensitivityRun run = run_sensitivity(table, mu, se, exclude, config.sensitivity, seed);
  const SensitivityResult& res = run.result;

  TableWriter w({"cell", "q_ref", "q_alt", "alpha", "delta", "group", "coefficient", "odds_ratio"},
                prov);
  for (std::size_t c = 0; c < res.cells.size(); ++c) {
    const SensitivityParams& p = res.cells[c].params;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const double v = res.cells[c].coefficients[static_cast<Eigen::Index>(g)];
      w.row({std::to_string(c), num(p.q_ref), num(p.q_alt), num(p.alpha), num(p.delta), groups[g],
             num(v, 17), num(std::exp(v))});
    }
  }

  nlohmann::json per_group = nlohmann::json::object();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto k = static_cast<Eigen::Index>(g);
    const double gap = res.zero_cell[k] - point[k];
    per_group[groups[g]] = {
        {"point", point[k]},
        {"se_boot", se[k]},
        {"band", {res.band_min[k], res.band_max[k]}},
        {"band_ci95", {res.band_ci_lo[k], res.band_ci_hi[k]}},
        {"band_odds_ratio", {std::exp(res.band_min[k]), std::exp(res.band_max[k])}},
        {"band_ci95_odds_ratio", {std::exp(res.band_ci_lo[k]), std::exp(res.band_ci_hi[k])}},
        {"argmin", res.cells[res.argmin_cell[g]].params.to_json()},
        {"argmax", res.cells[res.argmax_cell[g]].params.to_json()},
        {"zero_cell",
         {{"coefficient", res.zero_cell[k]},
          {"discrepancy", gap},
          {"discrepancy_in_se", se[k] > 0 ? gap / se[k] : 0.0},
          {"within_2_se", std::abs(gap) <= 2.0 * se[k]}}}};
  }
  char auc_text[64];
  std::snprintf(auc_text, sizeof auc_text, "out-of-sample AUC %.2f", run.propensity.holdout_auc);
  nlohmann::json band = {{"groups", groups},
                         {"estimates", per_group},
                         {"grid", run.grid.to_json()},
                         {"n_cells", res.cells.size()},
                         {"propensity",
                          {{"learner", run.propensity.learner},
                           {"holdout_auc", run.propensity.holdout_auc},
                           {"report", auc_text}}},
                         {"excluded_strata", exclude},
                         {"provenance", prov.to_json()}};
  if (run.calibration) {
    const ThetaCalibration& c = *run.calibration;
    band["calibration"] = {{"benchmark", c.benchmark},
                           {"threshold", c.threshold},
                           {"coef_decision", c.coef_decision},
                           {"coef_passage", c.coef_passage},
                           {"odds_multiple", c.odds_multiple},
                           {"theta", c.theta}};
  }
  write_text(dir / artifacts::kGridCsv, w.str());
  write_json(dir / artifacts::kBandJson, band);
}

std::string cmd_report(const RunConfig& config, bool force) {
  if (config.output_dir.empty()) {
    throw DataError("no output directory: set \"output\" in the config or pass --out");
  }
  const fs::path dir(config.output_dir);
  const nlohmann::json summary = read_json_artifact(dir / artifacts::kEstimateJson);
  const nlohmann::json fits = read_json_artifact(dir / artifacts::kFitsJson);
  const nlohmann::json boot = read_json_artifact(dir / artifacts::kBootstrapJson);
  prepare_outputs(config, {artifacts::kReportMd}, force);

  std::ostringstream md;
  const auto& prov = summary.at("provenance");
  md << "# Preparedness-adjusted disparities\n\n"
     << "Config hash `" << prov.at("config_hash").get<std::string>() << "`, seed "
     << prov.at("seed").get<std::uint64_t>() << ". Reference group: "
     << summary.at("reference_group").get<std::string>() << ".\n\n";

  const auto& ic = summary.at("information_counts");
  md << "## Information status\n\n"
     << "| | Assessed | Not assessed |\n|---|---|---|\n"
     << "| Enrolled | " << ic.at("enrolled_assessed") << " | " << ic.at("enrolled_unassessed") << " |\n"
     << "| Not enrolled | " << ic.at("unenrolled_assessed") << " | "
     << ic.at("unenrolled_unassessed") << " |\n\n"
     << "Complete: " << ic.at("complete") << ", incomplete: " << ic.at("incomplete") << ".\n\n";

  // Odds-ratio table.
  std::vector<std::pair<std::string, nlohmann::json>> cols;
  for (auto it = fits.at("baselines").begin(); it != fits.at("baselines").end(); ++it) {
    cols.emplace_back(it.key(), it.value());
  }
  const std::vector<std::string> order = {"Raw disparities", "Traditional I", "Traditional II"};
  std::sort(cols.begin(), cols.end(), [&](const auto& a, const auto& b) {
    return std::find(order.begin(), order.end(), a.first) <
           std::find(order.begin(), order.end(), b.first);
  });
  cols.emplace_back("Preparedness-adjusted", fits.at("adjusted"));
  auto cell = [](const nlohmann::json& fit, const std::string& term) {
    for (const auto& c : fit.at("coefficients")) {
      if (c.at("term").get<std::string>() == term) {
        return format_or_cell(c.at("coefficient").get<double>(), c.at("se").get<double>());
      }
    }
    return std::string();
  };
  md << "## Odds ratios (log-odds standard errors)\n\n| Term |";
  for (const auto& c : cols) md << ' ' << c.first << " |";
  md << "\n|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) md << "---|";
  md << '\n';
  const auto groups = summary.at("groups").get<std::vector<std::string>>();
  for (const auto& g : groups) {
    md << "| " << g << " |";
    for (const auto& c : cols) md << ' ' << cell(c.second, group_term(g)) << " |";
    md << '\n';
  }
  md << "| Preparedness logit(mu) |";
  for (const auto& c : cols) md << ' ' << cell(c.second, kPrepTerm) << " |";
  md << "\n\n";

  md << "## Bootstrap 95% intervals (preparedness-adjusted, odds-ratio scale)\n\n"
     << boot.at("replicates") << " replicates.\n\n| Group | OR | 95% CI |\n|---|---|---|\n";
  for (const auto& g : groups) {
    const auto& e = boot.at("estimates").at(g);
    char buf[128];
    std::snprintf(buf, sizeof buf, "| %s | %.2f | [%.2f, %.2f] |\n", g.c_str(),
                  e.at("odds_ratio").get<double>(), e.at("odds_ratio_ci95")[0].get<double>(),
                  e.at("odds_ratio_ci95")[1].get<double>());
    md << buf;
  }
  const auto& pm = summary.at("preparedness_model");
  char auc_buf[64];
  std::snprintf(auc_buf, sizeof auc_buf, "%.2f", pm.at("holdout_auc").get<double>());
  md << "\n## Preparedness model\n\nOut-of-sample AUC " << auc_buf << " on " << pm.at("n_holdout")
     << " held-out Complete units (trained on " << pm.at("n_train") << ").\n";

  const fs::path band_path = dir / artifacts::kBandJson;
  if (fs::exists(band_path)) {
    const nlohmann::json band = read_json_artifact(band_path);
    md << "\n## Sensitivity bands\n\n" << band.at("n_cells") << " grid cells, theta cap "
       << num(band.at("grid").at("theta_cap").get<double>(), 6) << "; propensity "
       << band.at("propensity").at("report").get<std::string>() << ".\n\n"
       << "| Group | Band (OR) | Band 95% CI (OR) | Zero-cell gap (SE) |\n|---|---|---|---|\n";
    for (const auto& g : groups) {
      const auto& e = band.at("estimates").at(g);
      char buf[192];
      std::snprintf(buf, sizeof buf, "| %s | [%.2f, %.2f] | [%.2f, %.2f] | %.2f |\n", g.c_str(),
                    e.at("band_odds_ratio")[0].get<double>(), e.at("band_odds_ratio")[1].get<double>(),
                    e.at("band_ci95_odds_ratio")[0].get<double>(),
                    e.at("band_ci95_odds_ratio")[1].get<double>(),
                    e.at("zero_cell").at("discrepancy_in_se").get<double>());
      md << buf;
    }
  }
  const std::string text = md.str();
  write_text(dir / artifacts::kReportMd, text);
  return text;
}

}  // namespace prepadj
