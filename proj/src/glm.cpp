#include "prepadj/glm.hpp"

#include <numeric>
#include <random>

namespace prepadj {

std::string group_term(const std::string& level) { return "group[" + level + "]"; }

std::vector<std::string> comparison_groups(const CohortTable& table) {
  const int ref = table.reference_code();
  std::vector<std::string> out;
  for (std::size_t g = 0; g < table.group.levels.size(); ++g) {
    if (static_cast<int>(g) != ref) out.push_back(table.group.levels[g]);
  }
  return out;
}

LogisticProblem<double> build_problem(const CohortTable& table, const DesignSpec& spec) {
  std::vector<std::size_t> rows = spec.rows;
  if (rows.empty()) {
    rows.resize(table.size());
    std::iota(rows.begin(), rows.end(), 0);
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  if (spec.prep && spec.prep->size() != static_cast<Eigen::Index>(table.size())) {
    throw DataError("mu-hat must cover every unit of the table");
  }
  if (spec.weights && spec.weights->size() != static_cast<Eigen::Index>(table.size())) {
    throw DataError("weights must cover every unit of the table");
  }

  // Column plan.
  struct Column {
    std::string name;
    std::function<double(std::size_t)> value;
  };
  std::vector<Column> cols;
  cols.push_back({"(Intercept)", [](std::size_t) { return 1.0; }});
  if (spec.group_dummies) {
    const int ref = table.reference_code();
    for (std::size_t g = 0; g < table.group.levels.size(); ++g) {
      if (static_cast<int>(g) == ref) continue;
      const int code = static_cast<int>(g);
      cols.push_back({group_term(table.group.levels[g]),
                      [&table, code](std::size_t i) { return table.group.codes[i] == code ? 1.0 : 0.0; }});
    }
  }
  for (const auto& name : spec.covariates) {
    const Covariate& cov = table.covariate(name);
    if (cov.kind == CovariateKind::Numeric) {
      cols.push_back({name, [&cov](std::size_t i) {
                        const double v = cov.numeric[i];
                        if (std::isnan(v)) throw DataError("covariate '" + cov.name + "' has missing cells; impute first");
                        return v;
                      }});
    } else {
      for (std::size_t l = 1; l < cov.categorical.levels.size(); ++l) {
        const int code = static_cast<int>(l);
        cols.push_back({name + "[" + cov.categorical.levels[l] + "]", [&cov, code](std::size_t i) {
                          if (cov.categorical.codes[i] < 0) throw DataError("covariate '" + cov.name + "' has missing cells; impute first");
                          return cov.categorical.codes[i] == code ? 1.0 : 0.0;
                        }});
      }
    }
  }
  if (spec.prep) {
    const Eigen::VectorXd& mu = *spec.prep;
    cols.push_back({kPrepTerm, [&mu](std::size_t i) {
                      return logit(clip_probability(mu[static_cast<Eigen::Index>(i)]));
                    }});
  }

  LogisticProblem<double> prob;
  prob.X.resize(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    prob.names.push_back(cols[j].name);
    for (Eigen::Index r = 0; r < n; ++r) {
      prob.X(r, static_cast<Eigen::Index>(j)) = cols[j].value(rows[static_cast<std::size_t>(r)]);
    }
  }
  prob.y.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const std::size_t i = rows[static_cast<std::size_t>(r)];
    prob.y[r] = spec.outcome == OutcomeColumn::Decision ? table.decision[i] : table.passed[i];
  }
  if (spec.weights) {
    prob.weights.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      prob.weights[r] = (*spec.weights)[static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)])];
    }
  }
  if (spec.stratum_effects) {
    prob.stratum_levels = table.stratum.levels;
    prob.strata.resize(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) prob.strata[r] = table.stratum.codes[rows[r]];
    prob.exclude_strata = spec.exclude_strata;
  }
  return prob;
}

AdjustedFit fit_logistic(const CohortTable& table, const DesignSpec& spec,
                         const GlmOptions& opt) {
  return fit_logistic<double>(build_problem(table, spec), opt);
}

AdjustedFit fit_adjusted(const CohortTable& table, const Eigen::VectorXd& mu,
                         const GlmOptions& opt) {
  DesignSpec spec;
  spec.outcome = OutcomeColumn::Decision;
  spec.prep = mu;
  return fit_logistic(table, spec, opt);
}

const char* baseline_name(BaselineVariant v) {
  switch (v) {
    case BaselineVariant::Raw: return "Raw disparities";
    case BaselineVariant::TraditionalI: return "Traditional I";
    case BaselineVariant::TraditionalII: return "Traditional II";
  }
  return "";
}

AdjustedFit fit_baseline(const CohortTable& table, BaselineVariant variant,
                         const CovariateSets& sets, const GlmOptions& opt) {
  DesignSpec spec;
  spec.outcome = OutcomeColumn::Decision;
  switch (variant) {
    case BaselineVariant::Raw:
      break;
    case BaselineVariant::TraditionalI:
      if (sets.traditional_i.empty()) {
        throw DataError("Traditional I baseline needs a nonempty covariate set");
      }
      spec.covariates = sets.traditional_i;
      break;
    case BaselineVariant::TraditionalII:
      if (sets.traditional_ii.empty()) {
        throw DataError("Traditional II baseline needs a nonempty covariate set");
      }
      spec.covariates = sets.traditional_ii;
      break;
  }
  return fit_logistic(table, spec, opt);
}

Eigen::VectorXd group_coefficients(const AdjustedFit& fit,
                                   const std::vector<std::string>& groups) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(groups.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    out[static_cast<Eigen::Index>(g)] = fit.coef(group_term(groups[g]));
  }
  return out;
}

Eigen::VectorXd group_standard_errors(const AdjustedFit& fit,
                                      const std::vector<std::string>& groups) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(groups.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    out[static_cast<Eigen::Index>(g)] = fit.se_of(group_term(groups[g]));
  }
  return out;
}

std::uint64_t replicate_seed(std::uint64_t master_seed, int replicate, int attempt) {
  return mix_seed(mix_seed(master_seed, static_cast<std::uint64_t>(replicate)),
                  static_cast<std::uint64_t>(attempt));
}

BootstrapResult bootstrap_ci(const CohortTable& table, const ReplicatePipeline& pipeline,
                             const Eigen::VectorXd& point,
                             const std::vector<std::string>& groups, int replicates,
                             std::uint64_t master_seed, int threads) {
  if (replicates < 2) throw DataError("bootstrap needs at least 2 replicates");
  if (point.size() != static_cast<Eigen::Index>(groups.size())) {
    throw DataError("bootstrap point estimate does not match the group list");
  }
  const std::size_t n = table.size();
  if (n == 0) throw DataError("bootstrap on an empty table");

  std::vector<int> group_codes;
  for (const auto& g : groups) group_codes.push_back(table.group.level_index(g));
  group_codes.push_back(table.reference_code());

  BootstrapResult res;
  res.groups = groups;
  res.point = point;
  res.replicates = replicates;
  res.master_seed = master_seed;
  res.replicate_estimates.resize(replicates, static_cast<Eigen::Index>(groups.size()));
  std::vector<int> attempts_used(static_cast<std::size_t>(replicates), 0);

  parallel_for(static_cast<std::size_t>(replicates), threads, [&](std::size_t r) {
    for (int attempt = 0; attempt < kMaxBootstrapAttempts; ++attempt) {
      const std::uint64_t seed = replicate_seed(master_seed, static_cast<int>(r), attempt);
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      std::vector<std::size_t> rows(n);
      std::vector<bool> present(table.group.levels.size(), false);
      for (auto& row : rows) {
        row = pick(rng);
        present[static_cast<std::size_t>(table.group.codes[row])] = true;
      }
      bool complete = true;
      for (int code : group_codes) {
        if (code < 0 || !present[static_cast<std::size_t>(code)]) complete = false;
      }
      if (!complete) continue;
      const CohortTable sample = table.take(rows);
      const Eigen::VectorXd est = pipeline(sample, seed);
      if (est.size() != static_cast<Eigen::Index>(groups.size())) {
        throw DataError("bootstrap pipeline returned the wrong number of estimates");
      }
      res.replicate_estimates.row(static_cast<Eigen::Index>(r)) = est.transpose();
      attempts_used[r] = attempt + 1;
      return;
    }
    throw NumericalError("bootstrap replicate " + std::to_string(r) +
                         ": a group vanished in every redraw");
  });

  for (int a : attempts_used) res.redraws += a - 1;
  const Eigen::RowVectorXd mean = res.replicate_estimates.colwise().mean();
  const Eigen::MatrixXd centered = res.replicate_estimates.rowwise() - mean;
  res.se_boot = (centered.array().square().colwise().sum() / double(replicates - 1)).sqrt().transpose();
  for (Eigen::Index g = 0; g < point.size(); ++g) {
    res.ci95.emplace_back(point[g] - 1.96 * res.se_boot[g], point[g] + 1.96 * res.se_boot[g]);
  }
  return res;
}

}  // namespace prepadj
