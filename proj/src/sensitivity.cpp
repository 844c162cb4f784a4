#include "prepadj/sensitivity.hpp"

#include <algorithm>
#include <numeric>

#include "prepadj/metrics.hpp"

namespace prepadj {

namespace {

constexpr double kCapSlack = 1e-12;

std::vector<double> q_lattice(double step) {
  if (!(step > 0 && step <= 1)) throw DataError("q step must lie in (0, 1]");
  std::vector<double> q;
  const int n = static_cast<int>(std::lround(1.0 / step));
  for (int i = 0; i <= n; ++i) q.push_back(std::min(1.0, i * step));
  if (q.back() < 1.0) q.push_back(1.0);
  return q;
}

std::vector<double> symmetric_log_lattice(double theta_cap) {
  std::vector<double> pos;
  for (int k = 2; std::log(static_cast<double>(k)) <= theta_cap + kCapSlack; ++k) {
    pos.push_back(std::log(static_cast<double>(k)));
  }
  std::vector<double> out;
  for (auto it = pos.rbegin(); it != pos.rend(); ++it) out.push_back(-*it);
  out.push_back(0.0);
  out.insert(out.end(), pos.begin(), pos.end());
  return out;
}

}  // namespace

void SensitivityParams::validate() const {
  if (!(q_ref >= 0 && q_ref <= 1 && q_alt >= 0 && q_alt <= 1)) {
    throw DataError("confounder prevalence outside [0, 1]");
  }
  if (std::abs(alpha) > theta_cap + kCapSlack || std::abs(delta) > theta_cap + kCapSlack) {
    throw DataError("sensitivity parameter exceeds the theta cap");
  }
}

nlohmann::json SensitivityParams::to_json() const {
  return {{"q_ref", q_ref}, {"q_alt", q_alt}, {"alpha", alpha}, {"delta", delta},
          {"theta_cap", theta_cap}};
}

SolvedNuisance solve_nuisance(const CohortTable& table, const Eigen::VectorXd& p_hat,
                              const Eigen::VectorXd& mu_hat, const SensitivityParams& params) {
  params.validate();
  const auto n = static_cast<Eigen::Index>(table.size());
  if (p_hat.size() != n || mu_hat.size() != n) {
    throw DataError("propensity and preparedness vectors must cover every unit");
  }
  const int ref = table.reference_code();
  SolvedNuisance s;
  s.gamma.resize(n);
  s.beta.resize(n);
  s.posterior_u.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double q = table.group.codes[static_cast<std::size_t>(i)] == ref ? params.q_ref : params.q_alt;
    try {
      s.gamma[i] = solve_gamma(p_hat[i], q, params.alpha);
      s.posterior_u[i] = posterior_u(s.gamma[i], params.alpha, q);
      s.beta[i] = solve_beta(mu_hat[i], s.posterior_u[i], params.delta);
    } catch (const DataError& e) {
      throw DataError("unit " + std::to_string(i) + ": " + e.what());
    }
  }
  return s;
}

std::vector<AugmentedRow> augment(const CohortTable& table, const Eigen::VectorXd& p_hat,
                                  const Eigen::VectorXd& mu_hat,
                                  const SensitivityParams& params) {
  const SolvedNuisance s = solve_nuisance(table, p_hat, mu_hat, params);
  const int ref = table.reference_code();
  std::vector<AugmentedRow> rows;
  rows.reserve(2 * table.size());
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    const double q = table.group.codes[i] == ref ? params.q_ref : params.q_alt;
    for (int u = 0; u <= 1; ++u) {
      AugmentedRow r;
      r.unit = i;
      r.u = u;
      r.weight = u ? q : 1.0 - q;
      r.fractional_outcome = logistic(s.gamma[k] + u * params.alpha);
      r.logit_mu_tilde = s.beta[k] + u * params.delta;
      r.mu_tilde = logistic(r.logit_mu_tilde);
      rows.push_back(r);
    }
  }
  return rows;
}

AdjustedFit reestimate(const CohortTable& table, const std::vector<AugmentedRow>& rows,
                       const ReestimateOptions& options) {
  std::size_t m = 0;
  for (const auto& r : rows) m += r.weight > 0 ? 1 : 0;
  const int ref = table.reference_code();
  std::vector<int> dummy_of(table.group.levels.size(), -1);
  LogisticProblem<double> prob;
  prob.names.push_back("(Intercept)");
  for (std::size_t g = 0; g < table.group.levels.size(); ++g) {
    if (static_cast<int>(g) == ref) continue;
    dummy_of[g] = static_cast<int>(prob.names.size());
    prob.names.push_back(group_term(table.group.levels[g]));
  }
  const auto prep_col = static_cast<Eigen::Index>(prob.names.size());
  prob.names.push_back(kPrepTerm);

  const auto n = static_cast<Eigen::Index>(m);
  prob.X = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(prob.names.size()));
  prob.y.resize(n);
  prob.weights.resize(n);
  prob.strata.resize(m);
  prob.stratum_levels = table.stratum.levels;
  prob.exclude_strata = options.exclude_strata;
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    if (!(row.weight > 0)) continue;
    prob.X(r, 0) = 1.0;
    const int d = dummy_of[static_cast<std::size_t>(table.group.codes[row.unit])];
    if (d >= 0) prob.X(r, d) = 1.0;
    prob.X(r, prep_col) = row.logit_mu_tilde;
    prob.y[r] = row.fractional_outcome;
    prob.weights[r] = row.weight;
    prob.strata[static_cast<std::size_t>(r)] = table.stratum.codes[row.unit];
    ++r;
  }
  return fit_logistic<double>(prob, options.glm, options.start);
}

// ---------------------------------------------------------------------------
// Grid

SensitivityGrid SensitivityGrid::defaults() { return for_theta(std::log(3.0), 0.1); }

SensitivityGrid SensitivityGrid::for_theta(double theta_cap, double q_step) {
  SensitivityGrid g;
  g.theta_cap = theta_cap;
  g.alpha = symmetric_log_lattice(theta_cap);
  g.delta = g.alpha;
  g.q_ref = q_lattice(q_step);
  g.q_alt = g.q_ref;
  return g;
}

std::vector<SensitivityParams> SensitivityGrid::cells() const {
  std::vector<SensitivityParams> out;
  out.reserve(size());
  for (double a : alpha)
    for (double d : delta)
      for (double qr : q_ref)
        for (double qa : q_alt) {
          SensitivityParams p{qr, qa, a, d, theta_cap};
          p.validate();
          out.push_back(p);
        }
  return out;
}

nlohmann::json SensitivityGrid::to_json() const {
  return {{"alpha", alpha}, {"delta", delta}, {"q_ref", q_ref}, {"q_alt", q_alt},
          {"theta_cap", theta_cap}};
}

SensitivityGrid SensitivityGrid::from_json(const nlohmann::json& j) {
  const double theta = j.value("theta_cap", std::log(3.0));
  SensitivityGrid g = for_theta(theta, j.value("q_step", 0.1));
  if (j.contains("alpha")) g.alpha = j.at("alpha").get<std::vector<double>>();
  if (j.contains("delta")) g.delta = j.at("delta").get<std::vector<double>>();
  if (j.contains("q_ref")) g.q_ref = j.at("q_ref").get<std::vector<double>>();
  if (j.contains("q_alt")) g.q_alt = j.at("q_alt").get<std::vector<double>>();
  if (g.size() == 0) throw DataError("sensitivity grid is empty");
  return g;
}

SensitivityResult grid_search(const CohortTable& table, const Eigen::VectorXd& p_hat,
                              const Eigen::VectorXd& mu_hat, const SensitivityGrid& grid,
                              const Eigen::VectorXd& se_boot,
                              const GridSearchOptions& options) {
  const std::vector<SensitivityParams> cells = grid.cells();
  if (cells.empty()) throw DataError("sensitivity grid is empty");
  SensitivityResult res;
  res.groups = comparison_groups(table);
  const auto n_groups = static_cast<Eigen::Index>(res.groups.size());
  if (se_boot.size() != n_groups) {
    throw DataError("bootstrap standard errors must cover every comparison group");
  }

  ReestimateOptions ro;
  ro.exclude_strata = options.exclude_strata;
  SensitivityParams zero;
  zero.theta_cap = grid.theta_cap;
  const AdjustedFit zero_fit = reestimate(table, augment(table, p_hat, mu_hat, zero), ro);
  res.zero_cell = group_coefficients(zero_fit, res.groups);
  // Every cell starts from the zero cell, so results do not depend on the
  // evaluation order.
  ro.start = &zero_fit;

  res.cells.resize(cells.size());
  parallel_for(cells.size(), options.threads, [&](std::size_t c) {
    try {
      const AdjustedFit fit = reestimate(table, augment(table, p_hat, mu_hat, cells[c]), ro);
      res.cells[c] = {cells[c], group_coefficients(fit, res.groups)};
    } catch (const Error& e) {
      throw NumericalError("sensitivity cell " + cells[c].to_json().dump() + " failed: " + e.what());
    }
  });

  res.band_min = Eigen::VectorXd::Constant(n_groups, std::numeric_limits<double>::infinity());
  res.band_max = Eigen::VectorXd::Constant(n_groups, -std::numeric_limits<double>::infinity());
  res.argmin_cell.assign(static_cast<std::size_t>(n_groups), 0);
  res.argmax_cell.assign(static_cast<std::size_t>(n_groups), 0);
  for (std::size_t c = 0; c < res.cells.size(); ++c) {
    for (Eigen::Index g = 0; g < n_groups; ++g) {
      const double v = res.cells[c].coefficients[g];
      if (v < res.band_min[g]) {
        res.band_min[g] = v;
        res.argmin_cell[static_cast<std::size_t>(g)] = c;
      }
      if (v > res.band_max[g]) {
        res.band_max[g] = v;
        res.argmax_cell[static_cast<std::size_t>(g)] = c;
      }
    }
  }
  res.band_ci_lo = res.band_min - 1.96 * se_boot;
  res.band_ci_hi = res.band_max + 1.96 * se_boot;
  return res;
}

// ---------------------------------------------------------------------------
// Propensity

PropensityResult fit_propensity(const CohortTable& table, const PropensityConfig& config) {
  std::size_t ones = 0;
  for (auto a : table.decision) ones += a;
  if (ones == 0 || ones == table.size()) {
    throw NumericalError("degenerate target: every decision is identical");
  }
  const Split split = split_holdout(table, config.train_fraction, config.seed);
  PropensityResult out;
  Eigen::VectorXd holdout_scores;

  if (config.learner == PropensityLearner::Boosted) {
    FeatureSelection sel;
    sel.include_group = true;
    sel.include_stratum = true;
    const BoostedModel model = train_booster(split.train, split.train.decision, sel, config.params);
    out.p_hat = model.predict(table);
    holdout_scores = model.predict(split.holdout);
    out.learner = "boosted";
  } else {
    DesignSpec spec;
    spec.outcome = OutcomeColumn::Decision;
    for (const auto& c : table.covariates) spec.covariates.push_back(c.name);
    spec.rows = split.train_rows;
    const AdjustedFit fit = fit_logistic(table, spec);

    // Linear predictor for every unit, with stratum effects looked up by name.
    DesignSpec all = spec;
    all.rows.clear();
    all.stratum_effects = false;
    const LogisticProblem<double> prob = build_problem(table, all);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(prob.X.cols());
    for (Eigen::Index j = 0; j < prob.X.cols(); ++j) {
      if (auto idx = fit.index_of(prob.names[static_cast<std::size_t>(j)])) beta[j] = fit.coefficients[*idx];
    }
    Eigen::VectorXd eta = prob.X * beta;
    // Strata dropped for lack of variation predict their observed extreme.
    std::vector<double> stratum_shift(table.stratum.levels.size(), 0.0);
    std::vector<int> stratum_extreme(table.stratum.levels.size(), 0);
    for (std::size_t s = 0; s < table.stratum.levels.size(); ++s) {
      const std::string& level = table.stratum.levels[s];
      if (auto idx = fit.index_of("stratum[" + level + "]")) stratum_shift[s] = fit.coefficients[*idx];
      if (std::find(fit.dropped_strata.begin(), fit.dropped_strata.end(), level) != fit.dropped_strata.end()) {
        stratum_extreme[s] = -1;
        for (std::size_t r : split.train_rows) {
          if (table.stratum.codes[r] == static_cast<int>(s) && table.decision[r] == 1) stratum_extreme[s] = 1;
        }
      }
    }
    out.p_hat.resize(static_cast<Eigen::Index>(table.size()));
    for (std::size_t i = 0; i < table.size(); ++i) {
      const auto s = static_cast<std::size_t>(table.stratum.codes[i]);
      const auto k = static_cast<Eigen::Index>(i);
      if (stratum_extreme[s] != 0) {
        out.p_hat[k] = stratum_extreme[s] > 0 ? 1.0 - kProbClip : kProbClip;
      } else {
        out.p_hat[k] = clip_probability(logistic(eta[k] + stratum_shift[s]));
      }
    }
    holdout_scores.resize(static_cast<Eigen::Index>(split.holdout_rows.size()));
    for (std::size_t i = 0; i < split.holdout_rows.size(); ++i) {
      holdout_scores[static_cast<Eigen::Index>(i)] = out.p_hat[static_cast<Eigen::Index>(split.holdout_rows[i])];
    }
    out.learner = "logistic";
  }
  out.holdout_auc = auc(holdout_scores, split.holdout.decision);
  return out;
}

// ---------------------------------------------------------------------------
// Theta calibration

ThetaCalibration calibrate_theta(const CohortTable& table, const std::string& benchmark,
                                 const std::vector<std::string>& companions) {
  const Covariate& cov = table.covariate(benchmark);
  if (cov.kind != CovariateKind::Numeric) {
    throw DataError("benchmark covariate '" + benchmark + "' must be numeric");
  }
  double sum = 0, sum_sq = 0;
  std::size_t n = 0;
  for (double v : cov.numeric) {
    if (std::isnan(v)) continue;
    sum += v;
    ++n;
  }
  if (n < 2) throw DataError("benchmark covariate has fewer than two observed values");
  const double mean = sum / static_cast<double>(n);
  for (double v : cov.numeric) {
    if (!std::isnan(v)) sum_sq += (v - mean) * (v - mean);
  }
  const double sd = std::sqrt(sum_sq / static_cast<double>(n - 1));
  if (!(sd > 0)) throw DataError("benchmark covariate '" + benchmark + "' is constant");

  ThetaCalibration out;
  out.benchmark = benchmark;
  out.threshold = mean + sd;

  auto fit_with_indicator = [&](OutcomeColumn outcome, std::vector<std::size_t> rows) {
    DesignSpec spec;
    spec.outcome = outcome;
    spec.group_dummies = false;
    spec.covariates = companions;
    spec.rows = rows;
    LogisticProblem<double> prob = build_problem(table, spec);
    if (rows.empty()) {
      rows.resize(table.size());
      std::iota(rows.begin(), rows.end(), 0);
    }
    const Eigen::Index col = prob.X.cols();
    prob.X.conservativeResize(Eigen::NoChange, col + 1);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double v = cov.numeric[rows[r]];
      prob.X(static_cast<Eigen::Index>(r), col) = (!std::isnan(v) && v > out.threshold) ? 1.0 : 0.0;
    }
    prob.names.push_back(benchmark + "_high");
    const AdjustedFit fit = fit_logistic<double>(prob);
    return fit.coef(benchmark + "_high");
  };

  out.coef_decision = fit_with_indicator(OutcomeColumn::Decision, {});
  const std::vector<std::size_t> complete = complete_rows(table);
  if (complete.empty()) throw DataError("no Complete units for the passage calibration fit");
  out.coef_passage = fit_with_indicator(OutcomeColumn::Passed, complete);

  const double strongest = std::max(std::abs(out.coef_decision), std::abs(out.coef_passage));
  out.odds_multiple = std::max(2, static_cast<int>(std::lround(std::exp(strongest))));
  out.theta = std::log(static_cast<double>(out.odds_multiple));
  return out;
}

}  // namespace prepadj
