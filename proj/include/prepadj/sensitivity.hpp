#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "prepadj/boosting.hpp"
#include "prepadj/core.hpp"
#include "prepadj/dataset.hpp"
#include "prepadj/glm.hpp"

namespace prepadj {

// Two-component logistic mixture (1 - q) * logistic(x) + q * logistic(x + shift).
template <typename Scalar>
Scalar mixture(Scalar x, Scalar q, Scalar shift) {
  return (Scalar(1) - q) * logistic(x) + q * logistic(x + shift);
}

namespace detail {

template <typename Scalar>
Scalar bisect_mixture(Scalar target, Scalar q, Scalar shift) {
  using std::max;
  using std::min;
  // The root lies between logit(target) - max(shift, 0) and
  // logit(target) - min(shift, 0); widen slightly for rounding.
  const Scalar base = logit(target);
  Scalar lo = base - max(shift, Scalar(0)) - Scalar(1);
  Scalar hi = base - min(shift, Scalar(0)) + Scalar(1);
  for (int i = 0; i < 200 && hi - lo > Scalar(0); ++i) {
    const Scalar mid = Scalar(0.5) * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (mixture(mid, q, shift) < target) lo = mid;
    else hi = mid;
  }
  return Scalar(0.5) * (lo + hi);
}

}  // namespace detail

// Unique x with mixture(x, q, shift) = target. With e = exp(x) and
// A = exp(shift) this is the quadratic
//   A (target - 1) e^2 + [target (1 + A) - (1 - q) - q A] e + target = 0,
// whose leading and constant terms have opposite signs, so exactly one root
// is positive. Degenerate cases (q in {0, 1}, shift = 0) are exact.
template <typename Scalar>
Scalar solve_mixture(Scalar target, Scalar q, Scalar shift) {
  using std::exp;
  using std::log;
  using std::sqrt;
  using std::abs;
  if (!(target > Scalar(0) && target < Scalar(1))) {
    throw DataError("mixture target must lie strictly inside (0, 1)");
  }
  if (!(q >= Scalar(0) && q <= Scalar(1))) {
    throw DataError("mixture weight must lie in [0, 1]");
  }
  if (q == Scalar(0) || shift == Scalar(0)) return logit(target);
  if (q == Scalar(1)) return logit(target) - shift;

  const Scalar A = exp(shift);
  const Scalar a2 = A * (Scalar(1) - target);  // negated leading coefficient
  const Scalar b = (Scalar(1) - q) + q * A - target * (Scalar(1) + A);
  const Scalar disc = b * b + Scalar(4) * a2 * target;
  if (!(disc > Scalar(1e-12))) return detail::bisect_mixture(target, q, shift);
  const Scalar root = sqrt(disc);
  // Cancellation-free form of the positive root of a2 e^2 + b e - target.
  const Scalar e = b >= Scalar(0) ? Scalar(2) * target / (b + root)
                                  : (-b + root) / (Scalar(2) * a2);
  Scalar x = log(e);
  // One Newton polish on the monotone mixture.
  const Scalar s0 = logistic(x), s1 = logistic(x + shift);
  const Scalar slope = (Scalar(1) - q) * s0 * (Scalar(1) - s0) + q * s1 * (Scalar(1) - s1);
  if (slope > Scalar(0)) {
    const Scalar step = (mixture(x, q, shift) - target) / slope;
    if (abs(step) < Scalar(1)) x -= step;
  }
  return x;
}

// gamma with (1 - q) logistic(gamma) + q logistic(gamma + alpha) = p_hat.
template <typename Scalar>
Scalar solve_gamma(Scalar p_hat, Scalar q, Scalar alpha) {
  return solve_mixture(p_hat, q, alpha);
}

// Pr(u = 1 | a = 1, c, x) by Bayes' rule.
template <typename Scalar>
Scalar posterior_u(Scalar gamma, Scalar alpha, Scalar q) {
  if (q <= Scalar(0)) return Scalar(0);
  if (q >= Scalar(1)) return Scalar(1);
  if (alpha == Scalar(0)) return q;
  const Scalar on = logistic(gamma + alpha) * q;
  const Scalar off = logistic(gamma) * (Scalar(1) - q);
  return on / (off + on);
}

// beta with (1 - w) logistic(beta) + w logistic(beta + delta) = mu_hat.
template <typename Scalar>
Scalar solve_beta(Scalar mu_hat, Scalar w, Scalar delta) {
  return solve_mixture(mu_hat, w, delta);
}

struct SensitivityParams {
  double q_ref = 0;
  double q_alt = 0;
  double alpha = 0;
  double delta = 0;
  double theta_cap = 1.0986122886681098;  // log 3

  void validate() const;
  nlohmann::json to_json() const;
};

struct AugmentedRow {
  std::size_t unit = 0;
  int u = 0;
  double weight = 0;
  double fractional_outcome = 0;  // logistic(gamma + u alpha)
  double mu_tilde = 0;            // logistic(beta + u delta)
  double logit_mu_tilde = 0;      // beta + u delta
};

struct SolvedNuisance {
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
  Eigen::VectorXd posterior_u;
};

SolvedNuisance solve_nuisance(const CohortTable& table, const Eigen::VectorXd& p_hat,
                              const Eigen::VectorXd& mu_hat, const SensitivityParams& params);

// Two rows per unit: u = 0 with weight 1 - q_g and u = 1 with weight q_g.
std::vector<AugmentedRow> augment(const CohortTable& table, const Eigen::VectorXd& p_hat,
                                  const Eigen::VectorXd& mu_hat,
                                  const SensitivityParams& params);

struct ReestimateOptions {
  std::vector<std::string> exclude_strata;  // strata dropped by the main fit
  const AdjustedFit* start = nullptr;
  GlmOptions glm;
};

// Fractional-response fit of the augmented rows: outcome ~ group +
// logit(mu_tilde) + stratum fixed effects, weighted.
AdjustedFit reestimate(const CohortTable& table, const std::vector<AugmentedRow>& rows,
                       const ReestimateOptions& options = {});

struct SensitivityGrid {
  std::vector<double> alpha;
  std::vector<double> delta;
  std::vector<double> q_ref;
  std::vector<double> q_alt;
  double theta_cap = 1.0986122886681098;

  // alpha, delta in {-log 3, -log 2, 0, log 2, log 3}; q in {0, 0.1, ..., 1}.
  static SensitivityGrid defaults();
  // Same q lattice, alpha/delta = {-log k, ..., log k} for k = 2..exp(theta).
  static SensitivityGrid for_theta(double theta_cap, double q_step = 0.1);
  std::size_t size() const { return alpha.size() * delta.size() * q_ref.size() * q_alt.size(); }
  std::vector<SensitivityParams> cells() const;

  nlohmann::json to_json() const;
  static SensitivityGrid from_json(const nlohmann::json& j);
};

struct SensitivityCell {
  SensitivityParams params;
  Eigen::VectorXd coefficients;  // per comparison group
};

struct SensitivityResult {
  std::vector<std::string> groups;
  std::vector<SensitivityCell> cells;
  Eigen::VectorXd band_min, band_max;
  Eigen::VectorXd band_ci_lo, band_ci_hi;
  std::vector<std::size_t> argmin_cell, argmax_cell;
  Eigen::VectorXd zero_cell;  // all-zero confounding, always evaluated
};

struct GridSearchOptions {
  std::vector<std::string> exclude_strata;
  int threads = 1;
};

SensitivityResult grid_search(const CohortTable& table, const Eigen::VectorXd& p_hat,
                              const Eigen::VectorXd& mu_hat, const SensitivityGrid& grid,
                              const Eigen::VectorXd& se_boot,
                              const GridSearchOptions& options = {});

// ---------------------------------------------------------------------------

enum class PropensityLearner { Boosted, Logistic };

struct PropensityConfig {
  PropensityLearner learner = PropensityLearner::Boosted;
  BoostParams params;
  double train_fraction = 0.9;
  std::uint64_t seed = 1;
};

struct PropensityResult {
  Eigen::VectorXd p_hat;  // clipped to [1e-6, 1 - 1e-6]
  double holdout_auc = 0;
  std::string learner;
};

// Pr(a = 1 | c, x): trained on a random 90% of all units with the group,
// covariates and stratum as inputs, scored on the held-out 10%.
PropensityResult fit_propensity(const CohortTable& table, const PropensityConfig& config);

struct ThetaCalibration {
  std::string benchmark;
  double threshold = 0;
  double coef_decision = 0;
  double coef_passage = 0;
  int odds_multiple = 2;
  double theta = 0;
};

// Binarizes `benchmark` at mean + 1 SD and regresses the decision (all
// units) and passage (Complete units) on stratum + companions + indicator.
ThetaCalibration calibrate_theta(const CohortTable& table, const std::string& benchmark,
                                 const std::vector<std::string>& companions);

}  // namespace prepadj
