// Unit tests for the binary-confounder sensitivity analysis.
//
// Mathematical basis:
//   * The mixture m(x) = (1 - q) logistic(x) + q logistic(x + s) is strictly
//     increasing in x, so gamma (propensity) and beta (preparedness) are
//     unique roots; a plain bisection is an independent oracle.
//   * Bayes' rule: Pr(u = 1 | a = 1) = q logistic(gamma + alpha) / p_hat.
//   * The augmented pair (u = 0 weight 1 - q, u = 1 weight q) reproduces p_hat
//     as the weighted mean of its fractional outcomes, by construction.
//   * When u affects nothing (alpha = delta = 0, or q in {0, 1} with no
//     shift), the augmented fit reduces to the fit on the original units.
//   * A grid that contains another grid has a band at least as wide.
//
// Failure modes guarded: the wrong root of the quadratic (or cancellation
// near q in {0, 1}); Bayes' rule with swapped weights; weights attached to
// the wrong copy; cells whose result depends on evaluation order; Theta
// rounded the wrong way or below the floor.

#include <random>

#include "doctest.h"
#include "prepadj/core.hpp"
#include "prepadj/sensitivity.hpp"
#include "support.hpp"

using namespace prepadj;
using Vec = Eigen::VectorXd;

namespace {

double bisect_mixture_oracle(double target, double q, double shift) {
  return testsupport::bisect_increasing(
      [&](double x) {
        return (1 - q) * testsupport::sigmoid(x) + q * testsupport::sigmoid(x + shift);
      },
      target, -40, 40);
}

struct Fixture {
  SyntheticCohort syn;
  Vec p_hat, mu;
};

Fixture fixture(std::uint64_t seed, std::size_t n = 2000) {
  SyntheticTruth truth;
  truth.seed = seed;
  truth.true_group_effects = {0.0, std::log(0.75), 0.0, 0.2};
  Fixture f{generate_synthetic(truth, n, 6, 3), {}, {}};
  f.syn.table = impute_means(f.syn.table).table;
  PropensityConfig pc;
  pc.learner = PropensityLearner::Logistic;
  pc.seed = 3;
  f.p_hat = fit_propensity(f.syn.table, pc).p_hat;
  f.mu = Eigen::Map<const Vec>(f.syn.mu.data(), static_cast<Eigen::Index>(n))
             .unaryExpr([](double v) { return clip_probability(v); });
  return f;
}

}  // namespace

TEST_CASE("solve_gamma: spec examples") {
  for (double q : {0.0, 0.3, 1.0}) {
    CHECK(solve_gamma(0.3, q, 0.0) == doctest::Approx(-0.8472978603872037).epsilon(1e-14));
  }
  CHECK(solve_gamma(0.5, 1.0, std::log(2.0)) == doctest::Approx(-std::log(2.0)).epsilon(1e-14));
  const double g = solve_gamma(0.3, 0.5, std::log(3.0));
  CHECK(std::abs(g - bisect_mixture_oracle(0.3, 0.5, std::log(3.0))) < 1e-10);
  CHECK(std::abs(mixture(g, 0.5, std::log(3.0)) - 0.3) < 1e-12);
}

TEST_CASE("posterior_u: spec examples") {
  CHECK(posterior_u(0.0, std::log(3.0), 0.5) == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(posterior_u(-1.3, 0.0, 0.37) == 0.37);
  CHECK(posterior_u(0.4, std::log(2.0), 0.0) == 0.0);
  CHECK(posterior_u(0.4, std::log(2.0), 1.0) == 1.0);
  // Monotone in alpha for fixed gamma and q.
  double last = -1;
  for (double a = -2; a <= 2; a += 0.25) {
    const double w = posterior_u(0.2, a, 0.4);
    CHECK(w > last);
    last = w;
  }
}

TEST_CASE("solve_beta: spec examples") {
  CHECK(solve_beta(0.6, 0.7, 0.0) == doctest::Approx(std::log(1.5)).epsilon(1e-14));
  CHECK(solve_beta(0.6, 0.0, 1.0) == doctest::Approx(std::log(1.5)).epsilon(1e-14));
  const double b = solve_beta(0.6, 0.4, -std::log(2.0));
  CHECK(std::abs(b - bisect_mixture_oracle(0.6, 0.4, -std::log(2.0))) < 1e-10);
}

TEST_CASE("mixture inversion is exact across extreme targets and shifts") {
  for (double p : {1e-6, 1e-4, 0.01, 0.5, 0.99, 1 - 1e-4, 1 - 1e-6}) {
    for (double q : {1e-9, 0.01, 0.5, 0.99, 1 - 1e-9}) {
      for (double s : {-5.0, -1.0986, 0.3, 1.0986, 5.0}) {
        const double x = solve_mixture(p, q, s);
        CHECK(std::abs(mixture(x, q, s) - p) < 1e-10);
        CHECK(std::abs(x - bisect_mixture_oracle(p, q, s)) < 1e-8);
      }
    }
  }
  // The solved gamma decreases as alpha grows (more of the propensity is
  // explained by u).
  double last = 1e9;
  for (double a = -1.0; a <= 1.0; a += 0.25) {
    const double g = solve_gamma(0.4, 0.5, a);
    CHECK(g < last);
    last = g;
  }
  CHECK_THROWS_AS(solve_gamma(0.0, 0.5, 1.0), DataError);
  CHECK_THROWS_AS(solve_gamma(0.5, 1.5, 1.0), DataError);
}

TEST_CASE("augment: inert confounder, zero weights and the mixture identity") {
  const auto f = fixture(41, 600);
  const auto& t = f.syn.table;
  SensitivityParams zero;
  const auto rows0 = augment(t, f.p_hat, f.mu, zero);
  REQUIRE(rows0.size() == 2 * t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    for (int u = 0; u < 2; ++u) {
      const auto& r = rows0[2 * i + static_cast<std::size_t>(u)];
      CHECK(r.fractional_outcome == doctest::Approx(f.p_hat[k]).epsilon(1e-12));
      CHECK(r.mu_tilde == doctest::Approx(f.mu[k]).epsilon(1e-12));
    }
  }

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> pick(0, 4);
  std::uniform_int_distribution<int> qpick(0, 10);
  const double lattice[] = {-std::log(3.0), -std::log(2.0), 0, std::log(2.0), std::log(3.0)};
  for (int rep = 0; rep < 12; ++rep) {
    SensitivityParams p{qpick(rng) / 10.0, qpick(rng) / 10.0, lattice[pick(rng)], lattice[pick(rng)]};
    if (rep == 0) p.q_alt = 0;
    const auto rows = augment(t, f.p_hat, f.mu, p);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto& r0 = rows[2 * i];
      const auto& r1 = rows[2 * i + 1];
      CHECK(r0.u == 0);
      CHECK(r1.u == 1);
      CHECK(r0.weight + r1.weight == doctest::Approx(1.0));
      const double mean = r0.weight * r0.fractional_outcome + r1.weight * r1.fractional_outcome;
      CHECK(std::abs(mean - f.p_hat[static_cast<Eigen::Index>(i)]) < 1e-10);
      const bool ref = t.group.label(i) == t.reference_group;
      if ((ref ? p.q_ref : p.q_alt) == 0.0) CHECK(r1.weight == 0.0);
    }
  }
  SensitivityParams over;
  over.alpha = 2.0;
  CHECK_THROWS_AS(augment(t, f.p_hat, f.mu, over), DataError);
}

TEST_CASE("reestimate: degenerate cells reproduce the zero cell") {
  const auto f = fixture(42);
  const auto& t = f.syn.table;
  const auto groups = comparison_groups(t);
  const Vec zero = group_coefficients(reestimate(t, augment(t, f.p_hat, f.mu, SensitivityParams{})), groups);

  const double l2 = std::log(2.0);
  const std::vector<SensitivityParams> inert = {
      {0.3, 0.3, 0.0, 0.0},  // u has no effect at all
      {0.4, 0.4, 0.0, 0.0},
      {0.0, 0.0, l2, l2},    // nobody carries u
      {1.0, 1.0, l2, 0.0},   // everyone carries u, decision shift absorbed
  };
  for (const auto& p : inert) {
    const Vec c = group_coefficients(reestimate(t, augment(t, f.p_hat, f.mu, p)), groups);
    CHECK((c - zero).cwiseAbs().maxCoeff() < 1e-8);
  }
  // With no confounding the zero cell is close to the fit on the original units.
  const Vec adj = group_coefficients(fit_adjusted(t, f.mu), groups);
  const Vec se = group_standard_errors(fit_adjusted(t, f.mu), groups);
  CHECK(((zero - adj).cwiseAbs().array() < 2 * se.array()).all());
}

TEST_CASE("grid search: collapse, containment, nesting and thread invariance") {
  const auto f = fixture(43);
  const auto& t = f.syn.table;
  const Vec se = Vec::Constant(3, 0.1);

  SensitivityGrid one;
  one.alpha = {0};
  one.delta = {0};
  one.q_ref = {0};
  one.q_alt = {0};
  const auto r1 = grid_search(t, f.p_hat, f.mu, one, se);
  CHECK(r1.cells.size() == 1);
  CHECK(r1.band_min == r1.band_max);
  CHECK(r1.band_min == r1.zero_cell);
  CHECK(((r1.band_ci_hi - r1.band_ci_lo).array() - 2 * 1.96 * 0.1).abs().maxCoeff() < 1e-12);

  CHECK(SensitivityGrid::defaults().size() == 3025);
  CHECK(SensitivityGrid::defaults().alpha.size() == 5);
  CHECK(SensitivityGrid::defaults().q_ref.size() == 11);

  const auto small = grid_search(t, f.p_hat, f.mu, SensitivityGrid::for_theta(std::log(2.0), 0.5), se);
  GridSearchOptions threaded;
  threaded.threads = 4;
  const auto large = grid_search(t, f.p_hat, f.mu, SensitivityGrid::for_theta(std::log(3.0), 0.5), se, threaded);
  CHECK(small.cells.size() == 81);
  CHECK(large.cells.size() == 225);
  for (Eigen::Index g = 0; g < 3; ++g) {
    CHECK(small.band_min[g] <= small.zero_cell[g]);
    CHECK(small.zero_cell[g] <= small.band_max[g]);
    CHECK(large.band_min[g] <= small.band_min[g]);
    CHECK(large.band_max[g] >= small.band_max[g]);
    CHECK(large.band_max[g] > large.band_min[g]);
  }
  // Cells shared by both grids agree exactly regardless of threads.
  const auto single = grid_search(t, f.p_hat, f.mu, SensitivityGrid::for_theta(std::log(3.0), 0.5), se);
  for (std::size_t c = 0; c < single.cells.size(); ++c) {
    CHECK(single.cells[c].coefficients == large.cells[c].coefficients);
  }
}

TEST_CASE("theta calibration: floor at log 2, tripled odds give log 3") {
  SyntheticTruth truth;
  truth.seed = 44;
  auto syn = generate_synthetic(truth, 40000, 5, 2);
  auto& t = syn.table;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> z(0, 1);
  std::uniform_real_distribution<double> unif(0, 1);
  Covariate bench;
  bench.name = "grade";
  for (std::size_t i = 0; i < t.size(); ++i) bench.numeric.push_back(z(rng));
  double mean = 0, ss = 0;
  for (double v : bench.numeric) mean += v;
  mean /= static_cast<double>(t.size());
  for (double v : bench.numeric) ss += (v - mean) * (v - mean);
  const double thr = mean + std::sqrt(ss / static_cast<double>(t.size() - 1));
  t.covariates.push_back(bench);

  auto redraw = [&](double log_or) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double h = bench.numeric[i] > thr ? 1.0 : 0.0;
      t.decision[i] = unif(rng) < testsupport::sigmoid(-0.3 + log_or * h);
      t.assessed[i] = t.decision[i];
      t.passed[i] = t.assessed[i] && unif(rng) < testsupport::sigmoid(0.2 + log_or * h);
    }
  };
  redraw(0.0);
  const auto none = calibrate_theta(t, "grade", {});
  CHECK(none.odds_multiple == 2);
  CHECK(none.theta == std::log(2.0));
  CHECK(none.threshold == doctest::Approx(thr).epsilon(1e-12));

  redraw(std::log(3.0));
  const auto tripled = calibrate_theta(t, "grade", {"x1"});
  MESSAGE("decision OR " << std::exp(tripled.coef_decision) << ", passage OR " << std::exp(tripled.coef_passage));
  CHECK(tripled.odds_multiple == 3);
  CHECK(tripled.theta == std::log(3.0));

  CHECK_THROWS_AS(calibrate_theta(t, "cat1", {}), DataError);
}

TEST_CASE("propensity: constant decisions are an error; AUC is reported") {
  const auto f = fixture(45, 1500);
  auto t = f.syn.table;
  PropensityConfig pc;
  pc.learner = PropensityLearner::Boosted;
  pc.params.rounds = 50;
  const auto r = fit_propensity(t, pc);
  CHECK(r.learner == "boosted");
  CHECK(r.holdout_auc > 0.6);
  CHECK((r.p_hat.array() >= kProbClip).all());
  CHECK((r.p_hat.array() <= 1 - kProbClip).all());
  std::fill(t.decision.begin(), t.decision.end(), 0);
  std::fill(t.assessed.begin(), t.assessed.end(), 0);
  std::fill(t.passed.begin(), t.passed.end(), 0);
  CHECK_THROWS_AS(fit_propensity(t, pc), NumericalError);
}
