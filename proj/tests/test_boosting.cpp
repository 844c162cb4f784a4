// Unit tests for the histogram gradient-boosted trees learner.
//
// Mathematical basis:
//   * Trees are fitted to the second-order expansion of the logistic loss;
//     predictions are logistic(base + sum of leaf values), clipped to
//     [1e-6, 1 - 1e-6].
//   * Cross-validation selects the grid point with the largest mean fold
//     AUC; refitting each fold independently with early stopping on that
//     fold must reproduce every fold AUC when the binning is identical.
//
// Failure modes guarded: a learner that cannot separate separable data;
// degenerate targets silently fitted; the group column sneaking in as a
// feature; Incomplete units in the training set; CV bookkeeping (wrong
// fold, wrong argmax, wrong rounds) that the independent loop would expose;
// serialization or row-order changing predictions.

#include <random>

#include "doctest.h"
#include "prepadj/boosting.hpp"
#include "prepadj/core.hpp"
#include "prepadj/metrics.hpp"
#include "support.hpp"

using namespace prepadj;

namespace {

// Complete units with integer-valued covariates (every value present in
// every fold, so fold-level and global binning coincide).
CohortTable integer_table(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> val(0, 5), cat(0, 2), st(0, 3);
  std::string s = "unit_id,group,stratum,cohort,decision,assessed,passed,x1,x2,k\n";
  const char* groups[] = {"White", "Black"};
  const char* kinds[] = {"a", "b", "c"};
  for (std::size_t i = 0; i < n; ++i) {
    const int x1 = val(rng), x2 = val(rng), k = cat(rng), stratum = st(rng);
    const double eta = -1.5 + 0.5 * x1 + 0.3 * (x1 > 2) * x2 - 0.4 * k + 0.2 * stratum;
    const bool pass = std::uniform_real_distribution<double>(0, 1)(rng) < testsupport::sigmoid(eta);
    s += std::to_string(i) + "," + groups[i % 2] + ",s" + std::to_string(stratum) + ",c,1,1," +
         (pass ? "1" : "0") + "," + std::to_string(x1) + "," + std::to_string(x2) + "," +
         kinds[k] + "\n";
  }
  return testsupport::csv_table(s, testsupport::schema_with({{"x1", ColumnType::Numeric},
                                                             {"x2", ColumnType::Numeric},
                                                             {"k", ColumnType::Categorical}}));
}

std::vector<std::uint8_t> passed_of(const CohortTable& t) { return t.passed; }

}  // namespace

TEST_CASE("separable data with a depth-1 stump reaches holdout AUC 1") {
  std::string s = "unit_id,group,stratum,cohort,decision,assessed,passed,x\n";
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0, 1);
  for (int i = 0; i < 400; ++i) {
    double x = z(rng);
    if (std::abs(x) < 1e-3) x = 0.5;
    s += std::to_string(i) + ",White,s,c,1,1," + (x > 0 ? "1" : "0") + "," + std::to_string(x) + "\n";
  }
  const auto t = testsupport::csv_table(s, testsupport::schema_with({{"x", ColumnType::Numeric}}));
  const auto split = split_holdout(t, 0.9, 1);
  BoostParams p;
  p.max_depth = 1;
  p.rounds = 20;
  FeatureSelection sel;
  sel.include_stratum = false;
  const auto model = fit_boosted(split.train, sel, p, 1);
  CHECK(auc(model.predict(split.holdout), split.holdout.passed) == 1.0);
}

TEST_CASE("a constant target is rejected as degenerate") {
  auto t = integer_table(100, 1);
  std::fill(t.passed.begin(), t.passed.end(), 1);
  try {
    fit_boosted(t, {}, BoostParams{}, 1);
    FAIL("expected an error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("degenerate target") != std::string::npos);
  }
}

TEST_CASE("preparedness model rejects the group column and Incomplete units") {
  const auto t = integer_table(100, 2);
  FeatureSelection with_group;
  with_group.include_group = true;
  CHECK_THROWS_AS(fit_boosted(t, with_group, BoostParams{}, 1), DataError);
  FeatureSelection named;
  named.covariates = {"x1", "group"};
  CHECK_THROWS_AS(fit_boosted(t, named, BoostParams{}, 1), DataError);
  auto incomplete = t;
  incomplete.assessed[5] = 0;
  incomplete.passed[5] = 0;
  CHECK_THROWS_AS(fit_boosted(incomplete, {}, BoostParams{}, 1), DataError);
}

TEST_CASE("empty ensemble predicts 0.5; huge leaves are clipped") {
  const auto t = integer_table(50, 3);
  BoostedModel m;
  m.features = build_features(t, {}, 256);
  const auto p = predict_mu(m, t);
  CHECK((p.array() == 0.5).all());

  Tree stump;
  stump.nodes.push_back({0, 0, 0.5, 1, 2, 0.0});
  stump.nodes.push_back({-1, 0, 0, -1, -1, 1e6});
  stump.nodes.push_back({-1, 0, 0, -1, -1, 1e6});
  m.trees.push_back(stump);
  const auto q = predict_mu(m, t);
  CHECK((q.array() == 1.0 - kProbClip).all());
  m.trees[0].nodes[1].value = m.trees[0].nodes[2].value = -1e6;
  CHECK((predict_mu(m, t).array() == kProbClip).all());
}

TEST_CASE("predictions are row-order invariant and survive JSON round trip") {
  const auto t = integer_table(500, 4);
  BoostParams p;
  p.rounds = 40;
  const auto m = fit_boosted(t, {}, p, 1);
  const auto mu = predict_mu(m, t);

  std::vector<std::size_t> rev(t.size());
  for (std::size_t i = 0; i < rev.size(); ++i) rev[i] = rev.size() - 1 - i;
  const auto mu_rev = predict_mu(m, t.take(rev));
  for (std::size_t i = 0; i < rev.size(); ++i) CHECK(mu_rev[static_cast<Eigen::Index>(i)] == mu[static_cast<Eigen::Index>(rev[i])]);

  const auto back = BoostedModel::from_json(nlohmann::json::parse(m.to_json().dump()));
  CHECK((predict_mu(back, t).array() == mu.array()).all());
  CHECK((predict_mu(m, t).array() == mu.array()).all());
}

TEST_CASE("unseen categorical levels are mapped with a warning") {
  const auto t = integer_table(300, 5);
  BoostParams p;
  p.rounds = 10;
  const auto m = fit_boosted(t, {}, p, 1);
  auto other = t;
  auto& k = other.covariates[static_cast<std::size_t>(other.covariate_index("k"))].categorical;
  const int novel = k.add_level("zzz");
  k.codes[0] = novel;
  std::vector<std::string> warnings;
  const auto mu = predict_mu(m, other, &warnings);
  CHECK_FALSE(warnings.empty());
  CHECK(mu[0] > 0.0);
  CHECK(mu[0] < 1.0);
}

TEST_CASE("cv_select: single point, dominance and the brute-force CV oracle") {
  const auto t = integer_table(600, 6);
  const auto labels = passed_of(t);
  BoostParams base;
  base.rounds = 60;
  base.patience = 10;

  SUBCASE("a one-point grid chooses that point") {
    HyperGrid g;
    g.max_depth = {3};
    g.eta = {0.2};
    g.min_child_weight = {1};
    g.gamma = {0};
    g.max_delta_step = {0};
    const auto cv = cv_select(t, labels, {}, g, base, 9);
    CHECK(cv.chosen_index == 0);
    CHECK(cv.chosen.max_depth == 3);
    CHECK(cv.chosen.eta == 0.2);
    CHECK(cv.table.size() == 1);
  }

  SUBCASE("a point that dominates on every fold is chosen") {
    // min_child_weight = 1e9 forbids every split: AUC 0.5 on each fold.
    HyperGrid g;
    g.max_depth = {2};
    g.eta = {0.2};
    g.min_child_weight = {1e9, 1};
    g.gamma = {0};
    g.max_delta_step = {0};
    const auto cv = cv_select(t, labels, {}, g, base, 9);
    REQUIRE(cv.table.size() == 2);
    const auto& good = cv.table[cv.chosen_index];
    const auto& bad = cv.table[1 - cv.chosen_index];
    CHECK(good.params.min_child_weight == 1);
    for (std::size_t k = 0; k < good.fold_auc.size(); ++k) CHECK(good.fold_auc[k] > bad.fold_auc[k]);
  }

  SUBCASE("3x3 grid matches an independent per-fold refit") {
    HyperGrid g;
    g.max_depth = {1, 2, 3};
    g.eta = {0.05, 0.2, 0.5};
    g.min_child_weight = {1};
    g.gamma = {0};
    g.max_delta_step = {0};
    g.folds = 5;
    const std::uint64_t seed = 21;
    const auto cv = cv_select(t, labels, {}, g, base, seed, 3);
    REQUIRE(cv.table.size() == 9);

    const auto fold = make_folds(t.size(), g.folds, seed);
    std::vector<double> mean_auc;
    for (int depth : g.max_depth) {
      for (double eta : g.eta) {
        BoostParams p = base;
        p.max_depth = depth;
        p.eta = eta;
        double sum = 0;
        double rounds = 0;
        for (int k = 0; k < g.folds; ++k) {
          std::vector<std::size_t> tr, va;
          for (std::size_t i = 0; i < fold.size(); ++i) (fold[i] == k ? va : tr).push_back(i);
          const auto train = t.take(tr), valid = t.take(va);
          const auto m = train_booster(train, train.passed, {}, p, &valid, valid.passed);
          sum += auc(m.predict_margin(m.encode(valid)), valid.passed);
          rounds += static_cast<double>(m.trees.size());
        }
        mean_auc.push_back(sum / g.folds);
        // The CV table's rounds are the rounded mean of per-fold best rounds.
        const auto& row = std::find_if(cv.table.begin(), cv.table.end(), [&](const CvRow& r) {
          return r.params.max_depth == depth && r.params.eta == eta;
        });
        REQUIRE(row != cv.table.end());
        CHECK(row->mean_auc == doctest::Approx(mean_auc.back()).epsilon(1e-12));
        CHECK(row->rounds == std::max(1, static_cast<int>(std::lround(rounds / g.folds))));
      }
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < mean_auc.size(); ++i) {
      if (mean_auc[i] > mean_auc[best] + 1e-12) best = i;
    }
    CHECK(cv.chosen.max_depth == g.max_depth[best / 3]);
    CHECK(cv.chosen.eta == g.eta[best % 3]);

    // Thread count never changes the result.
    const auto cv1 = cv_select(t, labels, {}, g, base, seed, 1);
    CHECK(cv1.chosen_index == cv.chosen_index);
    for (std::size_t i = 0; i < cv.table.size(); ++i) CHECK(cv1.table[i].mean_auc == cv.table[i].mean_auc);
  }
}

TEST_CASE("learner reaches the Bayes AUC on about 2k synthetic Complete units") {
  SyntheticTruth truth;
  truth.seed = 31;
  const auto syn = generate_synthetic(truth, 7000, 20, 4);
  const auto rows = complete_rows(syn.table);
  REQUIRE(rows.size() >= 2000);
  const auto complete = syn.table.take(rows);
  const auto split = split_holdout(complete, 0.9, 5);
  BoostParams p;
  p.max_depth = 2;
  p.eta = 0.1;
  p.rounds = 150;
  const auto m = fit_boosted(split.train, {}, p, 1);
  const double model_auc = auc(m.predict(split.holdout), split.holdout.passed);
  std::vector<double> true_mu;
  for (auto r : split.holdout_rows) true_mu.push_back(syn.mu[rows[r]]);
  const double bayes = auc(true_mu, split.holdout.passed);
  MESSAGE("model AUC " << model_auc << ", Bayes AUC " << bayes);
  CHECK(std::abs(model_auc - bayes) <= 0.05);
}
