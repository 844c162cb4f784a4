#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prepadj/core.hpp"
#include "prepadj/dataset.hpp"

namespace prepadj {

// Weighted logistic (quasi-)likelihood problem: dense columns plus an
// optional stratum factor whose fixed effects are handled block-wise.
template <typename Scalar>
struct LogisticProblem {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Matrix X;                        // dense design, intercept included by caller
  std::vector<std::string> names;  // one per column of X
  Vector y;                        // outcome in [0, 1]
  Vector weights;                  // empty means unit weights
  std::vector<int> strata;         // empty means no fixed effects
  std::vector<std::string> stratum_levels;
  std::vector<std::string> exclude_strata;  // removed before fitting
};

struct GlmOptions {
  double ridge = 0.0;
  int max_iterations = 100;
  double deviance_tolerance = 1e-10;
  double gradient_tolerance = 1e-8;
  double separation_bound = 30.0;
  bool separation_fallback = true;
  double fallback_ridge = 1e-6;
  double collinearity_tolerance = 1e-9;
};

template <typename Scalar>
struct GlmFit {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  std::vector<std::string> names;
  Vector coefficients;
  Vector se;  // log-odds scale, from the inverse observed information
  Scalar deviance = 0;
  Scalar gradient_norm = 0;
  Scalar ridge = 0;
  int iterations = 0;
  bool converged = false;
  bool separation_fallback = false;
  std::size_t n_rows = 0;
  std::vector<std::string> dropped_strata;
  std::vector<std::string> dropped_columns;

  Vector odds_ratios() const { return coefficients.array().exp().matrix(); }

  std::optional<Eigen::Index> index_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) return std::nullopt;
    return static_cast<Eigen::Index>(it - names.begin());
  }
  Scalar coef(const std::string& name) const {
    const auto i = index_of(name);
    if (!i) throw DataError("fit has no coefficient '" + name + "'");
    return coefficients[*i];
  }
  Scalar se_of(const std::string& name) const {
    const auto i = index_of(name);
    if (!i) throw DataError("fit has no coefficient '" + name + "'");
    return se[*i];
  }
};

namespace detail {

template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > Scalar(0) ? x + log1p(exp(-x)) : log1p(exp(x));
}

template <typename Scalar>
Scalar xlogx_ratio(Scalar y, Scalar log_p) {
  using std::log;
  return y > Scalar(0) ? y * (log(y) - log_p) : Scalar(0);
}

// Row-compacted problem after removing excluded / zero-weight rows and
// strata without outcome variation.
template <typename Scalar>
struct Compact {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Matrix X;
  Vector y, w;
  std::vector<int> stratum_param;  // -1 for the reference stratum
  int n_stratum_params = 0;
  std::vector<std::string> stratum_names;  // for params
  std::vector<std::string> dropped_strata;
};

template <typename Scalar>
Compact<Scalar> compact(const LogisticProblem<Scalar>& prob) {
  const Eigen::Index n = prob.X.rows();
  const bool has_w = prob.weights.size() > 0;
  const bool has_s = !prob.strata.empty();
  if (prob.y.size() != n || (has_w && prob.weights.size() != n) ||
      (has_s && static_cast<Eigen::Index>(prob.strata.size()) != n)) {
    throw DataError("logistic problem: inconsistent row counts");
  }
  if (static_cast<Eigen::Index>(prob.names.size()) != prob.X.cols()) {
    throw DataError("logistic problem: one name per column required");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(prob.y[i] >= Scalar(0) && prob.y[i] <= Scalar(1))) {
      throw DataError("logistic problem: outcome outside [0, 1]");
    }
    if (has_w && !(std::isfinite(static_cast<double>(prob.weights[i])) && prob.weights[i] >= Scalar(0))) {
      throw DataError("logistic problem: weights must be finite and nonnegative");
    }
  }

  const std::size_t k = prob.stratum_levels.size();
  std::vector<bool> excluded(k, false);
  for (const auto& name : prob.exclude_strata) {
    auto it = std::find(prob.stratum_levels.begin(), prob.stratum_levels.end(), name);
    if (it != prob.stratum_levels.end()) excluded[static_cast<std::size_t>(it - prob.stratum_levels.begin())] = true;
  }

  Compact<Scalar> out;
  std::vector<bool> keep_stratum(k, false);
  if (has_s) {
    std::vector<bool> has_zero(k, false), has_one(k, false), seen(k, false), interior(k, false);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int s = prob.strata[static_cast<std::size_t>(i)];
      if (s < 0 || static_cast<std::size_t>(s) >= k) throw DataError("logistic problem: stratum code out of range");
      if (has_w && prob.weights[i] == Scalar(0)) continue;
      const auto su = static_cast<std::size_t>(s);
      seen[su] = true;
      if (prob.y[i] <= Scalar(0)) has_zero[su] = true;
      else if (prob.y[i] >= Scalar(1)) has_one[su] = true;
      else interior[su] = true;
    }
    for (std::size_t s = 0; s < k; ++s) {
      if (!seen[s] || excluded[s]) continue;
      const bool varies = interior[s] || (has_zero[s] && has_one[s]);
      if (varies) keep_stratum[s] = true;
      else out.dropped_strata.push_back(prob.stratum_levels[s]);
    }
    for (const auto& name : prob.exclude_strata) {
      if (std::find(out.dropped_strata.begin(), out.dropped_strata.end(), name) == out.dropped_strata.end())
        out.dropped_strata.push_back(name);
    }
  }

  std::vector<int> param_of(k, -1);
  bool reference_taken = false;
  for (std::size_t s = 0; s < k; ++s) {
    if (!keep_stratum[s]) continue;
    if (!reference_taken) {
      reference_taken = true;
      continue;
    }
    param_of[s] = out.n_stratum_params++;
    out.stratum_names.push_back("stratum[" + prob.stratum_levels[s] + "]");
  }

  std::vector<Eigen::Index> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (has_w && prob.weights[i] == Scalar(0)) continue;
    if (has_s && !keep_stratum[static_cast<std::size_t>(prob.strata[static_cast<std::size_t>(i)])]) continue;
    rows.push_back(i);
  }
  const auto m = static_cast<Eigen::Index>(rows.size());
  out.X.resize(m, prob.X.cols());
  out.y.resize(m);
  out.w.resize(m);
  out.stratum_param.resize(static_cast<std::size_t>(m), -1);
  for (Eigen::Index r = 0; r < m; ++r) {
    const Eigen::Index i = rows[static_cast<std::size_t>(r)];
    out.X.row(r) = prob.X.row(i);
    out.y[r] = prob.y[i];
    out.w[r] = has_w ? prob.weights[i] : Scalar(1);
    if (has_s) out.stratum_param[static_cast<std::size_t>(r)] = param_of[static_cast<std::size_t>(prob.strata[static_cast<std::size_t>(i)])];
  }
  return out;
}

// Accumulates the weighted cross-product [X S]' diag(v) [X S] where S are
// stratum indicator columns.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> cross_product(
    const Compact<Scalar>& c, const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& v) {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Eigen::Index p = c.X.cols();
  const Eigen::Index q = c.n_stratum_params;
  Matrix H = Matrix::Zero(p + q, p + q);
  H.topLeftCorner(p, p).noalias() = c.X.transpose() * (c.X.array().colwise() * v.array()).matrix();
  if (q > 0) {
    for (Eigen::Index i = 0; i < c.X.rows(); ++i) {
      const int s = c.stratum_param[static_cast<std::size_t>(i)];
      if (s < 0) continue;
      const Eigen::Index j = p + s;
      H.block(0, j, p, 1).noalias() += v[i] * c.X.row(i).transpose();
      H(j, j) += v[i];
    }
    H.bottomLeftCorner(q, p) = H.topRightCorner(p, q).transpose();
  }
  return H;
}

// In-order pivoted Cholesky: a column is kept when it is not (numerically) a
// linear combination of the kept columns before it.
template <typename Scalar>
std::vector<bool> independent_columns(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& M, double tol) {
  const Eigen::Index d = M.rows();
  std::vector<bool> keep(static_cast<std::size_t>(d), false);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> L =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(d, d);
  std::vector<Eigen::Index> kept;
  for (Eigen::Index j = 0; j < d; ++j) {
    const Scalar diag = M(j, j);
    if (!(diag > Scalar(0))) continue;
    Scalar r = diag;
    for (Eigen::Index a = 0; a < static_cast<Eigen::Index>(kept.size()); ++a) {
      const Eigen::Index ka = kept[static_cast<std::size_t>(a)];
      Scalar s = M(j, ka);
      for (Eigen::Index b = 0; b < a; ++b) s -= L(j, b) * L(ka, b);
      L(j, a) = s / L(ka, a);
      r -= L(j, a) * L(j, a);
    }
    if (r > Scalar(tol) * diag) {
      L(j, static_cast<Eigen::Index>(kept.size())) = std::sqrt(r);
      kept.push_back(j);
      keep[static_cast<std::size_t>(j)] = true;
    }
  }
  return keep;
}

template <typename Scalar>
struct IrlsState {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Scalar deviance = 0;
  Scalar objective = 0;
  Vector gradient;
  Matrix hessian;
};

}  // namespace detail

// Maximizes the weighted Bernoulli (quasi-)log-likelihood by Newton/IRLS
// with step halving. Fractional outcomes use the same score equations; the
// dispersion is fixed at 1. `start`, when given, holds initial values by
// coefficient name (unknown names start at 0).
template <typename Scalar>
GlmFit<Scalar> fit_logistic(const LogisticProblem<Scalar>& prob, const GlmOptions& opt = {},
                            const GlmFit<Scalar>* start = nullptr) {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  const detail::Compact<Scalar> c = detail::compact(prob);
  if (c.X.rows() == 0) throw NumericalError("logistic fit has no usable rows");
  const Eigen::Index p = c.X.cols();
  const Eigen::Index q = c.n_stratum_params;
  const Eigen::Index d = p + q;

  std::vector<std::string> all_names = prob.names;
  all_names.insert(all_names.end(), c.stratum_names.begin(), c.stratum_names.end());

  // Drop collinear columns (dense first, then strata, in order).
  const Matrix info0 = detail::cross_product(c, c.w);
  const std::vector<bool> keep = detail::independent_columns(info0, opt.collinearity_tolerance);
  std::vector<Eigen::Index> active;
  GlmFit<Scalar> fit;
  fit.dropped_strata = c.dropped_strata;
  fit.n_rows = static_cast<std::size_t>(c.X.rows());
  for (Eigen::Index j = 0; j < d; ++j) {
    if (keep[static_cast<std::size_t>(j)]) active.push_back(j);
    else fit.dropped_columns.push_back(all_names[static_cast<std::size_t>(j)]);
  }
  const auto a = static_cast<Eigen::Index>(active.size());
  for (auto j : active) fit.names.push_back(all_names[static_cast<std::size_t>(j)]);

  auto solve_with_ridge = [&](Scalar ridge, bool& separated) {
    Vector beta_full = Vector::Zero(d);
    if (start) {
      for (Eigen::Index j = 0; j < d; ++j) {
        if (const auto idx = start->index_of(all_names[static_cast<std::size_t>(j)])) {
          beta_full[j] = start->coefficients[*idx];
        }
      }
      for (Eigen::Index j = 0; j < d; ++j) {
        if (!keep[static_cast<std::size_t>(j)]) beta_full[j] = 0;
      }
    }
    const Eigen::Index n = c.X.rows();
    Vector eta(n), prob_v(n), hw(n), resid(n);
    Scalar entropy = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      using std::log;
      const Scalar y = c.y[i];
      if (y > Scalar(0)) entropy += c.w[i] * y * log(y);
      if (y < Scalar(1)) entropy += c.w[i] * (Scalar(1) - y) * log(Scalar(1) - y);
    }

    // Gradient and Hessian from the row weights of the last evaluation.
    auto add_derivatives = [&](const Vector& beta, detail::IrlsState<Scalar>& st) {
      Vector g_full(d);
      g_full.head(p).noalias() = c.X.transpose() * resid;
      if (q > 0) {
        g_full.tail(q).setZero();
        for (Eigen::Index i = 0; i < n; ++i) {
          const int s = c.stratum_param[static_cast<std::size_t>(i)];
          if (s >= 0) g_full[p + s] += resid[i];
        }
      }
      const Matrix H_full = detail::cross_product(c, hw);
      st.gradient.resize(a);
      st.hessian.resize(a, a);
      for (Eigen::Index r = 0; r < a; ++r) {
        const Eigen::Index jr = active[static_cast<std::size_t>(r)];
        st.gradient[r] = g_full[jr] - ridge * beta[jr];
        for (Eigen::Index k2 = 0; k2 < a; ++k2) {
          st.hessian(r, k2) = H_full(jr, active[static_cast<std::size_t>(k2)]);
        }
        st.hessian(r, r) += ridge;
      }
    };

    // Row terms: with t = exp(-|eta|) and L = log1p(t), log p = -(max(-eta, 0) + L)
    // and log(1 - p) = -(max(eta, 0) + L). The outcome entropy part of the
    // deviance does not depend on beta and is computed once.
    auto evaluate = [&](const Vector& beta, bool derivatives) {
      using std::abs;
      using std::exp;
      using std::log1p;
      detail::IrlsState<Scalar> st;
      eta.noalias() = c.X * beta.head(p);
      Scalar dev = entropy;
      for (Eigen::Index i = 0; i < n; ++i) {
        const int s = c.stratum_param[static_cast<std::size_t>(i)];
        if (s >= 0) eta[i] += beta[p + s];
        const Scalar e = eta[i];
        const Scalar t = exp(-abs(e));
        const Scalar L = log1p(t);
        const Scalar neg_log_p = (e < Scalar(0) ? -e : Scalar(0)) + L;
        const Scalar neg_log_1mp = (e > Scalar(0) ? e : Scalar(0)) + L;
        const Scalar y = c.y[i];
        dev += c.w[i] * (y * neg_log_p + (Scalar(1) - y) * neg_log_1mp);
        const Scalar pi = e >= Scalar(0) ? Scalar(1) / (Scalar(1) + t) : t / (Scalar(1) + t);
        prob_v[i] = pi;
        hw[i] = c.w[i] * pi * (Scalar(1) - pi);
        resid[i] = c.w[i] * (y - pi);
      }
      st.deviance = Scalar(2) * dev;
      st.objective = st.deviance + ridge * beta.squaredNorm();
      if (derivatives) add_derivatives(beta, st);
      return st;
    };

    GlmFit<Scalar> out = fit;
    out.ridge = ridge;
    detail::IrlsState<Scalar> st = evaluate(beta_full, true);
    separated = false;
    int it = 0;
    bool converged = false;
    for (; it < opt.max_iterations; ++it) {
      if (st.gradient.size() == 0 || st.gradient.cwiseAbs().maxCoeff() < Scalar(opt.gradient_tolerance)) {
        converged = true;
        break;
      }
      const Eigen::LDLT<Matrix> ldlt(st.hessian);
      Vector step = ldlt.solve(st.gradient);
      if (!step.allFinite()) {
        step = st.hessian.completeOrthogonalDecomposition().solve(st.gradient);
      }
      Vector candidate = beta_full;
      Scalar t = 1;
      detail::IrlsState<Scalar> trial;
      for (int halving = 0; halving < 40; ++halving) {
        candidate = beta_full;
        for (Eigen::Index r = 0; r < a; ++r) candidate[active[static_cast<std::size_t>(r)]] += t * step[r];
        trial = evaluate(candidate, false);
        using std::abs;
        if (trial.objective <= st.objective + Scalar(1e-12) * (abs(st.objective) + Scalar(1))) break;
        t /= Scalar(2);
      }
      const Scalar previous = st.deviance;
      beta_full = candidate;
      // The accepted trial was the last evaluation; reuse its row weights.
      st = trial;
      add_derivatives(beta_full, st);
      using std::abs;
      if (beta_full.cwiseAbs().maxCoeff() > Scalar(opt.separation_bound)) {
        separated = true;
        ++it;
        break;
      }
      if (abs(previous - st.deviance) < Scalar(opt.deviance_tolerance)) {
        ++it;
        converged = true;
        break;
      }
    }
    out.iterations = it;
    out.converged = converged;
    out.deviance = st.deviance;
    out.gradient_norm = st.gradient.size() ? st.gradient.cwiseAbs().maxCoeff() : Scalar(0);
    out.coefficients.resize(a);
    for (Eigen::Index r = 0; r < a; ++r) out.coefficients[r] = beta_full[active[static_cast<std::size_t>(r)]];
    const Matrix cov = st.hessian.ldlt().solve(Matrix::Identity(a, a));
    out.se = cov.diagonal().cwiseMax(Scalar(0)).cwiseSqrt();
    return out;
  };

  bool separated = false;
  GlmFit<Scalar> out = solve_with_ridge(Scalar(opt.ridge), separated);
  if (separated && opt.ridge == 0.0 && opt.separation_fallback) {
    out = solve_with_ridge(Scalar(opt.fallback_ridge), separated);
    out.separation_fallback = true;
  }
  if (separated) {
    throw NumericalError("perfect separation: coefficients diverge beyond " +
                         std::to_string(opt.separation_bound) +
                         " in magnitude; refit with a ridge penalty");
  }
  if (!out.converged) {
    throw NumericalError("logistic fit did not converge in " +
                         std::to_string(opt.max_iterations) + " iterations");
  }
  return out;
}

using AdjustedFit = GlmFit<double>;

// ---------------------------------------------------------------------------
// Designs built from cohort tables

enum class OutcomeColumn { Decision, Passed };

struct DesignSpec {
  OutcomeColumn outcome = OutcomeColumn::Decision;
  bool group_dummies = true;
  bool stratum_effects = true;
  std::vector<std::string> covariates;         // numeric as-is, categorical as dummies
  std::optional<Eigen::VectorXd> prep;          // mu-hat; enters as logit(mu-hat)
  std::optional<Eigen::VectorXd> weights;
  std::vector<std::size_t> rows;                // empty means all rows
  std::vector<std::string> exclude_strata;
};

inline const char* kPrepTerm = "logit_mu";

std::string group_term(const std::string& level);

// Non-reference group levels, in level order.
std::vector<std::string> comparison_groups(const CohortTable& table);

LogisticProblem<double> build_problem(const CohortTable& table, const DesignSpec& spec);

AdjustedFit fit_logistic(const CohortTable& table, const DesignSpec& spec,
                         const GlmOptions& opt = {});

// decision ~ group + logit(mu-hat) + stratum fixed effects.
AdjustedFit fit_adjusted(const CohortTable& table, const Eigen::VectorXd& mu,
                         const GlmOptions& opt = {});

enum class BaselineVariant { Raw, TraditionalI, TraditionalII };

struct CovariateSets {
  std::vector<std::string> traditional_i;
  std::vector<std::string> traditional_ii;
};

AdjustedFit fit_baseline(const CohortTable& table, BaselineVariant variant,
                         const CovariateSets& sets, const GlmOptions& opt = {});

const char* baseline_name(BaselineVariant v);

// Group coefficients (log-odds) in comparison_groups order. Throws when a
// group coefficient is absent from the fit.
Eigen::VectorXd group_coefficients(const AdjustedFit& fit,
                                   const std::vector<std::string>& groups);
Eigen::VectorXd group_standard_errors(const AdjustedFit& fit,
                                      const std::vector<std::string>& groups);

// ---------------------------------------------------------------------------
// Bootstrap

struct BootstrapResult {
  std::vector<std::string> groups;
  Eigen::MatrixXd replicate_estimates;  // replicates x groups
  Eigen::VectorXd point;
  Eigen::VectorXd se_boot;
  std::vector<std::pair<double, double>> ci95;
  int replicates = 0;
  std::uint64_t master_seed = 0;
  int redraws = 0;
};

// Maps a resampled table and a replicate seed to group coefficients.
using ReplicatePipeline =
    std::function<Eigen::VectorXd(const CohortTable&, std::uint64_t)>;

inline constexpr int kMaxBootstrapAttempts = 5;

BootstrapResult bootstrap_ci(const CohortTable& table, const ReplicatePipeline& pipeline,
                             const Eigen::VectorXd& point,
                             const std::vector<std::string>& groups, int replicates,
                             std::uint64_t master_seed, int threads = 1);

// Seed of replicate r, draw attempt k.
std::uint64_t replicate_seed(std::uint64_t master_seed, int replicate, int attempt);

}  // namespace prepadj
