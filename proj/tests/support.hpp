// Shared test helpers and independent oracles. Nothing here calls into the
// code under test except to build inputs, so the oracles stay independent.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "prepadj/dataset.hpp"

namespace testsupport {

inline prepadj::CohortTable csv_table(const std::string& text, const prepadj::Schema& schema) {
  std::istringstream in(text);
  return prepadj::parse_csv(in, schema);
}

inline prepadj::Schema schema_with(
    std::vector<std::pair<std::string, prepadj::ColumnType>> covariates) {
  prepadj::Schema s;
  s.covariates = std::move(covariates);
  return s;
}

// O(n^2) pair counting: P(score_pos > score_neg) + 0.5 P(tie).
inline double pair_count_auc(std::span<const double> s, std::span<const std::uint8_t> y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1;
      if (s[i] > s[j]) wins += 1;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

// Plain bisection for an increasing function on [lo, hi].
inline double bisect_increasing(const std::function<double(double)>& f, double target, double lo,
                                double hi) {
  for (int i = 0; i < 2000; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (f(mid) < target) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Nelder-Mead simplex minimizer with restarts around the incumbent; a
// derivative-free oracle for maximum-likelihood fits.
// A restart stops the search once it no longer moves the incumbent.
inline Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                                   Eigen::VectorXd x0, double step = 0.5, int restarts = 12,
                                   int max_iter = 20000, double ftol = 1e-15, double xtol = 1e-11) {
  const Eigen::Index n = x0.size();
  for (int restart = 0; restart < restarts; ++restart) {
    std::vector<Eigen::VectorXd> simplex(static_cast<std::size_t>(n + 1), x0);
    for (Eigen::Index i = 0; i < n; ++i) simplex[static_cast<std::size_t>(i + 1)][i] += step;
    std::vector<double> fv(simplex.size());
    for (std::size_t i = 0; i < simplex.size(); ++i) fv[i] = f(simplex[i]);
    for (int it = 0; it < max_iter; ++it) {
      std::vector<std::size_t> order(simplex.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](auto a, auto b) { return fv[a] < fv[b]; });
      std::vector<Eigen::VectorXd> s2;
      std::vector<double> f2;
      for (auto o : order) {
        s2.push_back(simplex[o]);
        f2.push_back(fv[o]);
      }
      simplex = s2;
      fv = f2;
      double diameter = 0;
      for (std::size_t i = 1; i < simplex.size(); ++i) {
        diameter = std::max(diameter, (simplex[i] - simplex[0]).cwiseAbs().maxCoeff());
      }
      if (diameter < xtol) break;
      if (std::abs(fv.back() - fv.front()) <= ftol * (std::abs(fv.front()) + 1e-300)) break;
      Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
      for (Eigen::Index i = 0; i < n; ++i) centroid += simplex[static_cast<std::size_t>(i)];
      centroid /= static_cast<double>(n);
      const Eigen::VectorXd& worst = simplex.back();
      const Eigen::VectorXd xr = centroid + (centroid - worst);
      const double fr = f(xr);
      if (fr < fv.front()) {
        const Eigen::VectorXd xe = centroid + 2.0 * (centroid - worst);
        const double fe = f(xe);
        if (fe < fr) {
          simplex.back() = xe;
          fv.back() = fe;
        } else {
          simplex.back() = xr;
          fv.back() = fr;
        }
      } else if (fr < fv[fv.size() - 2]) {
        simplex.back() = xr;
        fv.back() = fr;
      } else {
        const bool outside = fr < fv.back();
        const Eigen::VectorXd xc =
            outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                    : Eigen::VectorXd(centroid + 0.5 * (worst - centroid));
        const double fc = f(xc);
        if (fc < (outside ? fr : fv.back())) {
          simplex.back() = xc;
          fv.back() = fc;
        } else {
          for (std::size_t i = 1; i < simplex.size(); ++i) {
            simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0]);
            fv[i] = f(simplex[i]);
          }
        }
      }
    }
    const auto best = static_cast<std::size_t>(std::min_element(fv.begin(), fv.end()) - fv.begin());
    const double moved = (simplex[best] - x0).cwiseAbs().maxCoeff();
    x0 = simplex[best];
    if (restart > 0 && moved < xtol * 10) break;
    step *= 0.3;
  }
  return x0;
}

// Negative weighted Bernoulli quasi-log-likelihood of a dense design.
inline double neg_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                         const Eigen::VectorXd& w, const Eigen::VectorXd& beta) {
  double s = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double eta = X.row(i).dot(beta);
    const double log_p = -std::log1p(std::exp(-eta));
    const double log_q = -std::log1p(std::exp(eta));
    s -= w[i] * (y[i] * log_p + (1 - y[i]) * log_q);
  }
  return s;
}

}  // namespace testsupport
