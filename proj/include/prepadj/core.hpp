#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace prepadj {

// Error taxonomy. The CLI maps these onto exit codes 2 / 3 / 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: schema, config, or data invariant violations.
class DataError : public Error {
 public:
  using Error::Error;
};

// Numerical failure: separation, non-convergence, degenerate targets.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A command's upstream output (e.g. estimate results needed by the
// sensitivity step) is absent or stale.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

// Scalar-like types, as opposed to Eigen expressions.
template <typename T>
concept ScalarLike = !requires { typename T::PlainObject; };

// Lower/upper clip applied to every probability before a logit is taken.
inline constexpr double kProbClip = 1e-6;

template <ScalarLike Scalar>
Scalar logistic(Scalar eta) {
  using std::exp;
  if (eta >= Scalar(0)) {
    return Scalar(1) / (Scalar(1) + exp(-eta));
  }
  const Scalar e = exp(eta);
  return e / (Scalar(1) + e);
}

template <ScalarLike Scalar>
Scalar logit(Scalar p) {
  using std::log;
  return log(p / (Scalar(1) - p));
}

template <ScalarLike Scalar>
Scalar clip_probability(Scalar p, Scalar eps = Scalar(kProbClip)) {
  if (!(p > eps)) return eps;  // also catches NaN
  if (p > Scalar(1) - eps) return Scalar(1) - eps;
  return p;
}

// Elementwise logistic over any Eigen array expression.
template <typename Derived>
auto logistic_array(const Eigen::ArrayBase<Derived>& eta) {
  using Scalar = typename Derived::Scalar;
  return eta.unaryExpr([](Scalar v) { return logistic<Scalar>(v); });
}

template <typename Derived>
auto clip_probability_array(const Eigen::ArrayBase<Derived>& p) {
  using Scalar = typename Derived::Scalar;
  return p.unaryExpr([](Scalar v) { return clip_probability<Scalar>(v); });
}

// SplitMix64 finalizer; used to derive independent child seeds from a
// master seed and a counter so results never depend on execution order.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t counter) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (counter + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
// processed exactly once; callers store results by index.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn);

// Emits a warning line on stderr.
void warn(const std::string& message);

}  // namespace prepadj
