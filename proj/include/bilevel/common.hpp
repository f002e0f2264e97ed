#ifndef BILEVEL_COMMON_HPP
#define BILEVEL_COMMON_HPP

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Dense>

namespace bilevel {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class ErrorKind {
  input,
  infeasible_point,
  infeasible_function,
  not_a_subgradient,
  convergence,
  ill_conditioned,
  invalid_dual,
  qp_failure,
  config,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::input: return "input";
    case ErrorKind::infeasible_point: return "infeasible_point";
    case ErrorKind::infeasible_function: return "infeasible_function";
    case ErrorKind::not_a_subgradient: return "not_a_subgradient";
    case ErrorKind::convergence: return "convergence";
    case ErrorKind::ill_conditioned: return "ill_conditioned";
    case ErrorKind::invalid_dual: return "invalid_dual";
    case ErrorKind::qp_failure: return "qp_failure";
    case ErrorKind::config: return "config";
  }
  return "unknown";
}

/// Base for every error raised by the library. The kind is machine readable
/// so the CLI can map it onto exit codes and error JSON.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Lower-level iteration cap hit. Carries the best iterate seen.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, Vec best, double residual)
      : Error(ErrorKind::convergence, what),
        best_(std::move(best)),
        residual_(residual) {}
  const Vec& best_iterate() const noexcept { return best_; }
  double residual() const noexcept { return residual_; }

 private:
  Vec best_;
  double residual_;
};

class IllConditionedError : public Error {
 public:
  IllConditionedError(const std::string& what, double cond)
      : Error(ErrorKind::ill_conditioned, what), cond_(cond) {}
  double condition() const noexcept { return cond_; }

 private:
  double cond_;
};

inline void require(bool ok, const std::string& what,
                    ErrorKind kind = ErrorKind::input) {
  if (!ok) throw Error(kind, what);
}

/// Value of an extended-real valued function. +inf is an explicit state,
/// never a large float.
class ExtendedReal {
 public:
  constexpr ExtendedReal() = default;
  constexpr explicit ExtendedReal(double v) : value_(v) {}
  static constexpr ExtendedReal pos_infinity() {
    ExtendedReal r;
    r.infinite_ = true;
    return r;
  }

  constexpr bool is_finite() const noexcept { return !infinite_; }
  constexpr bool is_pos_infinity() const noexcept { return infinite_; }

  double value() const {
    if (infinite_) throw Error(ErrorKind::input, "value() on +inf");
    return value_;
  }

  /// Finite value or +inf as an IEEE double, for printing only.
  double as_double() const noexcept {
    return infinite_ ? std::numeric_limits<double>::infinity() : value_;
  }

  friend bool operator==(const ExtendedReal& a, const ExtendedReal& b) {
    if (a.infinite_ || b.infinite_) return a.infinite_ == b.infinite_;
    return a.value_ == b.value_;
  }

 private:
  double value_ = 0.0;
  bool infinite_ = false;
};

inline void check_dim(Eigen::Index got, Eigen::Index want, const char* what) {
  if (got != want) {
    throw Error(ErrorKind::input, std::string(what) + ": dimension " +
                                      std::to_string(got) + ", expected " +
                                      std::to_string(want));
  }
}

}  // namespace bilevel

#endif  // BILEVEL_COMMON_HPP
