#ifndef BILEVEL_GS_HPP
#define BILEVEL_GS_HPP

// Gradient sampling on the regularized hyper-objective x -> f(x, Y_{a,b}(x)),
// with the (eta, eps, alpha, beta) shrinking schedule.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/common.hpp"
#include "bilevel/lower.hpp"
#include "bilevel/parallel.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/qp.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/sensitivity.hpp"

namespace bilevel {

enum class RunEvent { descent, shrink, stop, ls_fail };

inline const char* to_string(RunEvent e) {
  switch (e) {
    case RunEvent::descent: return "descent";
    case RunEvent::shrink: return "shrink";
    case RunEvent::stop: return "stop";
    case RunEvent::ls_fail: return "ls_fail";
  }
  return "unknown";
}

enum class Termination { stopped, first_eta_hit, max_iter, stalled };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::stopped: return "stopped";
    case Termination::first_eta_hit: return "first_eta_hit";
    case Termination::max_iter: return "max_iter";
    case Termination::stalled: return "stalled";
  }
  return "unknown";
}

/// One outer iteration. x, f_val and the parameters are the values at the
/// start of the iteration; f_trial is the accepted value after a descent step.
struct RunRecord {
  int iter = 0;
  Vec x;
  RunEvent event = RunEvent::descent;
  double w_norm = 0.0;
  double t = 0.0;
  double alpha = 0.0, beta = 0.0, eps = 0.0, eta = 0.0;
  double f_val = 0.0;    // minimization form, as used by the line search
  double f_trial = 0.0;  // descent only
  double wolfe_gap = 0.0;
  int backtracks = 0;
  int resampled = 0;
  double wall_time = 0.0;

  // SQP-GS extension
  std::optional<double> rho, theta, delta_q, infeasibility, phi;
};

struct PhaseTiming {
  double lower = 0.0;  // lower-level solves and Jacobians, wall clock
  double qp = 0.0;     // min-norm / direction subproblems
  double total = 0.0;
};

struct RunResult {
  Vec x_final;
  Vec y_final;
  double f_final = 0.0;  // minimization form at the final (alpha, beta)
  std::vector<RunRecord> records;
  Termination termination = Termination::max_iter;
  int descents = 0, shrinks = 0, ls_fails = 0;
  double alpha_final = 0.0, beta_final = 0.0, eps_final = 0.0;
  PhaseTiming timing;

  int count(RunEvent e) const {
    int c = 0;
    for (const auto& r : records) c += r.event == e;
    return c;
  }
};

struct GSParams {
  Vec x0;
  double eta0 = 1.0, alpha0 = 1.0, beta0 = 1.0, eps0 = 1.0;
  double eta_opt = 1e-5, eps_opt = 1e-5, alpha_opt = 1e-5, beta_opt = 1e-5;
  double mu_eta = 0.5, mu_eps = 0.5, mu_alpha = 0.5, mu_beta = 0.5;
  double delta = 1e-4, gamma = 0.5;
  int N_sam = 0;  // 0: max(n + 1, 5)
  int max_iter = 1000;
  int max_backtracks = 50;
  std::uint64_t seed = 0;

  bool include_center = true;
  bool stop_at_first_eta_hit = false;
  bool fixed_radius = false;  // eps stays at eps0
  int max_resample = 5;
  int threads = 1;
  SensitivityOptions sens;
  std::function<void(const RunRecord&)> on_record;  // progress hook, called in order

  int samples(Eigen::Index n) const { return N_sam > 0 ? N_sam : static_cast<int>(std::max<Eigen::Index>(n + 1, 5)); }

  void validate(Eigen::Index n) const {
    check_dim(x0.size(), n, "GSParams: x0");
    require(x0.allFinite(), "GSParams: x0 must be finite");
    require(eta0 > 0 && alpha0 > 0 && beta0 > 0 && eps0 > 0, "GSParams: eta0, alpha0, beta0, eps0 must be > 0");
    require(eta_opt >= 0 && eps_opt >= 0 && alpha_opt >= 0 && beta_opt >= 0, "GSParams: opt thresholds must be >= 0");
    for (double mu : {mu_eta, mu_eps, mu_alpha, mu_beta})
      require(mu > 0 && mu < 1, "GSParams: shrink factors must lie in (0,1)");
    require(delta > 0 && delta < 1 && gamma > 0 && gamma < 1, "GSParams: delta, gamma must lie in (0,1)");
    require(samples(n) >= n + 1, "GSParams: N_sam must be at least n + 1");
    require(max_iter >= 1 && max_backtracks >= 1 && max_resample >= 1, "GSParams: iteration caps must be positive");
    require(threads >= 1, "GSParams: threads must be positive");
  }
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct SampledGradients {
  std::vector<Vec> points;
  std::vector<HyperGradient> grads;
  bool center_ok = false;  // slot 0 holds the center itself
  int resampled = 0;
};

inline bool resample_worthy(const Error& e) {
  return e.kind() == ErrorKind::ill_conditioned || e.kind() == ErrorKind::convergence;
}

/// Hyper-gradients at the center (slot 0, optional) and N ball samples.
/// Slot i draws from rng.split(i), so the set does not depend on threads.
/// A slot whose Jacobian is ill conditioned is redrawn from the same stream.
inline SampledGradients sample_hypergradients(const BilevelProblem& P, const Vec& center, double eps, double alpha,
                                              double beta, int N, bool include_center, const Rng& rng,
                                              int max_resample, int threads, const SensitivityOptions& sens,
                                              const std::optional<Vec>& y_warm) {
  const std::size_t K = static_cast<std::size_t>(N) + (include_center ? 1 : 0);
  SampledGradients out;
  out.points.resize(K);
  out.grads.resize(K);
  std::vector<int> retries(K, 0);
  parallel_for(K, threads, [&](std::size_t i) {
    Rng stream = rng.split(i);
    const bool is_center = include_center && i == 0;
    Vec pt = is_center ? center : stream.ball(center, eps);
    for (int attempt = 0;; ++attempt) {
      try {
        out.grads[i] = hyper_gradient(P, pt, alpha, beta, sens, y_warm);
        out.points[i] = pt;
        retries[i] = attempt;
        return;
      } catch (const Error& e) {
        if (!resample_worthy(e) || attempt + 1 >= max_resample)
          throw Error(e.kind(), "sample " + std::to_string(i) + " failed after " + std::to_string(attempt + 1) +
                                    " draws: " + e.what());
        pt = stream.ball(center, eps);
      }
    }
  });
  out.center_ok = include_center && retries[0] == 0;
  for (int r : retries) out.resampled += r;
  return out;
}

struct PointValue {
  double f;
  Vec y;
};

inline std::optional<PointValue> try_value(const BilevelProblem& P, const Vec& x, double alpha, double beta,
                                           const SensitivityOptions& sens, const std::optional<Vec>& y_warm) {
  try {
    const auto sol = solve_regularized(P.lower, x, alpha, beta, sens.lower, y_warm);
    return PointValue{P.f_val(x, sol.y), sol.y};
  } catch (const ConvergenceError&) {
    return std::nullopt;
  }
}

inline Mat as_columns(const std::vector<HyperGradient>& g) {
  Mat W(g.front().w.size(), static_cast<Eigen::Index>(g.size()));
  for (std::size_t i = 0; i < g.size(); ++i) W.col(static_cast<Eigen::Index>(i)) = g[i].w;
  return W;
}

// Sample offsets of this size are at the rounding level of x, so every
// sample is x itself.
inline bool radius_unresolvable(double eps, const Vec& x) {
  return eps <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, x.lpNorm<Eigen::Infinity>());
}

}  // namespace detail

inline RunResult run_gs(const BilevelProblem& P, const GSParams& prm) {
  P.validate();
  require(P.r() == 0, "run_gs: problem " + P.name + " has upper-level constraints; use run_sqpgs");
  prm.validate(P.n());
  const auto t_start = detail::Clock::now();
  const int N = prm.samples(P.n());
  const Rng rng(prm.seed);

  RunResult res;
  Vec x = prm.x0;
  double eta = prm.eta0, eps = prm.eps0, alpha = prm.alpha0, beta = prm.beta0;
  std::optional<Vec> y_warm;

  for (int nu = 0; nu < prm.max_iter; ++nu) {
    if (!prm.fixed_radius && detail::radius_unresolvable(eps, x)) {
      res.termination = Termination::stalled;
      break;
    }
    RunRecord rec;
    rec.iter = nu;
    rec.x = x;
    rec.alpha = alpha;
    rec.beta = beta;
    rec.eps = eps;
    rec.eta = eta;

    auto t0 = detail::Clock::now();
    const auto S = detail::sample_hypergradients(P, x, eps, alpha, beta, N, prm.include_center, rng.split(nu),
                                                 prm.max_resample, prm.threads, prm.sens, y_warm);
    double f_cur;
    if (S.center_ok) {
      f_cur = S.grads[0].f_val;
      y_warm = S.grads[0].y_used;
    } else {
      const auto sol = solve_regularized(P.lower, x, alpha, beta, prm.sens.lower, y_warm);
      f_cur = P.f_val(x, sol.y);
      y_warm = sol.y;
    }
    res.timing.lower += detail::seconds_since(t0);
    rec.f_val = f_cur;
    rec.resampled = S.resampled;

    t0 = detail::Clock::now();
    const Mat W = detail::as_columns(S.grads);
    const auto mn = qp::min_norm_point(W);
    res.timing.qp += detail::seconds_since(t0);
    const Vec& w = mn.point;
    const double wn = w.norm();
    rec.w_norm = wn;
    rec.wolfe_gap = qp::wolfe_gap(W, w);

    auto shrink = [&] {
      eta *= prm.mu_eta;
      if (!prm.fixed_radius) eps *= prm.mu_eps;
      alpha *= prm.mu_alpha;
      beta *= prm.mu_beta;
    };

    bool done = false;
    if (wn <= prm.eta_opt && eps <= prm.eps_opt && alpha <= prm.alpha_opt && beta <= prm.beta_opt) {
      rec.event = RunEvent::stop;
      res.termination = Termination::stopped;
      done = true;
    } else if (wn <= eta) {
      rec.event = RunEvent::shrink;
      shrink();
      if (prm.stop_at_first_eta_hit) {
        res.termination = Termination::first_eta_hit;
        done = true;
      }
    } else {
      const Vec d = -w / wn;
      bool accepted = false;
      double t = 1.0;
      t0 = detail::Clock::now();
      for (int k = 0; k < prm.max_backtracks; ++k, t *= prm.gamma) {
        const Vec xt = x + t * d;
        const auto v = detail::try_value(P, xt, alpha, beta, prm.sens, y_warm);
        rec.backtracks = k + 1;
        if (v && v->f < f_cur - prm.delta * t * wn) {
          x = xt;
          y_warm = v->y;
          rec.t = t;
          rec.f_trial = v->f;
          accepted = true;
          break;
        }
      }
      res.timing.lower += detail::seconds_since(t0);
      if (accepted) {
        rec.event = RunEvent::descent;
      } else {
        rec.event = RunEvent::ls_fail;
        shrink();
      }
    }
    rec.wall_time = detail::seconds_since(t_start);
    if (prm.on_record) prm.on_record(rec);
    res.records.push_back(std::move(rec));
    if (done) break;
  }

  res.descents = res.count(RunEvent::descent);
  res.shrinks = res.count(RunEvent::shrink);
  res.ls_fails = res.count(RunEvent::ls_fail);
  res.x_final = x;
  const auto fin = solve_regularized(P.lower, x, alpha, beta, prm.sens.lower, y_warm);
  res.y_final = fin.y;
  res.f_final = P.f_val(x, fin.y);
  res.alpha_final = alpha;
  res.beta_final = beta;
  res.eps_final = eps;
  res.timing.total = detail::seconds_since(t_start);
  return res;
}

}  // namespace bilevel

#endif  // BILEVEL_GS_HPP
