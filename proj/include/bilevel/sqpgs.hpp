#ifndef BILEVEL_SQPGS_HPP
#define BILEVEL_SQPGS_HPP

// Penalty SQP gradient sampling for upper-level constraints c(x) <= 0 on
// phi = rho f(x, Y_{a,b}(x)) + sum_k max(c_k(x), 0).

#include <cmath>
#include <functional>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/common.hpp"
#include "bilevel/gs.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/qp.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/sensitivity.hpp"

namespace bilevel {

struct SQPGSParams {
  Vec x0;
  double rho0 = 1.0, theta0 = 1e-4;
  double eta = 1.0;
  double mu_rho = 0.5, mu_theta = 0.5, mu_alpha = 0.5, mu_beta = 0.5, mu_eps = 0.5;
  double alpha0 = 1.0, beta0 = 1.0, eps0 = 1.0;
  double alpha_opt = 1e-5, beta_opt = 1e-5, eps_opt = 1e-5;
  double delta = 1e-4, gamma = 0.5;
  int N_sam = 0;  // 0: max(n + 1, 5)
  int max_iter = 1000;
  int max_backtracks = 50;
  std::uint64_t seed = 0;

  bool include_center = true;
  int max_resample = 5;
  int threads = 1;
  double qp_tol = 1e-10;
  SensitivityOptions sens;
  std::function<void(const RunRecord&)> on_record;  // progress hook, called in order

  int samples(Eigen::Index n) const { return N_sam > 0 ? N_sam : static_cast<int>(std::max<Eigen::Index>(n + 1, 5)); }

  void validate(Eigen::Index n) const {
    check_dim(x0.size(), n, "SQPGSParams: x0");
    require(x0.allFinite(), "SQPGSParams: x0 must be finite");
    require(rho0 > 0 && theta0 > 0 && eta > 0, "SQPGSParams: rho0, theta0, eta must be > 0");
    require(alpha0 > 0 && beta0 > 0 && eps0 > 0, "SQPGSParams: alpha0, beta0, eps0 must be > 0");
    require(alpha_opt >= 0 && beta_opt >= 0 && eps_opt >= 0, "SQPGSParams: opt thresholds must be >= 0");
    for (double mu : {mu_rho, mu_theta, mu_alpha, mu_beta, mu_eps})
      require(mu > 0 && mu < 1, "SQPGSParams: shrink factors must lie in (0,1)");
    require(delta > 0 && delta < 1 && gamma > 0 && gamma < 1, "SQPGSParams: delta, gamma must lie in (0,1)");
    require(samples(n) >= n + 1, "SQPGSParams: N_sam must be at least n + 1");
    require(max_iter >= 1 && max_backtracks >= 1 && max_resample >= 1, "SQPGSParams: iteration caps must be positive");
    require(threads >= 1, "SQPGSParams: threads must be positive");
  }
};

/// Sampled direction subproblem at the center x:
///   min rho s + sum_k t_k + |d|^2/2
///   s >= f + <w_i, d>,  t_k >= 0,  t_k >= c_k + <w_k^i, d>.
/// Variables are ordered (d, s, t_1..t_r); s is dropped when rho = 0.
struct QPSubproblemData {
  Vec center;
  double f_center = 0.0;
  std::vector<Vec> obj_grads;
  std::vector<double> c_center;
  std::vector<std::vector<Vec>> con_grads;
  double rho = 1.0;

  Eigen::Index n() const { return center.size(); }
  Eigen::Index r() const { return static_cast<Eigen::Index>(c_center.size()); }
  bool has_s() const { return rho > 0.0; }

  void validate() const {
    require(rho >= 0.0, "QPSubproblemData: rho must be nonnegative");
    require(!obj_grads.empty() || !has_s(), "QPSubproblemData: no objective samples");
    require(con_grads.size() == c_center.size(), "QPSubproblemData: constraint sample lists do not match");
    for (const auto& g : obj_grads) check_dim(g.size(), n(), "QPSubproblemData: objective sample");
    for (const auto& list : con_grads) {
      require(!list.empty(), "QPSubproblemData: empty constraint sample list");
      for (const auto& g : list) check_dim(g.size(), n(), "QPSubproblemData: constraint sample");
    }
  }

  double phi() const {
    double v = rho * f_center;
    for (double c : c_center) v += std::max(c, 0.0);
    return v;
  }

  /// Sampled model q(d) evaluated directly.
  double model(const Vec& d) const {
    double v = 0.5 * d.squaredNorm();
    if (has_s()) {
      double sup = -std::numeric_limits<double>::infinity();
      for (const auto& g : obj_grads) sup = std::max(sup, f_center + g.dot(d));
      v += rho * sup;
    }
    for (std::size_t k = 0; k < c_center.size(); ++k) {
      double sup = 0.0;
      for (const auto& g : con_grads[k]) sup = std::max(sup, c_center[k] + g.dot(d));
      v += sup;
    }
    return v;
  }

  qp::DenseQP build() const {
    validate();
    const auto nn = n(), rr = r();
    const Eigen::Index ns = has_s() ? 1 : 0;
    const Eigen::Index nv = nn + ns + rr;
    Eigen::Index rows = ns ? static_cast<Eigen::Index>(obj_grads.size()) : 0;
    rows += rr;
    for (const auto& list : con_grads) rows += static_cast<Eigen::Index>(list.size());

    qp::DenseQP qp;
    qp.P = Mat::Zero(nv, nv);
    qp.P.topLeftCorner(nn, nn).setIdentity();
    qp.q = Vec::Zero(nv);
    if (ns) qp.q(nn) = rho;
    qp.q.tail(rr).setOnes();
    qp.G_in = Mat::Zero(rows, nv);
    qp.h_in = Vec::Zero(rows);
    Eigen::Index row = 0;
    if (ns)
      for (const auto& g : obj_grads) {
        qp.G_in.row(row).head(nn) = g.transpose();
        qp.G_in(row, nn) = -1.0;
        qp.h_in(row++) = -f_center;
      }
    for (Eigen::Index k = 0; k < rr; ++k) {
      const Eigen::Index tk = nn + ns + k;
      qp.G_in(row, tk) = -1.0;
      qp.h_in(row++) = 0.0;
      for (const auto& g : con_grads[static_cast<std::size_t>(k)]) {
        qp.G_in.row(row).head(nn) = g.transpose();
        qp.G_in(row, tk) = -1.0;
        qp.h_in(row++) = -c_center[static_cast<std::size_t>(k)];
      }
    }
    return qp;
  }
};

struct Direction {
  Vec d;
  double delta_q = 0.0;
  int qp_iterations = 0;
  double qp_residual = 0.0;
};

/// The QP is solved to `tol`; a run that stalls at a residual of at most
/// accept_tol is still taken, since delta_q is recomputed from the model.
inline Direction solve_direction(const QPSubproblemData& data, double tol = 1e-10, double accept_tol = 1e-8) {
  const auto sol = qp::solve_qp(data.build(), tol);
  const bool stalled_ok = sol.status == qp::QPStatus::max_iter && sol.kkt_residual <= accept_tol;
  if (sol.status != qp::QPStatus::optimal && !stalled_ok)
    throw Error(ErrorKind::qp_failure, std::string("solve_direction: QP ") + qp::to_string(sol.status) +
                                           " (residual " + std::to_string(sol.kkt_residual) + ")");
  Direction out;
  out.d = sol.primal.head(data.n());
  out.qp_iterations = sol.iterations;
  out.qp_residual = sol.kkt_residual;
  const double phi = data.phi();
  out.delta_q = phi - data.model(out.d);
  if (out.delta_q < -1e-10 * (1.0 + std::abs(phi)))
    throw Error(ErrorKind::qp_failure, "solve_direction: negative model decrease " + std::to_string(out.delta_q));
  return out;
}

inline double penalty_value(const BilevelProblem& P, const Vec& x, double rho, double alpha, double beta,
                            const LowerOptions& opts = {}, const std::optional<Vec>& y0 = std::nullopt) {
  const auto sol = solve_regularized(P.lower, x, alpha, beta, opts, y0);
  return rho * P.f_val(x, sol.y) + P.infeasibility(x);
}

namespace detail {

/// Constraint k draws its own ball samples from rng.split(k); slot 0 is the
/// center when include_center is set.
inline std::vector<Vec> constraint_samples(const UpperConstraint& con, const Vec& center, double eps, int N,
                                           bool include_center, Rng rng) {
  std::vector<Vec> g;
  g.reserve(static_cast<std::size_t>(N) + 1);
  if (include_center) g.push_back(con.grad(center));
  for (int i = 0; i < N; ++i) g.push_back(con.grad(rng.ball(center, eps)));
  return g;
}

}  // namespace detail

inline RunResult run_sqpgs(const BilevelProblem& P, const SQPGSParams& prm) {
  P.validate();
  prm.validate(P.n());
  const auto t_start = detail::Clock::now();
  const int N = prm.samples(P.n());
  const Rng rng(prm.seed);

  RunResult res;
  Vec x = prm.x0;
  double rho = prm.rho0, theta = prm.theta0, eps = prm.eps0, alpha = prm.alpha0, beta = prm.beta0;
  std::optional<Vec> y_warm;

  for (int nu = 0; nu < prm.max_iter; ++nu) {
    if (detail::radius_unresolvable(eps, x)) {
      res.termination = Termination::stalled;
      break;
    }
    RunRecord rec;
    rec.iter = nu;
    rec.x = x;
    rec.alpha = alpha;
    rec.beta = beta;
    rec.eps = eps;
    rec.eta = prm.eta;
    rec.rho = rho;
    rec.theta = theta;

    const Rng it = rng.split(static_cast<std::uint64_t>(nu));
    auto t0 = detail::Clock::now();
    const auto S = detail::sample_hypergradients(P, x, eps, alpha, beta, N, prm.include_center, it.split(0),
                                                 prm.max_resample, prm.threads, prm.sens, y_warm);
    QPSubproblemData data;
    data.center = x;
    data.rho = rho;
    if (S.center_ok) {
      data.f_center = S.grads[0].f_val;
      y_warm = S.grads[0].y_used;
    } else {
      const auto sol = solve_regularized(P.lower, x, alpha, beta, prm.sens.lower, y_warm);
      data.f_center = P.f_val(x, sol.y);
      y_warm = sol.y;
    }
    res.timing.lower += detail::seconds_since(t0);
    for (const auto& g : S.grads) data.obj_grads.push_back(g.w);
    for (Eigen::Index k = 0; k < P.r(); ++k) {
      const auto& con = P.constraints[static_cast<std::size_t>(k)];
      data.c_center.push_back(con.c(x));
      data.con_grads.push_back(detail::constraint_samples(con, x, eps, N, prm.include_center,
                                                          it.split(static_cast<std::uint64_t>(k) + 1)));
    }
    rec.f_val = data.f_center;
    rec.resampled = S.resampled;
    const double infeas = P.infeasibility(x);
    rec.infeasibility = infeas;
    const double phi = data.phi();
    rec.phi = phi;

    t0 = detail::Clock::now();
    const auto dir = solve_direction(data, prm.qp_tol);
    res.timing.qp += detail::seconds_since(t0);
    rec.delta_q = dir.delta_q;
    rec.w_norm = dir.d.norm();

    const double target = prm.eta * eps * eps;
    bool done = false;
    auto shrink = [&] {
      if (infeas <= theta)
        theta *= prm.mu_theta;
      else
        rho *= prm.mu_rho;
      eps *= prm.mu_eps;
      alpha *= prm.mu_alpha;
      beta *= prm.mu_beta;
    };

    if (dir.delta_q <= target && eps <= prm.eps_opt && alpha <= prm.alpha_opt && beta <= prm.beta_opt) {
      rec.event = RunEvent::stop;
      res.termination = Termination::stopped;
      done = true;
    } else if (dir.delta_q <= target) {
      rec.event = RunEvent::shrink;
      shrink();
    } else {
      bool accepted = false;
      double t = 1.0;
      t0 = detail::Clock::now();
      for (int k = 0; k < prm.max_backtracks; ++k, t *= prm.gamma) {
        const Vec xt = x + t * dir.d;
        const auto v = detail::try_value(P, xt, alpha, beta, prm.sens, y_warm);
        rec.backtracks = k + 1;
        if (!v) continue;
        const double phit = rho * v->f + P.infeasibility(xt);
        if (phit < phi - prm.delta * t * dir.delta_q) {
          x = xt;
          y_warm = v->y;
          rec.t = t;
          rec.f_trial = phit;
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

#endif  // BILEVEL_SQPGS_HPP
