#ifndef BILEVEL_SENSITIVITY_HPP
#define BILEVEL_SENSITIVITY_HPP

// Jacobian of the regularized primal-dual solution map
//
//   grad S = -B (B'AB)^{-1} B' [grad_x grad_y L ; grad_x G],
//   A = [[grad_yy L, Jy'], [Jy, -alpha I]],  B = blkdiag(I_m, B_z),
//
// with B_z spanning the polar of the reduced critical cone at z = G - alpha p.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>

#include <Eigen/Dense>

#include "bilevel/common.hpp"
#include "bilevel/lower.hpp"
#include "bilevel/poly.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

struct SensitivityOptions {
  double cond_threshold = 1e12;
  double tol_act = poly::default_tol_act;
  std::optional<Mat> B_z_override;  // any basis of the same subspace; testing hook
  LowerOptions lower;
};

struct SensitivityResult {
  Mat A, B;
  Mat grad_S, grad_Y, grad_P;
  double cond_BAB = 0.0;
  bool ri_flag = false;
  Eigen::Index rank = 0;  // columns of B_z
};

struct HyperGradient {
  Vec w;
  double f_val = 0.0;
  Vec y_used;
  Vec p;
  double cond_BAB = 0.0;
  bool ri_flag = false;
  int lower_iterations = 0;
};

namespace detail {

/// Active sets unchanged at tol_act x10 and /10 and a representation with
/// all active weights strictly positive.
inline bool ri_stable(const LowerLevelOracles& o, const PrimalDualSolution& sol, double tol_act) {
  try {
    const auto lo = poly::active_sets(o.h, sol.w_prox, tol_act / 10.0);
    const auto hi = poly::active_sets(o.h, sol.w_prox, tol_act * 10.0);
    return lo == sol.active && hi == sol.active && !sol.rep.degenerate;
  } catch (const Error&) {
    return false;
  }
}

struct Assembly {
  Mat A, B, BAB, rhs;
  Eigen::Index rank = 0;
};

inline Assembly assemble(const LowerLevelOracles& o, const PrimalDualSolution& sol, double alpha_eff,
                         double beta_eff, const SensitivityOptions& opts) {
  const auto m = o.m, s = o.s, n = o.n;
  const Vec& x = sol.x;
  const Vec& y = sol.y;
  const Mat Jy = o.G_jac_y(x, y);
  const Mat Jx = o.G_jac_x(x, y);
  check_dim(Jy.rows(), s, "jacobian: G_jac_y rows");
  check_dim(Jy.cols(), m, "jacobian: G_jac_y cols");
  check_dim(Jx.cols(), n, "jacobian: G_jac_x cols");

  Mat Lyy = o.g_hess_yy(x, y) + o.G_hess(x, y, sol.p);
  Lyy.diagonal().array() += beta_eff;
  const Mat Lxy = o.g_mixed_xy(x, y) + o.G_mixed(x, y, sol.p);
  check_dim(Lxy.rows(), m, "jacobian: mixed rows");
  check_dim(Lxy.cols(), n, "jacobian: mixed cols");

  Mat Bz;
  if (opts.B_z_override) {
    Bz = *opts.B_z_override;
    check_dim(Bz.rows(), s, "jacobian: B_z override rows");
  } else {
    Bz = poly::critical_cone_basis(o.h, sol.w_prox, sol.p, sol.active).B_z;
  }
  const auto r = Bz.cols();

  Assembly out;
  out.rank = r;
  out.A = Mat::Zero(m + s, m + s);
  out.A.topLeftCorner(m, m) = Lyy;
  out.A.topRightCorner(m, s) = Jy.transpose();
  out.A.bottomLeftCorner(s, m) = Jy;
  out.A.bottomRightCorner(s, s) = -alpha_eff * Mat::Identity(s, s);

  out.B = Mat::Zero(m + s, m + r);
  out.B.topLeftCorner(m, m).setIdentity();
  out.B.bottomRightCorner(s, r) = Bz;

  const Mat BJ = Bz.transpose() * Jy;
  out.BAB = Mat::Zero(m + r, m + r);
  out.BAB.topLeftCorner(m, m) = Lyy;
  out.BAB.topRightCorner(m, r) = BJ.transpose();
  out.BAB.bottomLeftCorner(r, m) = BJ;
  out.BAB.bottomRightCorner(r, r) = -alpha_eff * (Bz.transpose() * Bz);

  out.rhs = Mat(m + r, n);
  out.rhs.topRows(m) = Lxy;
  out.rhs.bottomRows(r) = Bz.transpose() * Jx;
  return out;
}

inline Eigen::PartialPivLU<Mat> factor_checked(const Mat& BAB, double threshold, double& cond) {
  Eigen::PartialPivLU<Mat> lu(BAB);
  const double rc = BAB.size() ? lu.rcond() : 1.0;
  cond = (rc > 0.0 && std::isfinite(rc)) ? 1.0 / rc : std::numeric_limits<double>::infinity();
  if (!(cond <= threshold))
    throw IllConditionedError("jacobian: B'AB is ill conditioned (cond ~ " + std::to_string(cond) + ")", cond);
  return lu;
}

inline SensitivityResult jacobian_at(const LowerLevelOracles& o, const PrimalDualSolution& sol, double alpha_eff,
                                     double beta_eff, const SensitivityOptions& opts) {
  check_dim(sol.x.size(), o.n, "jacobian: x");
  check_dim(sol.y.size(), o.m, "jacobian: y");
  check_dim(sol.p.size(), o.s, "jacobian: p");
  auto as = assemble(o, sol, alpha_eff, beta_eff, opts);
  SensitivityResult res;
  const auto lu = factor_checked(as.BAB, opts.cond_threshold, res.cond_BAB);
  const Mat X = lu.solve(as.rhs);
  res.grad_S = -as.B * X;
  res.grad_Y = res.grad_S.topRows(o.m);
  res.grad_P = res.grad_S.bottomRows(o.s);
  res.A = std::move(as.A);
  res.B = std::move(as.B);
  res.rank = as.rank;
  res.ri_flag = ri_stable(o, sol, opts.tol_act);
  return res;
}

}  // namespace detail

inline SensitivityResult jacobian(const LowerLevelOracles& o, const PrimalDualSolution& sol,
                                  const SensitivityOptions& opts = {}) {
  require(sol.alpha > 0.0 && sol.beta > 0.0, "jacobian: needs alpha, beta > 0");
  return detail::jacobian_at(o, sol, sol.alpha, sol.beta, opts);
}

/// Same assembly with alpha = 0 in A and beta = 0 in grad_yy L. Diagnostic
/// only; throws IllConditionedError when the limit system is singular.
inline SensitivityResult jacobian_actual_limit(const LowerLevelOracles& o, const PrimalDualSolution& sol_at_small_reg,
                                               const SensitivityOptions& opts = {}) {
  return detail::jacobian_at(o, sol_at_small_reg, 0.0, 0.0, opts);
}

/// w = grad_x f + grad_Y' grad_y f at the regularized lower-level solution,
/// through one adjoint solve with B'AB.
inline HyperGradient hyper_gradient(const BilevelProblem& P, const Vec& x, double alpha, double beta,
                                    const SensitivityOptions& opts = {}, const std::optional<Vec>& y0 = std::nullopt) {
  const auto sol = solve_regularized(P.lower, x, alpha, beta, opts.lower, y0);
  auto as = detail::assemble(P.lower, sol, alpha, beta, opts);
  HyperGradient hg;
  const auto lu = detail::factor_checked(as.BAB, opts.cond_threshold, hg.cond_BAB);
  const Vec fy = P.f_grad_y(x, sol.y);
  check_dim(fy.size(), P.m(), "hyper_gradient: f_grad_y");
  Vec rhs = Vec::Zero(as.BAB.rows());
  rhs.head(P.m()) = fy;
  const Vec lam = lu.solve(rhs);  // B'AB is symmetric
  hg.w = P.f_grad_x(x, sol.y) - as.rhs.transpose() * lam;
  hg.f_val = P.f_val(x, sol.y);
  hg.y_used = sol.y;
  hg.p = sol.p;
  hg.ri_flag = detail::ri_stable(P.lower, sol, opts.tol_act);
  hg.lower_iterations = sol.iterations;
  require(hg.w.allFinite(), "hyper_gradient: non-finite gradient", ErrorKind::ill_conditioned);
  return hg;
}


// ---------------------------------------------------------------- self-checks

struct JacobianCheckReport {
  int tested = 0, skipped = 0;
  double max_rel_err = 0.0;
  double tol = 1e-4;
  bool ok() const { return tested > 0 && max_rel_err <= tol; }
};

/// grad_S against central differences of x -> (Y, P) at random points with
/// ri_flag true; points whose stencil changes the active sets are skipped.
inline JacobianCheckReport check_jacobian_fd(const BilevelProblem& P, int points, std::uint64_t seed, double alpha,
                                             double beta, double step = 1e-5) {
  const auto& o = P.lower;
  LowerOptions tight;
  tight.tol_ll = 1e-12;
  auto stacked = [&](const Vec& v) {
    const auto s = solve_regularized(o, v, alpha, beta, tight);
    Vec out(o.m + o.s);
    out << s.y, s.p;
    return out;
  };
  JacobianCheckReport rep;
  Rng rng(seed);
  const Vec base = P.x_typical.size() == o.n ? P.x_typical : Vec::Zero(o.n);
  for (int tries = 0; tries < 20 * points && rep.tested < points; ++tries) {
    const Vec x = base + 0.5 * P.x_spread * rng.normal_vec(o.n);
    try {
      const auto sol = solve_regularized(o, x, alpha, beta, tight);
      const auto J = jacobian(o, sol);
      bool smooth = J.ri_flag;
      for (Eigen::Index j = 0; smooth && j < o.n; ++j)
        for (double sg : {-1.0, 1.0}) {
          Vec xs = x;
          xs(j) += sg * step * (1.0 + std::abs(x(j)));
          if (!(solve_regularized(o, xs, alpha, beta, tight).active == sol.active)) smooth = false;
        }
      if (!smooth) {
        ++rep.skipped;
        continue;
      }
      Mat fd(o.m + o.s, o.n);
      for (Eigen::Index j = 0; j < o.n; ++j) {
        const double h = step * (1.0 + std::abs(x(j)));
        Vec xp = x, xm = x;
        xp(j) += h;
        xm(j) -= h;
        fd.col(j) = (stacked(xp) - stacked(xm)) / (2.0 * h);
      }
      const double floor = 1e-4 * std::max(1.0, fd.cwiseAbs().maxCoeff());
      for (Eigen::Index i = 0; i < fd.rows(); ++i)
        for (Eigen::Index j = 0; j < fd.cols(); ++j)
          rep.max_rel_err = std::max(rep.max_rel_err,
                                     std::abs(J.grad_S(i, j) - fd(i, j)) / std::max(std::abs(fd(i, j)), floor));
      ++rep.tested;
    } catch (const Error&) {
      ++rep.skipped;
    }
  }
  return rep;
}

struct RiStatistics {
  int samples = 0, ri_true = 0, degenerate = 0, ill_conditioned = 0, failed = 0;
  double min_cond = std::numeric_limits<double>::infinity(), max_cond = 0.0;
};

/// How often the relative-interior condition holds at random x.
inline RiStatistics ri_statistics(const BilevelProblem& P, int samples, std::uint64_t seed, double alpha,
                                  double beta) {
  const auto& o = P.lower;
  RiStatistics st;
  Rng rng(seed);
  const Vec base = P.x_typical.size() == o.n ? P.x_typical : Vec::Zero(o.n);
  for (int k = 0; k < samples; ++k) {
    const Vec x = base + 0.5 * P.x_spread * rng.normal_vec(o.n);
    ++st.samples;
    try {
      const auto sol = solve_regularized(o, x, alpha, beta);
      if (sol.rep.degenerate) ++st.degenerate;
      const auto J = jacobian(o, sol);
      st.ri_true += J.ri_flag;
      st.min_cond = std::min(st.min_cond, J.cond_BAB);
      st.max_cond = std::max(st.max_cond, J.cond_BAB);
    } catch (const IllConditionedError&) {
      ++st.ill_conditioned;
    } catch (const Error&) {
      ++st.failed;
    }
  }
  return st;
}

}  // namespace bilevel

#endif  // BILEVEL_SENSITIVITY_HPP
