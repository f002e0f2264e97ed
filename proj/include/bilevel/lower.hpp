#ifndef BILEVEL_LOWER_HPP
#define BILEVEL_LOWER_HPP

// Doubly regularized lower level
//
//   minimize_y  F(y) = g(x,y) + e_alpha h(G(x,y)) + (beta/2)|y|^2
//
// with dual recovery p = (G(x,y) - w)/alpha, w the prox point of h at G.

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "bilevel/common.hpp"
#include "bilevel/poly.hpp"

namespace bilevel {

struct LowerLevelOracles {
  Eigen::Index n = 0, m = 0, s = 0;

  std::function<double(const Vec&, const Vec&)> g_val;
  std::function<Vec(const Vec&, const Vec&)> g_grad_y;
  std::function<Mat(const Vec&, const Vec&)> g_hess_yy;
  std::function<Mat(const Vec&, const Vec&)> g_mixed_xy;  // m x n

  std::function<Vec(const Vec&, const Vec&)> G_val;
  std::function<Mat(const Vec&, const Vec&)> G_jac_y;  // s x m
  std::function<Mat(const Vec&, const Vec&)> G_jac_x;  // s x n
  // sum_i p_i grad^2_yy g_i and grad_x(grad_y G' p); leave empty when the
  // corresponding contraction vanishes (G affine in y, grad_y G free of x)
  std::function<Mat(const Vec&, const Vec&, const Vec&)> G_hess_yy_contract;
  std::function<Mat(const Vec&, const Vec&, const Vec&)> G_mixed_contract;

  poly::EpiPolyhedralFn h;

  Mat G_hess(const Vec& x, const Vec& y, const Vec& p) const {
    return G_hess_yy_contract ? G_hess_yy_contract(x, y, p) : Mat::Zero(m, m);
  }
  Mat G_mixed(const Vec& x, const Vec& y, const Vec& p) const {
    return G_mixed_contract ? G_mixed_contract(x, y, p) : Mat::Zero(m, n);
  }

  void validate() const {
    require(n > 0 && m > 0 && s > 0, "lower level: dimensions must be positive");
    require(g_val && g_grad_y && g_hess_yy && g_mixed_xy && G_val && G_jac_y && G_jac_x,
            "lower level: missing oracle");
    check_dim(h.s(), s, "lower level: h dimension");
  }
};

struct PrimalDualSolution {
  Vec x, y, p, w_prox;
  poly::ActiveSets active;
  poly::MultiplierRepresentation rep;
  double grad_norm = 0.0;
  double alpha = 0.0, beta = 0.0;
  int iterations = 0;
};

enum class LowerMethod { newton, accelerated };

struct LowerOptions {
  double tol_ll = -1.0;  // <= 0 selects 1e-9 (1 + |grad F(y0)|)
  int max_iter = 50000;
  LowerMethod method = LowerMethod::newton;
  double tol_act = poly::default_tol_act;
};

namespace detail {

struct LowerEval {
  double F;
  Vec grad;
  poly::ProxResult prox;
  double scale;  // magnitude of the terms summed into grad, for the noise floor
};

inline bool below_spacing(const Vec& d, const Vec& y) {
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double a = std::abs(y(i));
    if (std::abs(d(i)) > 2.0 * (std::nextafter(a, std::numeric_limits<double>::infinity()) - a)) return false;
  }
  return true;
}

inline LowerEval lower_eval(const LowerLevelOracles& o, const Vec& x, const Vec& y, double alpha,
                            double beta) {
  const Vec G = o.G_val(x, y);
  check_dim(G.size(), o.s, "G_val");
  auto pr = poly::prox(o.h, G, alpha);
  const Mat Jy = o.G_jac_y(x, y);
  const Vec gg = o.g_grad_y(x, y);
  const Vec jp = Jy.transpose() * pr.p;
  LowerEval e{o.g_val(x, y) + pr.value + 0.5 * beta * y.squaredNorm(), gg + jp + beta * y,
              std::move(pr), 0.0};
  // (G - w)/alpha cancels only in blocks without a closed-form envelope
  // gradient; there the error is of order eps |G| / alpha.
  double g_cancel = 0.0;
  for (const auto& blk : o.h.blocks()) {
    if (blk.kind == poly::BlockKind::linear_box || blk.kind == poly::BlockKind::scaled_max) continue;
    for (auto c : blk.coords) g_cancel = std::max(g_cancel, std::abs(G(c)));
  }
  e.scale = gg.lpNorm<Eigen::Infinity>() + jp.lpNorm<Eigen::Infinity>() +
            beta * y.lpNorm<Eigen::Infinity>() + Jy.lpNorm<Eigen::Infinity>() * g_cancel / alpha;
  return e;
}

/// Generalized Hessian of F is H + M'M/alpha with M = B_z' Jy: the envelope
/// gradient has Jacobian B_z B_z'/alpha on the face identified by the prox
/// point. The Newton system is solved in the bordered form
///   [H  M'; M  -alpha I] (d, u) = (-grad, 0),
/// which stays well conditioned as alpha -> 0.
inline Vec newton_direction(const LowerLevelOracles& o, const Vec& x, const Vec& y, const LowerEval& ev,
                            double alpha, double beta, double tol_act) {
  const Mat Jy = o.G_jac_y(x, y);
  Mat H = o.g_hess_yy(x, y) + o.G_hess(x, y, ev.prox.p);
  H.diagonal().array() += beta;
  H = 0.5 * (H + H.transpose());
  // Closed-form blocks hit their faces exactly, so the face of the prox map
  // is read at a tolerance on the scale of alpha; tol_act would call
  // saturated coordinates within 1e-6 of a kink active once alpha is tiny.
  auto act = poly::active_sets(o.h, ev.prox.w, tol_act);
  const double tight = std::min(tol_act, 1e-6 * alpha * (1.0 + ev.prox.p.lpNorm<Eigen::Infinity>()));
  if (tight < tol_act) {
    const auto fine = poly::active_sets(o.h, ev.prox.w, tight);
    for (std::size_t b = 0; b < o.h.blocks().size(); ++b) {
      const auto kind = o.h.blocks()[b].kind;
      if (kind != poly::BlockKind::linear_box && kind != poly::BlockKind::scaled_max) continue;
      act.J_active[b] = fine.J_active[b];
      act.I_active[b] = fine.I_active[b];
    }
  }
  const auto cb = poly::critical_cone_basis(o.h, ev.prox.w, ev.prox.p, act);
  const auto m = o.m;
  if (cb.rank == 0) {
    Eigen::LLT<Mat> llt(H);
    if (llt.info() == Eigen::Success) return llt.solve(-ev.grad);
    return -ev.grad;
  }
  const Mat M = cb.B_z.transpose() * Jy;
  const auto r = M.rows();
  if (alpha >= 1e-4) {
    Mat Hf = H;
    Hf.noalias() += M.transpose() * M / alpha;
    Eigen::LLT<Mat> llt(Hf);
    if (llt.info() == Eigen::Success) return llt.solve(-ev.grad);
  }
  Mat K = Mat::Zero(m + r, m + r);
  K.topLeftCorner(m, m) = H;
  K.topRightCorner(m, r) = M.transpose();
  K.bottomLeftCorner(r, m) = M;
  K.bottomRightCorner(r, r).diagonal().setConstant(-alpha);
  Vec rhs = Vec::Zero(m + r);
  rhs.head(m) = -ev.grad;
  Eigen::PartialPivLU<Mat> lu(K);
  const Vec sol = lu.solve(rhs);
  if (!sol.allFinite()) return -ev.grad;
  return sol.head(m);
}

}  // namespace detail

/// Lagrangian g + (beta/2)|y|^2 + <G,p> - h*(p) - (alpha/2)|p|^2.
inline double lagrangian_value(const LowerLevelOracles& o, const Vec& x, const Vec& y, const Vec& p,
                               double alpha, double beta) {
  const auto hs = poly::conjugate(o.h, p, 1e-7);
  if (hs.is_pos_infinity()) throw Error(ErrorKind::invalid_dual, "lagrangian_value: h*(p) = +inf");
  return o.g_val(x, y) + 0.5 * beta * y.squaredNorm() + o.G_val(x, y).dot(p) - hs.value() -
         0.5 * alpha * p.squaredNorm();
}

/// Gradient in y of the Lagrangian at fixed p.
inline Vec lagrangian_grad_y(const LowerLevelOracles& o, const Vec& x, const Vec& y, const Vec& p,
                             double beta) {
  return o.g_grad_y(x, y) + o.G_jac_y(x, y).transpose() * p + beta * y;
}

inline PrimalDualSolution solve_regularized(const LowerLevelOracles& o, const Vec& x, double alpha,
                                            double beta, const LowerOptions& opts = {},
                                            const std::optional<Vec>& y0 = std::nullopt) {
  o.validate();
  check_dim(x.size(), o.n, "solve_regularized: x");
  require(alpha > 0.0 && beta > 0.0, "solve_regularized: alpha and beta must be positive");
  Vec y = y0 ? *y0 : Vec::Zero(o.m);
  check_dim(y.size(), o.m, "solve_regularized: y0");

  auto ev = detail::lower_eval(o, x, y, alpha, beta);
  const double tol = opts.tol_ll > 0.0 ? opts.tol_ll : 1e-9 * (1.0 + ev.grad.norm());
  auto floor_of = [](const detail::LowerEval& e) {
    return 16.0 * std::numeric_limits<double>::epsilon() * (1.0 + e.scale);
  };

  Vec best_y = y;
  double best_g = ev.grad.norm();
  int iter = 0;
  bool converged = best_g <= std::max(tol, floor_of(ev));

  if (opts.method == LowerMethod::newton) {
    for (; iter < opts.max_iter && !converged; ++iter) {
      Vec d = detail::newton_direction(o, x, y, ev, alpha, beta, opts.tol_act);
      double slope = ev.grad.dot(d);
      if (!(slope < 0.0)) {
        d = -ev.grad;
        slope = -ev.grad.squaredNorm();
      } else if (detail::below_spacing(d, y)) {
        // the Newton correction rounds away: y is as good as doubles allow
        converged = true;
        break;
      }
      // Full semismooth Newton step when it cuts the residual below 0.9 of
      // the best seen so far (each such acceptance shrinks best_g, so the two
      // step types cannot cycle). Otherwise an exact line search on the
      // convex phi(t) = F(y + t d): any t with phi'(t) <= 0 decreases F, so
      // only derivative signs are used; F itself is too noisy near the
      // solution.
      double t = 1.0;
      auto et = detail::lower_eval(o, x, y + d, alpha, beta);
      double dt = et.grad.dot(d);
      bool accepted = et.grad.norm() <= 0.9 * best_g;
      if (!accepted) {
        double lo = 0.0;
        for (int ex = 0; ex < 60 && dt < 0.0; ++ex) {
          lo = t;
          t *= 2.0;
          et = detail::lower_eval(o, x, y + t * d, alpha, beta);
          dt = et.grad.dot(d);
        }
        // Illinois iterations to the sign change of phi', keeping the
        // descending side: stopping just before a kink leaves the next Newton
        // step on the current face of the envelope.
        double hi = t, dhi = dt;
        if (dt > 0.0) {
          double dlo = lo > 0.0 ? detail::lower_eval(o, x, y + lo * d, alpha, beta).grad.dot(d) : slope;
          int side = 0;
          for (int bt = 0; bt < 100 && hi - lo > 1e-10 * hi; ++bt) {
            double mid = lo - dlo * (hi - lo) / (dhi - dlo);
            if (!(mid > lo && mid < hi)) mid = 0.5 * (lo + hi);
            const double dm = detail::lower_eval(o, x, y + mid * d, alpha, beta).grad.dot(d);
            if (dm == 0.0) {
              lo = hi = mid;
              break;
            }
            if (dm < 0.0) {
              lo = mid;
              dlo = dm;
              if (side == -1) dhi *= 0.5;
              side = -1;
            } else {
              hi = mid;
              dhi = dm;
              if (side == 1) dlo *= 0.5;
              side = 1;
            }
          }
          t = lo;
          if (lo > 0.0) et = detail::lower_eval(o, x, y + t * d, alpha, beta);
        }
        accepted = t > 0.0;
      }
      if (accepted) {
        y += t * d;
        ev = std::move(et);
      }
      const double gn = ev.grad.norm();
      if (gn < best_g) {
        best_g = gn;
        best_y = y;
      }
      converged = gn <= std::max(tol, floor_of(ev));
      if (!accepted) break;
    }
  } else {
    // FISTA with backtracking on a local Lipschitz estimate and adaptive restart.
    auto norm_bound = [](const Mat& M) {
      return std::sqrt(M.cwiseAbs().colwise().sum().maxCoeff() * M.cwiseAbs().rowwise().sum().maxCoeff());
    };
    const double jn = norm_bound(o.G_jac_y(x, y));
    double L = norm_bound(o.g_hess_yy(x, y)) + norm_bound(o.G_hess(x, y, ev.prox.p)) +
               jn * jn / alpha + beta;
    L = std::max(L, 1e-12);
    // Gradient-based tests only: function values stall at sqrt(eps) accuracy.
    Vec yk = y, zk = y;
    double tk = 1.0;
    for (; iter < opts.max_iter && !converged; ++iter) {
      auto ez = detail::lower_eval(o, x, zk, alpha, beta);
      Vec yn;
      detail::LowerEval en;
      for (int bt = 0; bt < 60; ++bt) {
        yn = zk - ez.grad / L;
        en = detail::lower_eval(o, x, yn, alpha, beta);
        if ((en.grad - ez.grad).norm() <= L * (yn - zk).norm() * (1.0 + 1e-12)) break;
        L *= 2.0;
      }
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
      if (ez.grad.dot(yn - yk) > 0.0) {
        zk = yn;  // restart
        tk = 1.0;
      } else {
        zk = yn + ((tk - 1.0) / tn) * (yn - yk);
        tk = tn;
      }
      yk = yn;
      const double gn = en.grad.norm();
      if (gn < best_g) {
        best_g = gn;
        best_y = yn;
      }
      converged = gn <= std::max(tol, floor_of(en));
      L *= 0.95;
    }
    y = best_y;
    ev = detail::lower_eval(o, x, y, alpha, beta);
  }

  if (!converged) {
    char msg[96];
    std::snprintf(msg, sizeof msg, "solve_regularized: no convergence (|grad F| = %.3e, tol = %.3e)", best_g, tol);
    throw ConvergenceError(msg, best_y, best_g);
  }

  PrimalDualSolution sol;
  sol.x = x;
  sol.y = y;
  sol.p = ev.prox.p;
  sol.w_prox = ev.prox.w;
  sol.alpha = alpha;
  sol.beta = beta;
  sol.grad_norm = ev.grad.norm();
  sol.iterations = iter;
  sol.active = poly::active_sets(o.h, sol.w_prox, opts.tol_act);
  sol.rep = poly::multiplier_representation(o.h, sol.w_prox, sol.p, sol.active);
  return sol;
}

/// Near-exact lower-level solve at alpha = beta = reg, by continuation from
/// 1e-2 down to reg with warm starts.
inline PrimalDualSolution solve_near_exact(const LowerLevelOracles& o, const Vec& x, double reg = 1e-8,
                                           const LowerOptions& opts = {},
                                           const std::optional<Vec>& y0 = std::nullopt) {
  std::optional<Vec> warm = y0;
  double r = std::max(reg, 1e-2);
  for (;;) {
    auto sol = solve_regularized(o, x, r, r, opts, warm);
    if (r <= reg) return sol;
    warm = sol.y;
    r = r * 1e-2 <= reg * (1.0 + 1e-9) ? reg : r * 1e-2;
  }
}

}  // namespace bilevel

#endif  // BILEVEL_LOWER_HPP
