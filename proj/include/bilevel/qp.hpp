#ifndef BILEVEL_QP_HPP
#define BILEVEL_QP_HPP

// Dense convex QP (Mehrotra predictor-corrector interior point with an
// active-set polish) and Wolfe's minimum-norm-point algorithm.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/common.hpp"

namespace bilevel::qp {

/// minimize 0.5 x'Px + q'x  s.t.  G_in x <= h_in,  A_eq x = b_eq
struct DenseQP {
  Mat P;
  Vec q;
  Mat G_in;
  Vec h_in;
  Mat A_eq;
  Vec b_eq;

  Eigen::Index num_vars() const { return q.size(); }
  Eigen::Index num_ineq() const { return h_in.size(); }
  Eigen::Index num_eq() const { return b_eq.size(); }

  /// Fills empty constraint blocks with correctly shaped zero-row matrices.
  void normalize() {
    const auto n = q.size();
    if (P.size() == 0) P = Mat::Zero(n, n);
    if (G_in.size() == 0 && h_in.size() == 0) G_in.resize(0, n);
    if (A_eq.size() == 0 && b_eq.size() == 0) A_eq.resize(0, n);
  }

  void validate() const {
    const auto n = q.size();
    check_dim(P.rows(), n, "qp P rows");
    check_dim(P.cols(), n, "qp P cols");
    check_dim(G_in.cols(), n, "qp G_in cols");
    check_dim(G_in.rows(), h_in.size(), "qp G_in rows");
    check_dim(A_eq.cols(), n, "qp A_eq cols");
    check_dim(A_eq.rows(), b_eq.size(), "qp A_eq rows");
    const double asym = (P - P.transpose()).cwiseAbs().maxCoeff();
    require(n == 0 || asym <= 1e-12 * (1.0 + P.cwiseAbs().maxCoeff()),
            "qp: P is not symmetric");
  }
};

enum class QPStatus { optimal, infeasible, unbounded, max_iter };

inline const char* to_string(QPStatus s) {
  switch (s) {
    case QPStatus::optimal: return "optimal";
    case QPStatus::infeasible: return "infeasible";
    case QPStatus::unbounded: return "unbounded";
    case QPStatus::max_iter: return "max_iter";
  }
  return "unknown";
}

struct QPSolution {
  Vec primal;
  Vec dual_in;
  Vec dual_eq;
  double kkt_residual = 0.0;
  double objective = 0.0;
  QPStatus status = QPStatus::max_iter;
  int iterations = 0;
};

/// Scaled KKT residual: max over stationarity, primal feasibility and the
/// natural complementarity residual |min(z_i, h_i - G_i x)|, each divided
/// by (1 + magnitude of the terms involved).
inline double kkt_residual(const DenseQP& qp, const Vec& x, const Vec& z,
                           const Vec& y) {
  const Vec Px = qp.P * x;
  const Vec Gtz = qp.G_in.transpose() * z;
  const Vec Aty = qp.A_eq.transpose() * y;
  auto inf = [](const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; };

  const Vec rd = Px + qp.q + Gtz + Aty;
  double res = inf(rd) / (1.0 + std::max({inf(Px), inf(qp.q), inf(Gtz), inf(Aty)}));

  if (qp.num_eq() > 0) {
    const Vec Ax = qp.A_eq * x;
    res = std::max(res, inf(Ax - qp.b_eq) / (1.0 + std::max(inf(Ax), inf(qp.b_eq))));
  }
  if (qp.num_ineq() > 0) {
    const Vec Gx = qp.G_in * x;
    const Vec slack = qp.h_in - Gx;
    const double scale_i = 1.0 + std::max(inf(Gx), inf(qp.h_in));
    res = std::max(res, (-slack).cwiseMax(0.0).maxCoeff() / scale_i);
    const double scale_c = 1.0 + std::max(inf(z), inf(qp.h_in));
    double comp = 0.0;
    for (Eigen::Index i = 0; i < slack.size(); ++i)
      comp = std::max(comp, std::abs(std::min(z(i), slack(i))));
    res = std::max(res, comp / scale_c);
  }
  return res;
}

namespace detail {

/// Indices of a maximal linearly independent subset of the rows of A.
inline std::vector<Eigen::Index> independent_rows(const Mat& A) {
  std::vector<Eigen::Index> keep;
  if (A.rows() == 0) return keep;
  Eigen::ColPivHouseholderQR<Mat> qr(A.transpose());
  qr.setThreshold(1e-12);
  const auto rank = qr.rank();
  for (Eigen::Index k = 0; k < rank; ++k) keep.push_back(qr.colsPermutation().indices()(k));
  std::sort(keep.begin(), keep.end());
  return keep;
}

/// Solves the symmetric saddle system [[H, A'], [A, 0]] with a tiny
/// regularization and iterative refinement against the unregularized matrix.
class SaddleSolver {
 public:
  SaddleSolver(const Mat& H, const Mat& A) : n_(H.rows()), m_(A.rows()) {
    K_.resize(n_ + m_, n_ + m_);
    K_.topLeftCorner(n_, n_) = H;
    K_.topRightCorner(n_, m_) = A.transpose();
    K_.bottomLeftCorner(m_, n_) = A;
    K_.bottomRightCorner(m_, m_).setZero();
    const double scale = 1.0 + (K_.size() ? K_.cwiseAbs().maxCoeff() : 0.0);
    Mat Kreg = K_;
    const double delta = 1e-14 * scale;
    Kreg.diagonal().head(n_).array() += delta;
    Kreg.diagonal().tail(m_).array() -= delta;
    lu_.compute(Kreg);
  }

  Vec solve(const Vec& rhs) const {
    Vec sol = lu_.solve(rhs);
    for (int it = 0; it < 2; ++it) {
      const Vec r = rhs - K_ * sol;
      sol += lu_.solve(r);
    }
    return sol;
  }

 private:
  Eigen::Index n_, m_;
  Mat K_;
  Eigen::PartialPivLU<Mat> lu_;
};

inline double max_step(const Vec& v, const Vec& dv) {
  double a = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (dv(i) < 0.0) a = std::min(a, -v(i) / dv(i));
  return a;
}

inline double objective(const DenseQP& qp, const Vec& x) {
  return 0.5 * x.dot(qp.P * x) + qp.q.dot(x);
}

/// Equality-constrained solve on an active set guess; returns false when
/// the candidate is not an improvement.
inline bool polish(const DenseQP& qp, const Mat& Ar, const Vec& br,
                   const std::vector<Eigen::Index>& eq_rows, Vec& x, Vec& z,
                   Vec& y, double& residual) {
  const auto n = qp.num_vars();
  const Vec slack = qp.h_in - qp.G_in * x;
  std::vector<Eigen::Index> act;
  for (Eigen::Index i = 0; i < qp.num_ineq(); ++i)
    if (z(i) > slack(i)) act.push_back(i);
  const auto na = static_cast<Eigen::Index>(act.size());
  const auto me = Ar.rows();
  if (n + me + na > 800) return false;

  Mat K = Mat::Zero(n + me + na, n + me + na);
  Vec rhs(n + me + na);
  K.topLeftCorner(n, n) = qp.P;
  K.block(0, n, n, me) = Ar.transpose();
  K.block(n, 0, me, n) = Ar;
  rhs.head(n) = -qp.q;
  rhs.segment(n, me) = br;
  for (Eigen::Index k = 0; k < na; ++k) {
    K.block(0, n + me + k, n, 1) = qp.G_in.row(act[k]).transpose();
    K.block(n + me + k, 0, 1, n) = qp.G_in.row(act[k]);
    rhs(n + me + k) = qp.h_in(act[k]);
  }
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(K);
  const Vec sol = cod.solve(rhs);
  if (!sol.allFinite()) return false;

  Vec xc = sol.head(n);
  Vec zc = Vec::Zero(qp.num_ineq());
  Vec yc = Vec::Zero(qp.num_eq());
  for (Eigen::Index k = 0; k < na; ++k) zc(act[k]) = std::max(0.0, sol(n + me + k));
  for (Eigen::Index k = 0; k < me; ++k) yc(eq_rows[k]) = sol(n + k);
  const double r = kkt_residual(qp, xc, zc, yc);
  if (r < residual) {
    x = std::move(xc);
    z = std::move(zc);
    y = std::move(yc);
    residual = r;
    return true;
  }
  return false;
}

}  // namespace detail

inline QPSolution solve_qp(DenseQP problem, double tol = 1e-8, int max_iter = 200) {
  problem.normalize();
  problem.validate();
  const DenseQP& qp = problem;
  const auto n = qp.num_vars();
  const auto mi = qp.num_ineq();
  const auto me = qp.num_eq();

  QPSolution out;
  out.dual_in = Vec::Zero(mi);
  out.dual_eq = Vec::Zero(me);
  out.primal = Vec::Zero(n);

  // Redundant equality rows are dropped after a consistency check.
  const auto eq_rows = detail::independent_rows(qp.A_eq);
  const auto mr = static_cast<Eigen::Index>(eq_rows.size());
  Mat Ar(mr, n);
  Vec br(mr);
  for (Eigen::Index k = 0; k < mr; ++k) {
    Ar.row(k) = qp.A_eq.row(eq_rows[k]);
    br(k) = qp.b_eq(eq_rows[k]);
  }
  if (me > 0) {
    const Vec xln = qp.A_eq.completeOrthogonalDecomposition().solve(qp.b_eq);
    const double bscale = 1.0 + qp.b_eq.cwiseAbs().maxCoeff();
    if ((qp.A_eq * xln - qp.b_eq).cwiseAbs().maxCoeff() > 1e-9 * bscale) {
      out.status = QPStatus::infeasible;
      out.kkt_residual = std::numeric_limits<double>::infinity();
      return out;
    }
  }

  auto finish = [&](Vec x, Vec z, Vec yr, int iters) {
    Vec y = Vec::Zero(me);
    for (Eigen::Index k = 0; k < mr; ++k) y(eq_rows[k]) = yr(k);
    double res = kkt_residual(qp, x, z, y);
    if (res > 1e-3 * tol && mi > 0) detail::polish(qp, Ar, br, eq_rows, x, z, y, res);
    out.primal = std::move(x);
    out.dual_in = std::move(z);
    out.dual_eq = std::move(y);
    out.kkt_residual = res;
    out.objective = detail::objective(qp, out.primal);
    out.iterations = iters;
    out.status = res <= tol ? QPStatus::optimal : QPStatus::max_iter;
    return out;
  };

  if (mi == 0) {
    detail::SaddleSolver kkt(qp.P, Ar);
    Vec rhs(n + mr);
    rhs << -qp.q, br;
    const Vec sol = kkt.solve(rhs);
    Vec x = sol.head(n);
    Vec yr = sol.tail(mr);
    QPSolution s = finish(x, Vec::Zero(0), yr, 1);
    if (s.status != QPStatus::optimal) s.status = QPStatus::unbounded;
    return s;
  }

  const Mat& G = qp.G_in;
  const Vec& h = qp.h_in;
  const double hscale = 1.0 + h.cwiseAbs().maxCoeff();
  const double qscale = 1.0 + qp.q.cwiseAbs().maxCoeff();

  // Initial point: least-squares slack problem, then shift into the interior.
  Vec x, yr, s, z;
  {
    detail::SaddleSolver kkt(qp.P + G.transpose() * G, Ar);
    Vec rhs(n + mr);
    rhs << -qp.q + G.transpose() * h, br;
    const Vec sol = kkt.solve(rhs);
    x = sol.head(n);
    yr = sol.tail(mr);
    s = h - G * x;
    z = -s;
    const double ap = -s.minCoeff();
    if (ap >= -1e-8) s.array() += 1.0 + ap;
    const double ad = -z.minCoeff();
    if (ad >= -1e-8) z.array() += 1.0 + ad;
  }

  Vec best_x = x, best_z = z, best_y = yr;
  double best_res = std::numeric_limits<double>::infinity();
  const double dmi = static_cast<double>(mi);

  for (int iter = 0; iter < max_iter; ++iter) {
    const Vec rd = qp.P * x + qp.q + G.transpose() * z + Ar.transpose() * yr;
    const Vec re = Ar * x - br;
    const Vec ri = G * x + s - h;
    const double mu = s.dot(z) / dmi;

    {
      Vec yfull = Vec::Zero(me);
      for (Eigen::Index k = 0; k < mr; ++k) yfull(eq_rows[k]) = yr(k);
      const double res = kkt_residual(qp, x, z.cwiseMax(0.0), yfull);
      if (res < best_res) {
        best_res = res;
        best_x = x;
        best_z = z.cwiseMax(0.0);
        best_y = yr;
      }
      if (res <= 1e-3 * tol ||
          (res <= tol && mu <= 1e-14 * (1.0 + std::abs(detail::objective(qp, x)))))
        return finish(best_x, best_z, best_y, iter);
    }

    // Farkas certificate for primal infeasibility: G'z + A'y ~ 0, h'z + b'y < 0.
    {
      const double gap = h.dot(z) + br.dot(yr);
      const double nz = std::max(z.cwiseAbs().maxCoeff(), yr.size() ? yr.cwiseAbs().maxCoeff() : 0.0);
      if (gap < 0.0 && nz > 1e6 * qscale) {
        const Vec cert = G.transpose() * z + Ar.transpose() * yr;
        if (cert.cwiseAbs().maxCoeff() <= 1e-7 * (-gap) / hscale) {
          out.status = QPStatus::infeasible;
          out.primal = x;
          out.dual_in = z;
          out.kkt_residual = std::numeric_limits<double>::infinity();
          out.iterations = iter;
          return out;
        }
      }
      // Direction of unboundedness: Px ~ 0, Ax ~ 0, Gx <= 0, q'x < 0.
      const double qx = qp.q.dot(x);
      const double nx = x.cwiseAbs().maxCoeff();
      if (qx < 0.0 && nx > 1e8 * hscale) {
        const double viol = std::max({(qp.P * x).cwiseAbs().maxCoeff(),
                                      mr ? (Ar * x).cwiseAbs().maxCoeff() : 0.0,
                                      (G * x).cwiseMax(0.0).maxCoeff()});
        if (viol <= 1e-7 * (-qx)) {
          out.status = QPStatus::unbounded;
          out.primal = x;
          out.kkt_residual = std::numeric_limits<double>::infinity();
          out.iterations = iter;
          return out;
        }
      }
    }

    const Vec d = z.cwiseQuotient(s);
    const Mat H = qp.P + G.transpose() * d.asDiagonal() * G;
    detail::SaddleSolver kkt(H, Ar);

    auto direction = [&](const Vec& rc, Vec& dx, Vec& dy, Vec& ds, Vec& dz) {
      Vec rhs(n + mr);
      const Vec tmp = (rc + z.cwiseProduct(ri)).cwiseQuotient(s);
      rhs << -rd - G.transpose() * tmp, -re;
      const Vec sol = kkt.solve(rhs);
      dx = sol.head(n);
      dy = sol.tail(mr);
      ds = -ri - G * dx;
      dz = (rc - z.cwiseProduct(ds)).cwiseQuotient(s);
    };

    Vec dx, dy, ds, dz;
    direction(-s.cwiseProduct(z), dx, dy, ds, dz);
    const double a_aff = std::min(detail::max_step(s, ds), detail::max_step(z, dz));
    const double mu_aff = (s + a_aff * ds).dot(z + a_aff * dz) / dmi;
    const double sigma = std::pow(std::max(0.0, mu_aff) / mu, 3.0);

    const Vec rc = Vec::Constant(mi, sigma * mu) - s.cwiseProduct(z) - ds.cwiseProduct(dz);
    direction(rc, dx, dy, ds, dz);
    const double a = 0.99 * std::min(detail::max_step(s, ds), detail::max_step(z, dz));
    if (!(a > 0.0) || !dx.allFinite()) break;

    x += a * dx;
    yr += a * dy;
    s += a * ds;
    z += a * dz;
    s = s.cwiseMax(1e-300);
    z = z.cwiseMax(1e-300);
  }

  QPSolution res = finish(best_x, best_z, best_y, max_iter);
  return res;
}

/// Result of the minimum-norm-point computation on conv{points}.
struct MinNormPoint {
  Vec point;
  Vec weights;
  int iterations = 0;
};

/// max_i (|w|^2 - <w, p_i>); the Wolfe optimality gap of w for conv{p_i}.
inline double wolfe_gap(const Mat& points, const Vec& w) {
  const Vec ip = points.transpose() * w;
  return w.squaredNorm() - ip.minCoeff();
}

inline double wolfe_tolerance(const Mat& points) {
  return 1e-10 * (1.0 + points.colwise().squaredNorm().maxCoeff());
}

/// Minimum-norm element of the convex hull of the columns of `points`
/// (Wolfe 1976). Ties are broken by the lowest column index.
inline MinNormPoint min_norm_point(const Mat& points) {
  const auto dim = points.rows();
  const auto N = points.cols();
  require(N > 0, "min_norm_point: empty point set");
  const double tol = wolfe_tolerance(points);

  const Vec sq = points.colwise().squaredNorm();
  Eigen::Index start = 0;
  for (Eigen::Index i = 1; i < N; ++i)
    if (sq(i) < sq(start)) start = i;

  std::vector<Eigen::Index> corral{start};
  std::vector<double> lam{1.0};
  Vec x = points.col(start);
  int iters = 0;
  const int max_major = static_cast<int>(10 * N + 100);

  auto affine_minimizer = [&](const std::vector<Eigen::Index>& S) {
    const auto k = static_cast<Eigen::Index>(S.size());
    Mat K = Mat::Zero(k + 1, k + 1);
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index b = 0; b < k; ++b) K(a, b) = points.col(S[a]).dot(points.col(S[b]));
      K(a, k) = 1.0;
      K(k, a) = 1.0;
    }
    Vec rhs = Vec::Zero(k + 1);
    rhs(k) = 1.0;
    const Vec sol = K.completeOrthogonalDecomposition().solve(rhs);
    return Vec(sol.head(k));
  };

  for (; iters < max_major; ++iters) {
    const Vec ip = points.transpose() * x;
    Eigen::Index j = 0;
    for (Eigen::Index i = 1; i < N; ++i)
      if (ip(i) < ip(j)) j = i;
    if (ip(j) >= x.squaredNorm() - tol) break;
    if (std::find(corral.begin(), corral.end(), j) != corral.end()) break;
    corral.push_back(j);
    lam.push_back(0.0);

    for (int minor = 0; minor <= static_cast<int>(N) + 10; ++minor) {
      const Vec alpha = affine_minimizer(corral);
      if (alpha.minCoeff() > 1e-12) {
        for (std::size_t k = 0; k < corral.size(); ++k) lam[k] = alpha(k);
        break;
      }
      double theta = 1.0;
      for (std::size_t k = 0; k < corral.size(); ++k) {
        if (alpha(k) <= 1e-12) {
          const double denom = lam[k] - alpha(k);
          if (denom > 0.0) theta = std::min(theta, lam[k] / denom);
        }
      }
      std::vector<Eigen::Index> nc;
      std::vector<double> nl;
      Eigen::Index drop = -1;
      double smallest = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < corral.size(); ++k) {
        const double v = theta * alpha(k) + (1.0 - theta) * lam[k];
        lam[k] = v;
        if (v < smallest) {
          smallest = v;
          drop = static_cast<Eigen::Index>(k);
        }
      }
      for (std::size_t k = 0; k < corral.size(); ++k) {
        if (lam[k] > 1e-14 && static_cast<Eigen::Index>(k) != drop) {
          nc.push_back(corral[k]);
          nl.push_back(lam[k]);
        } else if (static_cast<Eigen::Index>(k) == drop && lam[k] > 1e-14) {
          // keep strictly positive weights; the minimum one is removed only if zero
          nc.push_back(corral[k]);
          nl.push_back(lam[k]);
        }
      }
      if (nc.size() == corral.size()) {
        // numerical stall: drop the smallest weight explicitly
        nc.erase(nc.begin() + drop);
        nl.erase(nl.begin() + drop);
      }
      corral = std::move(nc);
      lam = std::move(nl);
      if (corral.empty()) {
        corral.push_back(j);
        lam.assign(1, 1.0);
      }
      double total = 0.0;
      for (double v : lam) total += v;
      for (double& v : lam) v /= total;
    }
    x = Vec::Zero(dim);
    for (std::size_t k = 0; k < corral.size(); ++k) x += lam[k] * points.col(corral[k]);
  }

  MinNormPoint out;
  out.weights = Vec::Zero(N);
  for (std::size_t k = 0; k < corral.size(); ++k) out.weights(corral[k]) = lam[k];
  out.point = x;
  out.iterations = iters;

  if (wolfe_gap(points, x) > tol) {
    // Fallback: QP over the simplex.
    DenseQP prob;
    prob.P = points.transpose() * points;
    prob.P = 0.5 * (prob.P + prob.P.transpose());
    prob.q = Vec::Zero(N);
    prob.G_in = -Mat::Identity(N, N);
    prob.h_in = Vec::Zero(N);
    prob.A_eq = Mat::Ones(1, N);
    prob.b_eq = Vec::Ones(1);
    QPSolution sol = solve_qp(prob, 1e-12, 400);
    Vec wts = sol.primal.cwiseMax(0.0);
    wts /= wts.sum();
    const Vec alt = points * wts;
    if (wolfe_gap(points, alt) < wolfe_gap(points, x)) {
      out.point = alt;
      out.weights = wts;
    }
  }
  return out;
}

inline MinNormPoint min_norm_point(const std::vector<Vec>& points) {
  require(!points.empty(), "min_norm_point: empty point set");
  Mat M(points.front().size(), static_cast<Eigen::Index>(points.size()));
  for (std::size_t i = 0; i < points.size(); ++i) {
    check_dim(points[i].size(), M.rows(), "min_norm_point point");
    M.col(static_cast<Eigen::Index>(i)) = points[i];
  }
  return min_norm_point(M);
}

}  // namespace bilevel::qp

#endif  // BILEVEL_QP_HPP
