#ifndef BILEVEL_TEST_ORACLES_HPP
#define BILEVEL_TEST_ORACLES_HPP

// Independent reference computations for the test suites. Nothing here calls
// into the library's solvers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// min 0.5 x'Px + q'x s.t. Gx <= h, P positive definite, by projected
/// gradient ascent on the dual over z >= 0.
inline Vec dual_projected_gradient(const Mat& P, const Vec& q, const Mat& G, const Vec& h,
                                   int max_iter = 2'000'000) {
  const Eigen::LLT<Mat> llt(P);
  const Mat PiGt = llt.solve(G.transpose());
  const Mat GPiGt = G * PiGt;
  const double L = Eigen::SelfAdjointEigenSolver<Mat>(GPiGt).eigenvalues().maxCoeff() + 1e-12;
  const Vec Piq = llt.solve(q);
  Vec z = Vec::Zero(G.rows());
  Vec x = -Piq;
  for (int it = 0; it < max_iter; ++it) {
    const Vec grad = G * x - h;
    const Vec zn = (z + grad / L).cwiseMax(0.0);
    const double change = (zn - z).lpNorm<Eigen::Infinity>();
    z = zn;
    x = -Piq - PiGt * z;
    if (change < 1e-15) break;
  }
  return x;
}

/// Euclidean projection onto {x >= 0, sum x = 1} by sorting.
inline Vec simplex_projection(const Vec& v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0, tau = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    cum += u[k];
    const double t = (cum - 1.0) / static_cast<double>(k + 1);
    if (u[k] - t > 0) tau = t;
  }
  return (v.array() - tau).cwiseMax(0.0);
}

/// Projection onto {x >= 0, sum x <= 1}.
inline Vec capped_projection(const Vec& v) {
  const Vec c = v.cwiseMax(0.0);
  return c.sum() <= 1.0 ? c : simplex_projection(v);
}

/// argmin_d 1/2|d|^2 + rho max_i (f + <w_i,d>) + sum_k max(0, max_j c_k + <g_kj,d>)
/// through its dual: lambda on the simplex, u_k on the capped simplex,
/// d = -(rho W lambda + sum_k G_k u_k). Accelerated projected ascent.
inline Vec sampled_model_argmin(const Mat& W, double rho, double f, const std::vector<double>& c,
                                const std::vector<Mat>& G, int iters = 200000) {
  const auto n = W.rows();
  Eigen::Index cols = W.cols();
  for (const auto& g : G) cols += g.cols();
  Mat K(n, cols);  // d = -K z
  K.leftCols(W.cols()) = rho * W;
  Eigen::Index off = W.cols();
  for (const auto& g : G) {
    K.middleCols(off, g.cols()) = g;
    off += g.cols();
  }
  const double L = Eigen::JacobiSVD<Mat>(K).singularValues()(0);
  const double step = 1.0 / (L * L + 1e-12);
  Vec lin(cols);
  lin.head(W.cols()).setConstant(rho * f);
  off = W.cols();
  for (std::size_t k = 0; k < G.size(); ++k) {
    lin.segment(off, G[k].cols()).setConstant(c[k]);
    off += G[k].cols();
  }
  auto project = [&](const Vec& z) {
    Vec out(cols);
    out.head(W.cols()) = simplex_projection(z.head(W.cols()));
    Eigen::Index o = W.cols();
    for (const auto& g : G) {
      out.segment(o, g.cols()) = capped_projection(z.segment(o, g.cols()));
      o += g.cols();
    }
    return out;
  };
  Vec z = project(Vec::Constant(cols, 1.0 / static_cast<double>(cols)));
  Vec zp = z, yk = z;
  double t = 1.0;
  for (int it = 0; it < iters; ++it) {
    const Vec grad = lin - K.transpose() * (K * yk);
    zp = z;
    z = project(yk + step * grad);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    yk = z + ((t - 1.0) / tn) * (z - zp);
    t = tn;
  }
  return -K * z;
}

/// Minimises a convex function of barycentric weights over a triangle by
/// successively refined grids.
inline double grid_min_triangle(const std::function<double(double, double)>& f) {
  double best = std::numeric_limits<double>::infinity(), bu = 0, bv = 0;
  double h = 0.05;
  double lo_u = 0, hi_u = 1, lo_v = 0, hi_v = 1;
  for (int level = 0; level < 14; ++level) {
    for (double u = lo_u; u <= hi_u + 1e-15; u += h) {
      for (double v = lo_v; v <= hi_v + 1e-15; v += h) {
        const double uu = std::clamp(u, 0.0, 1.0);
        const double vv = std::clamp(std::min(v, 1.0 - uu), 0.0, 1.0);
        const double val = f(uu, vv);
        if (val < best) {
          best = val;
          bu = uu;
          bv = vv;
        }
      }
    }
    lo_u = bu - 2 * h;
    hi_u = bu + 2 * h;
    lo_v = bv - 2 * h;
    hi_v = bv + 2 * h;
    h /= 4;
  }
  return best;
}

/// Minimum norm over conv of the columns of pts (3-D), by exhaustive grid
/// search on every triangle of points plus an origin-containment test on
/// every tetrahedron.
inline double min_norm_by_face_grid(const Mat& pts) {
  const auto N = pts.cols();
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < N; ++i) best = std::min(best, pts.col(i).norm());
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = i + 1; j < N; ++j)
      for (Eigen::Index k = j + 1; k < N; ++k) {
        const Vec a = pts.col(i), b = pts.col(j), c = pts.col(k);
        best = std::min(best, grid_min_triangle([&](double u, double v) {
          return (u * a + v * b + (1 - u - v) * c).norm();
        }));
      }
  if (pts.rows() == 3) {
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index j = i + 1; j < N; ++j)
        for (Eigen::Index k = j + 1; k < N; ++k)
          for (Eigen::Index l = k + 1; l < N; ++l) {
            Eigen::Matrix4d M;
            M.topRows<3>() << pts.col(i), pts.col(j), pts.col(k), pts.col(l);
            M.row(3).setOnes();
            if (std::abs(M.determinant()) < 1e-12) continue;
            const Eigen::Vector4d lam = M.partialPivLu().solve(Eigen::Vector4d(0, 0, 0, 1));
            if (lam.minCoeff() >= 0.0) return 0.0;
          }
  }
  return best;
}

/// Scalar soft thresholding.
inline double soft_threshold(double z, double t) {
  return z > t ? z - t : (z < -t ? z + t : 0.0);
}

/// argmin over w in a box of phi(w) for 2-D w by refined grid search.
inline Vec grid_argmin_2d(const std::function<double(double, double)>& phi, Vec center,
                          double radius) {
  Vec best = center;
  double bval = phi(center(0), center(1));
  double h = radius / 20;
  // slow zoom: a fast one can strand the window off a narrow kink valley
  for (int level = 0; level < 160; ++level) {
    const Vec c = best;
    for (int a = -20; a <= 20; ++a)
      for (int b = -20; b <= 20; ++b) {
        const double u = c(0) + a * h, v = c(1) + b * h;
        const double val = phi(u, v);
        if (val < bval) {
          bval = val;
          best << u, v;
        }
      }
    h *= 0.8;
  }
  return best;
}

/// prox of max_j(<a_j,w> - alpha_j) + indicator(Bw <= beta) by brute-force
/// enumeration of active sets of the epigraph QP (small dimensions only).
inline Vec prox_by_enumeration(const Mat& A, const Vec& alpha, const Mat& B, const Vec& beta,
                               const Vec& z, double lam) {
  const auto n = z.size();
  const auto nc = A.rows() + B.rows();
  Mat C = Mat::Zero(nc, n + 1);
  Vec d(nc);
  C.topLeftCorner(A.rows(), n) = A;
  C.block(0, n, A.rows(), 1).setConstant(-1.0);
  d.head(A.rows()) = alpha;
  if (B.rows()) {
    C.bottomLeftCorner(B.rows(), n) = B;
    d.tail(B.rows()) = beta;
  }
  Mat P = Mat::Zero(n + 1, n + 1);
  P.topLeftCorner(n, n) = Mat::Identity(n, n) / lam;
  Vec q = Vec::Zero(n + 1);
  q.head(n) = -z / lam;
  q(n) = 1.0;
  for (unsigned mask = 1; mask < (1u << nc); ++mask) {
    std::vector<int> S;
    for (int i = 0; i < nc; ++i)
      if (mask & (1u << i)) S.push_back(i);
    if (static_cast<Eigen::Index>(S.size()) > n + 1) continue;
    const auto k = static_cast<Eigen::Index>(S.size());
    Mat K = Mat::Zero(n + 1 + k, n + 1 + k);
    Vec rhs(n + 1 + k);
    K.topLeftCorner(n + 1, n + 1) = P;
    rhs.head(n + 1) = -q;
    for (Eigen::Index r = 0; r < k; ++r) {
      K.block(n + 1 + r, 0, 1, n + 1) = C.row(S[r]);
      K.block(0, n + 1 + r, n + 1, 1) = C.row(S[r]).transpose();
      rhs(n + 1 + r) = d(S[r]);
    }
    Eigen::FullPivLU<Mat> lu(K);
    if (!lu.isInvertible()) continue;
    const Vec sol = lu.solve(rhs);
    const Vec x = sol.head(n + 1);
    if ((C * x - d).maxCoeff() > 1e-10) continue;
    if (k > 0 && sol.tail(k).minCoeff() < -1e-10) continue;
    return x.head(n);
  }
  return Vec::Constant(n, std::numeric_limits<double>::quiet_NaN());
}

/// Central difference Jacobian of a vector map.
inline Mat central_jacobian(const std::function<Vec(const Vec&)>& F, const Vec& x, double rel_step) {
  const Vec f0 = F(x);
  Mat J(f0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = rel_step * (1.0 + std::abs(x(j)));
    Vec xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    J.col(j) = (F(xp) - F(xm)) / (2 * h);
  }
  return J;
}

/// Example 3 closed form: solution y of the regularized lower level.
inline double example3_Y(double x, double a, double b) {
  const double x1 = (2 + b) / (1 + b);
  const double x2 = (1 + 100 * (2 * a + b * a + 1)) / (3 * a + a * b + 2);
  if (x <= x1) return -x / (2 + b);
  if (x < x2) return (1 - (a + 1) * x) / (2 * a + a * b + 1);
  return (-99 - a * x) / (2 * a + a * b + 2);
}

inline double example3_slope(double x, double a, double b) {
  const double x1 = (2 + b) / (1 + b);
  const double x2 = (1 + 100 * (2 * a + b * a + 1)) / (3 * a + a * b + 2);
  if (x <= x1) return -1 / (2 + b);
  if (x < x2) return -(a + 1) / (2 * a + a * b + 1);
  return -a / (2 * a + a * b + 2);
}

/// Mixed-floor relative error used by the finite-difference suites:
/// |a - b| / max(|b|, floor).
inline double rel_err(const Mat& a, const Mat& b, double floor) {
  double e = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      e = std::max(e, std::abs(a(i, j) - b(i, j)) / std::max(std::abs(b(i, j)), floor));
  return e;
}

}  // namespace oracle

#endif  // BILEVEL_TEST_ORACLES_HPP
