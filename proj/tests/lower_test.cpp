#include <gtest/gtest.h>

#include "bilevel/lower.hpp"
#include "bilevel/problems.hpp"
#include "oracles.hpp"

using namespace bilevel;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }

}  // namespace

TEST(Lower, Example1ClosedForm) {
  const auto P = make_example1();
  for (double x : {-1.0, 0.0, 2.0})
    for (double a : {1.0, 0.1})
      for (double b : {1.0, 0.5, 0.1}) {
        const auto sol = solve_regularized(P.lower, v1(x), a, b);
        EXPECT_NEAR(sol.y(0), -x / b, 1e-9) << x << " " << a << " " << b;
        EXPECT_NEAR(sol.p(0), 1.0, 1e-12);
        EXPECT_NEAR(sol.p(1), 0.0, 1e-12);
      }
}

TEST(Lower, RidgeMatchesLinearSolve) {
  const auto data = make_ridge_data(2, 3, 6, 11);
  const auto P = make_ridge(data);
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    const Vec x = rng.normal_vec(2);
    const double beta = 0.01 + rng.uniform();
    const auto sol = solve_regularized(P.lower, x, 0.3, beta);
    const Mat H = 2.0 * data.A.transpose() * data.A + beta * Mat::Identity(3, 3);
    const Vec ref = H.ldlt().solve(2.0 * data.A.transpose() * (data.b + data.E * x));
    EXPECT_LT((sol.y - ref).norm(), 1e-8 * (1.0 + ref.norm()));
  }
}

TEST(Lower, Example3FirstBranch) {
  const auto P = make_example3();
  const auto sol = solve_regularized(P.lower, v1(0.0), 0.1, 0.1);
  EXPECT_NEAR(sol.y(0), 0.0, 1e-9);
  for (double x : {-3.0, 0.5, 1.5, 10.0, 95.0, 200.0}) {
    const auto s = solve_regularized(P.lower, v1(x), 0.1, 0.1);
    EXPECT_NEAR(s.y(0), oracle::example3_Y(x, 0.1, 0.1), 1e-8) << x;
  }
}

TEST(Lower, UniqueFromDifferentStarts) {
  const auto data = generate_regression_data(20, 30, 10, 0, 2.0, 5);
  const auto P = make_elastic_net(data);
  Vec x(2);
  x << 0.5, -1.0;
  LowerOptions opts;
  opts.tol_ll = 1e-9;
  const auto a = solve_regularized(P.lower, x, 0.1, 0.1, opts, Vec::Zero(20));
  Rng rng(2);
  const auto b = solve_regularized(P.lower, x, 0.1, 0.1, opts, Vec(10.0 * rng.normal_vec(20)));
  EXPECT_LT((a.y - b.y).norm(), 10 * opts.tol_ll);
}

TEST(Lower, NewtonAndAcceleratedAgree) {
  const auto data = generate_regression_data(15, 25, 10, 0, 2.0, 9);
  const auto P = make_elastic_net(data);
  Vec x(2);
  x << 1.0, 0.0;
  LowerOptions n, f;
  n.tol_ll = f.tol_ll = 1e-8;
  f.method = LowerMethod::accelerated;
  const auto a = solve_regularized(P.lower, x, 0.5, 0.5, n);
  const auto b = solve_regularized(P.lower, x, 0.5, 0.5, f);
  // strong convexity modulus >= beta bounds the distance by |grad| / beta
  EXPECT_LT((a.y - b.y).norm(), 1e-7);
}

TEST(Lower, KktResidualAndDualRecovery) {
  const auto data = generate_regression_data(20, 30, 10, 0, 2.0, 4);
  for (auto enc : {EnEncoding::composite, EnEncoding::split}) {
    const auto P = make_elastic_net(data, enc);
    Vec x(2);
    x << 1.5, 0.5;
    LowerOptions opts;
    opts.tol_ll = 1e-9;
    const auto sol = solve_regularized(P.lower, x, 0.05, 0.02, opts);
    const Vec r = lagrangian_grad_y(P.lower, x, sol.y, sol.p, sol.beta);
    EXPECT_LE(r.norm(), opts.tol_ll);
    EXPECT_LE(sol.grad_norm, opts.tol_ll);
    const Vec G = P.lower.G_val(x, sol.y);
    EXPECT_LT(((G - sol.w_prox) / sol.alpha - sol.p).lpNorm<Eigen::Infinity>(), 1e-10);
    EXPECT_GE(sol.p.minCoeff(), -1e-10);
  }
}

TEST(Lower, SoftThresholdThroughPairEncoding) {
  // g = 1/2 (y - c)^2, G = (y, -y), h = max pair: minimizer is close to the
  // soft threshold of c at level 1 when alpha, beta are small.
  LinearQuadraticSpec spec;
  spec.Q = Mat::Identity(1, 1);
  spec.C = -Mat::Identity(1, 1);
  spec.q = Vec::Zero(1);
  spec.K = Mat(2, 1);
  spec.K << 1.0, -1.0;
  spec.L = Mat::Zero(2, 1);
  spec.k0 = Vec::Zero(2);
  spec.y_target = Vec::Zero(1);
  spec.h = poly::l1_pair(1);
  const auto P = make_linear_quadratic(spec);
  for (double c : {3.0, -2.5, 0.4, -0.7}) {
    const auto sol = solve_near_exact(P.lower, v1(c), 1e-9);
    EXPECT_NEAR(sol.y(0), oracle::soft_threshold(c, 1.0), 1e-6) << c;
  }
}

TEST(Lower, LagrangianExamples) {
  const auto P = make_example1();
  const double a = 0.1, b = 0.5;
  const Vec x = v1(1.0), y = v1(-1.0 / b);
  Vec p(2);
  p << 1.0, 0.0;
  const double expect = x(0) * y(0) + 0.5 * b * y(0) * y(0) + 0.0 - 0.0 - 0.5 * a;
  EXPECT_NEAR(lagrangian_value(P.lower, x, y, p, a, b), expect, 1e-8);

  // p = 0 on the all-zero h: h*(0) = 0.
  const auto R = make_ridge(make_ridge_data());
  const Vec xr = Vec::Zero(2), yr = Vec::Ones(3);
  EXPECT_NEAR(lagrangian_value(R.lower, xr, yr, Vec::Zero(1), 0.2, 0.3),
              R.lower.g_val(xr, yr) + 0.5 * 0.3 * 3.0, 1e-9);

  // p outside dom h* for Example 1 (first coordinate must equal 1).
  Vec bad(2);
  bad << 2.0, 0.0;
  try {
    lagrangian_value(P.lower, x, y, bad, a, b);
    FAIL() << "expected invalid_dual";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid_dual);
  }
}

TEST(Lower, SaddlePointStationarity) {
  const auto P = make_example3();
  for (double x : {-1.0, 1.5, 120.0}) {
    const auto sol = solve_regularized(P.lower, v1(x), 0.1, 0.1);
    EXPECT_LE(lagrangian_grad_y(P.lower, v1(x), sol.y, sol.p, 0.1).norm(), 1e-9 * 10);
  }
}

TEST(Lower, ContinuationApproachesActualSolution) {
  // Ridge: actual solution is the least-squares fit; Example 3 first branch
  // converges to -x/2.
  const auto data = make_ridge_data(2, 3, 8, 21);
  const auto R = make_ridge(data);
  const Vec x = Vec::Ones(2);
  const Vec ystar = (data.A.transpose() * data.A).ldlt().solve(data.A.transpose() * (data.b + data.E * x));
  std::vector<double> er, e3;
  const auto E3 = make_example3();
  for (int k = 1; k <= 8; ++k) {
    const double r = std::pow(0.5, k);
    er.push_back((solve_regularized(R.lower, x, r, r).y - ystar).norm());
    e3.push_back(std::abs(solve_regularized(E3.lower, v1(1.0), r, r).y(0) + 0.5));
  }
  for (std::size_t k = er.size() - 3; k < er.size(); ++k) {
    EXPECT_LT(er[k], er[k - 1]);
    EXPECT_LT(e3[k], e3[k - 1]);
  }
}

TEST(Lower, NearExactOnActiveConstraintBranch) {
  // x > 2: y = 1 - x sits on G1 = 0, where G carries rounding amplified by 1/alpha
  const auto E3 = make_example3();
  std::vector<double> xs = {3.0019362886374461, 2.0418417372318238, 2.005470576496442};
  for (int k = 0; k < 200; ++k) xs.push_back(2.0 + 3.0 * k / 199.0);
  for (double x : xs) {
    const auto sol = solve_near_exact(E3.lower, v1(x), near_exact_reg);
    EXPECT_EQ(sol.alpha, near_exact_reg);
    EXPECT_NEAR(sol.y(0), oracle::example3_Y(x, near_exact_reg, near_exact_reg), 1e-9) << "x " << x;
  }
}

TEST(Lower, ConvergenceErrorCarriesBestIterate) {
  const auto data = generate_regression_data(20, 30, 10, 0, 2.0, 4);
  const auto P = make_elastic_net(data);
  LowerOptions opts;
  opts.max_iter = 1;
  opts.tol_ll = 1e-14;
  opts.method = LowerMethod::accelerated;
  try {
    solve_regularized(P.lower, Vec::Zero(2), 1e-3, 1e-3, opts);
    FAIL() << "expected convergence error";
  } catch (const ConvergenceError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::convergence);
    EXPECT_EQ(e.best_iterate().size(), 20);
    EXPECT_GT(e.residual(), 0.0);
  }
}

TEST(Lower, RejectsBadInput) {
  const auto P = make_example3();
  EXPECT_THROW(solve_regularized(P.lower, v1(0.0), 0.0, 0.1), Error);
  EXPECT_THROW(solve_regularized(P.lower, Vec::Zero(2), 0.1, 0.1), Error);
}

TEST(Lower, ElasticNetLassoLimitMatchesRidge) {
  const auto data = generate_regression_data(20, 30, 10, 0, 2.0, 8);
  const auto P = make_elastic_net(data);
  Vec x(2);
  x << -20.0, 0.3;
  const double beta = 1e-6;
  const auto sol = solve_regularized(P.lower, x, 1e-3, beta);
  const Mat H = 2.0 * data.A_train.transpose() * data.A_train + (std::exp(0.3) + beta) * Mat::Identity(20, 20);
  const Vec ref = H.ldlt().solve(2.0 * data.A_train.transpose() * data.b_train);
  EXPECT_LT((sol.y - ref).lpNorm<Eigen::Infinity>(), 1e-4);
}
