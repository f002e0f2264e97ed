#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "bilevel/gs.hpp"
#include "bilevel/problems.hpp"

using namespace bilevel;

namespace {

GSParams example3_params(double x0, std::uint64_t seed) {
  GSParams p;
  p.x0 = Vec::Constant(1, x0);
  p.seed = seed;
  return p;
}

bool same_records(const RunResult& a, const RunResult& b) {
  if (a.records.size() != b.records.size()) return false;
  for (std::size_t k = 0; k < a.records.size(); ++k) {
    const auto& r = a.records[k];
    const auto& s = b.records[k];
    if (r.event != s.event || r.x != s.x || r.w_norm != s.w_norm || r.t != s.t || r.f_val != s.f_val ||
        r.eps != s.eps || r.eta != s.eta || r.alpha != s.alpha || r.beta != s.beta)
      return false;
  }
  return a.x_final == b.x_final;
}

// every logged record obeys its branch contract
void expect_record_contracts(const RunResult& res, const GSParams& p) {
  for (std::size_t k = 0; k < res.records.size(); ++k) {
    const auto& r = res.records[k];
    EXPECT_GE(r.wolfe_gap, -1e-8) << "iter " << r.iter;
    switch (r.event) {
      case RunEvent::descent:
        EXPECT_GT(r.w_norm, r.eta);
        EXPECT_LT(r.f_trial, r.f_val - p.delta * r.t * r.w_norm);
        if (k + 1 < res.records.size()) {
          EXPECT_NEAR((res.records[k + 1].x - r.x).norm(), r.t, 1e-12 * (1 + r.x.norm()));
          EXPECT_EQ(res.records[k + 1].eta, r.eta);
          EXPECT_DOUBLE_EQ(res.records[k + 1].f_val, r.f_trial);
        }
        break;
      case RunEvent::shrink:
      case RunEvent::ls_fail:
        if (r.event == RunEvent::shrink) EXPECT_LE(r.w_norm, r.eta);
        if (k + 1 < res.records.size()) {
          const auto& nx = res.records[k + 1];
          EXPECT_EQ(nx.x, r.x);
          EXPECT_DOUBLE_EQ(nx.eta, r.eta * p.mu_eta);
          EXPECT_DOUBLE_EQ(nx.eps, p.fixed_radius ? r.eps : r.eps * p.mu_eps);
          EXPECT_DOUBLE_EQ(nx.alpha, r.alpha * p.mu_alpha);
          EXPECT_DOUBLE_EQ(nx.beta, r.beta * p.mu_beta);
        }
        break;
      case RunEvent::stop:
        EXPECT_EQ(k + 1, res.records.size());
        EXPECT_LE(r.w_norm, p.eta_opt);
        EXPECT_LE(r.eps, p.eps_opt);
        EXPECT_LE(r.alpha, p.alpha_opt);
        EXPECT_LE(r.beta, p.beta_opt);
        break;
    }
    if (k > 0) {
      const auto& pr = res.records[k - 1];
      EXPECT_LE(r.eta, pr.eta);
      EXPECT_LE(r.eps, pr.eps);
      EXPECT_LE(r.alpha, pr.alpha);
      EXPECT_LE(r.beta, pr.beta);
      // fixed (alpha, beta) segment: the hyper-objective never increases
      if (r.alpha == pr.alpha && r.beta == pr.beta) EXPECT_LE(r.f_val, pr.f_val);
    }
  }
}

}  // namespace

TEST(RunGS, Example3FromBothSides) {
  const auto P = make_example3();
  for (double x0 : {-5.0, 5.0}) {
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto p = example3_params(x0, seed);
      const auto res = run_gs(P, p);
      if (std::abs(res.x_final(0)) <= 1e-3) ++hits;
      EXPECT_EQ(res.termination, Termination::stopped) << "x0 " << x0 << " seed " << seed;
      expect_record_contracts(res, p);
    }
    EXPECT_GE(hits, 9) << "x0 " << x0;
  }
}

TEST(RunGS, SmoothSanityReachesMinimum) {
  const auto P = make_smooth_sanity();
  GSParams p;
  p.x0 = Vec::Zero(1);
  const auto res = run_gs(P, p);
  EXPECT_NEAR(res.x_final(0), 3.0, 1e-3);
  EXPECT_EQ(res.termination, Termination::stopped);
  expect_record_contracts(res, p);
}

TEST(RunGS, FixedRadiusLadderOnExample3) {
  const auto P = make_example3();
  GSParams p = example3_params(5.0, 3);
  p.fixed_radius = true;
  p.eps0 = p.eps_opt = 0.05;
  const auto res = run_gs(P, p);
  expect_record_contracts(res, p);
  EXPECT_EQ(res.termination, Termination::stopped);
  double last_eta = INFINITY;
  int hits = 0;
  for (const auto& r : res.records) {
    EXPECT_EQ(r.eps, 0.05);
    if (r.event != RunEvent::shrink) continue;
    EXPECT_LE(r.w_norm, r.eta);
    EXPECT_LT(r.eta, last_eta);
    last_eta = r.eta;
    ++hits;
  }
  EXPECT_GE(hits, 5);
  EXPECT_LE(std::abs(res.x_final(0)), 0.1);
}

TEST(RunGS, EarlyVariantStopsAtFirstShrink) {
  const auto P = make_example3();
  GSParams p = example3_params(5.0, 0);
  p.stop_at_first_eta_hit = true;
  const auto res = run_gs(P, p);
  EXPECT_EQ(res.termination, Termination::first_eta_hit);
  ASSERT_FALSE(res.records.empty());
  EXPECT_EQ(res.records.back().event, RunEvent::shrink);
  EXPECT_EQ(res.shrinks, 1);
}

TEST(RunGS, StallsOnceRadiusIsBelowRounding) {
  const auto P = make_example3();
  GSParams p = example3_params(5.0, 0);
  p.eps0 = 1e-13;
  p.eta0 = 1e3;  // every iteration shrinks
  const auto res = run_gs(P, p);
  EXPECT_EQ(res.termination, Termination::stalled);
  ASSERT_FALSE(res.records.empty());
  const double ulp_scale = std::numeric_limits<double>::epsilon() * 5.0;
  EXPECT_GT(res.records.back().eps, 4 * ulp_scale);
  EXPECT_LE(res.records.back().eps * p.mu_eps, 4 * ulp_scale);
  EXPECT_EQ(res.x_final(0), 5.0);

  p.eps0 = 1e-16;
  EXPECT_TRUE(run_gs(P, p).records.empty());
  p.fixed_radius = true;
  p.max_iter = 3;
  const auto fixed = run_gs(P, p);
  EXPECT_EQ(fixed.records.size(), 3u);
  EXPECT_EQ(fixed.termination, Termination::max_iter);
}

TEST(RunGS, WithoutCenterSample) {
  const auto P = make_example3();
  GSParams p = example3_params(-5.0, 1);
  p.include_center = false;
  const auto res = run_gs(P, p);
  EXPECT_LE(std::abs(res.x_final(0)), 1e-3);
  expect_record_contracts(res, p);
}

TEST(RunGS, SameSeedSameStream) {
  const auto P = make_example3();
  const auto p = example3_params(5.0, 11);
  EXPECT_TRUE(same_records(run_gs(P, p), run_gs(P, p)));
  auto q = p;
  q.seed = 12;
  EXPECT_FALSE(same_records(run_gs(P, p), run_gs(P, q)));
}

TEST(RunGS, ThreadCountDoesNotChangeResult) {
  const auto D = generate_regression_data(20, 30, 30, 10, 2.0, 5);
  const auto P = make_elastic_net(D);
  GSParams p;
  p.x0 = Vec::Zero(2);
  p.seed = 2;
  p.max_iter = 40;
  auto q = p;
  q.threads = 4;
  const auto a = run_gs(P, p);
  const auto b = run_gs(P, q);
  EXPECT_TRUE(same_records(a, b));
}

TEST(RunGS, RecordHookSeesEveryRecord) {
  const auto P = make_smooth_sanity();
  GSParams p;
  p.x0 = Vec::Zero(1);
  int seen = 0;
  int last = -1;
  p.on_record = [&](const RunRecord& r) {
    EXPECT_EQ(r.iter, last + 1);
    last = r.iter;
    ++seen;
  };
  const auto res = run_gs(P, p);
  EXPECT_EQ(seen, static_cast<int>(res.records.size()));
}

TEST(RunGS, RejectsBadParameters) {
  const auto P = make_example3();
  auto p = example3_params(1.0, 0);
  p.mu_eta = 1.0;
  EXPECT_THROW(run_gs(P, p), Error);
  p = example3_params(1.0, 0);
  p.N_sam = 1;
  EXPECT_THROW(run_gs(P, p), Error);
  p = example3_params(1.0, 0);
  p.x0 = Vec::Zero(2);
  EXPECT_THROW(run_gs(P, p), Error);
  p = example3_params(1.0, 0);
  p.eps0 = 0.0;
  EXPECT_THROW(run_gs(P, p), Error);
}

TEST(RunGS, RefusesConstrainedProblems) {
  const auto P = make_constrained_sanity();
  GSParams p;
  p.x0 = Vec::Zero(1);
  EXPECT_THROW(run_gs(P, p), Error);
}

TEST(RunGS, DefaultSampleCount) {
  GSParams p;
  EXPECT_EQ(p.samples(1), 5);
  EXPECT_EQ(p.samples(4), 5);
  EXPECT_EQ(p.samples(10), 11);
  p.N_sam = 7;
  EXPECT_EQ(p.samples(2), 7);
}
