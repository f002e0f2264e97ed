// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails. Experiment outputs go to ./acceptance-out unless
// a directory is given as the first argument; an optional second argument
// such as "1,2,10" runs only those criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bilevel/bilevel.hpp"
#include "oracles.hpp"

using namespace bilevel;
namespace ex = bilevel::experiment;

namespace {

std::string out_root = "acceptance-out";

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Vec v1(double a) { return Vec::Constant(1, a); }

LowerOptions tight() {
  LowerOptions o;
  o.tol_ll = 1e-12;
  return o;
}

// ---------------------------------------------------------------- 1

Verdict example1_mapping() {
  const auto P = make_example1();
  double ey = 0, ep = 0, ej = 0;
  for (double x : {-2.0, -1.0, 0.0, 1.0, 2.0})
    for (double a : {1.0, 0.1})
      for (double b : {1.0, 0.1}) {
        const auto sol = solve_regularized(P.lower, v1(x), a, b);
        ey = std::max(ey, std::abs(sol.y(0) + x / b));
        ep = std::max(ep, std::max(std::abs(sol.p(0) - 1.0), std::abs(sol.p(1))));
        ej = std::max(ej, std::abs(jacobian(P.lower, sol).grad_Y(0, 0) + 1.0 / b));
      }
  return {ey <= 1e-7 && ep <= 1e-7 && ej <= 1e-6,
          "max |y err| " + fmt("%.2e", ey) + ", |p err| " + fmt("%.2e", ep) + ", |grad_Y err| " + fmt("%.2e", ej)};
}

// ---------------------------------------------------------------- 2

Verdict example3_mapping() {
  const auto P = make_example3();
  const double a = 0.1, b = 0.1;
  const double x1 = (2 + b) / (1 + b);
  const double x2 = (1 + 100 * (2 * a + b * a + 1)) / (3 * a + a * b + 2);
  double ey = 0, ej = 0;
  int branch[3] = {0, 0, 0}, slopes = 0;
  for (int k = 0; k < 50; ++k) {
    const double x = -10.0 + 90.0 * k / 49.0;
    const auto sol = solve_regularized(P.lower, v1(x), a, b);
    ey = std::max(ey, std::abs(sol.y(0) - oracle::example3_Y(x, a, b)));
    ++branch[x <= x1 ? 0 : (x < x2 ? 1 : 2)];
    if (std::abs(x - x1) < 1e-3 || std::abs(x - x2) < 1e-3) continue;
    ej = std::max(ej, std::abs(jacobian(P.lower, sol).grad_Y(0, 0) - oracle::example3_slope(x, a, b)));
    ++slopes;
  }
  const bool spans = branch[0] > 0 && branch[1] > 0 && branch[2] > 0;
  return {spans && ey <= 1e-6 && ej <= 1e-5,
          "branches " + std::to_string(branch[0]) + "/" + std::to_string(branch[1]) + "/" + std::to_string(branch[2]) +
              ", max |Y err| " + fmt("%.2e", ey) + ", max slope err " + fmt("%.2e", ej) + " over " +
              std::to_string(slopes) + " interior points"};
}

// ---------------------------------------------------------------- 3

Vec stacked(const LowerLevelOracles& o, const Vec& x, double a, double b) {
  const auto s = solve_regularized(o, x, a, b, tight());
  Vec out(o.m + o.s);
  out << s.y, s.p;
  return out;
}

bool stencil_smooth(const LowerLevelOracles& o, const Vec& x, double a, double b, double step,
                    const poly::ActiveSets& base) {
  for (Eigen::Index j = 0; j < x.size(); ++j)
    for (double sgn : {-1.0, 1.0}) {
      Vec xs = x;
      xs(j) += sgn * step * (1.0 + std::abs(x(j)));
      if (!(solve_regularized(o, xs, a, b, tight()).active == base)) return false;
    }
  return true;
}

struct FdOutcome {
  int tested = 0;
  double worst = 0.0;
};

FdOutcome fd_suite(const BilevelProblem& P, const std::function<Vec(Rng&)>& draw, double a, double b) {
  Rng rng(77);
  FdOutcome r;
  const double step = 1e-5;
  for (int attempt = 0; attempt < 400 && r.tested < 20; ++attempt) {
    const Vec x = draw(rng);
    const auto sol = solve_regularized(P.lower, x, a, b, tight());
    const auto J = jacobian(P.lower, sol);
    if (!J.ri_flag || !stencil_smooth(P.lower, x, a, b, step, sol.active)) continue;
    const Mat fd = oracle::central_jacobian([&](const Vec& v) { return stacked(P.lower, v, a, b); }, x, step);
    r.worst = std::max(r.worst, oracle::rel_err(J.grad_S, fd, 1e-4 * std::max(1.0, fd.cwiseAbs().maxCoeff())));
    ++r.tested;
  }
  return r;
}

Verdict jacobian_fd() {
  const double a = 0.1, b = 0.1;
  const auto ridge = make_ridge(make_ridge_data());
  const auto data = generate_regression_data(100, 100, 100, 300, 2.0, 0);
  const auto en = make_elastic_net(data, EnEncoding::split);
  const auto e3 = make_example3();
  const auto r1 = fd_suite(ridge, [](Rng& g) { return g.normal_vec(2); }, a, b);
  const auto r2 = fd_suite(en, [](Rng& g) {
    Vec x(2);
    x << 4.0 * g.uniform() - 1.0, 4.0 * g.uniform() - 2.0;
    return x;
  }, a, b);
  const auto r3 = fd_suite(e3, [](Rng& g) { return v1(-10.0 + 80.0 * g.uniform()); }, a, b);
  const bool ok = r1.tested == 20 && r2.tested == 20 && r3.tested == 20 &&
                  std::max({r1.worst, r2.worst, r3.worst}) <= 1e-4;
  return {ok, "ridge " + std::to_string(r1.tested) + " pts " + fmt("%.2e", r1.worst) + ", elastic-net-split " +
                  std::to_string(r2.tested) + " pts " + fmt("%.2e", r2.worst) + ", example3 " +
                  std::to_string(r3.tested) + " pts " + fmt("%.2e", r3.worst)};
}

// ---------------------------------------------------------------- 4

Verdict jacobian_convergence() {
  const auto P = make_example3();
  double prev = INFINITY;
  bool monotone = true;
  std::string trail;
  for (int k = 1; k <= 6; ++k) {
    const double r = std::pow(10.0, -k);
    const double e = std::abs(jacobian(P.lower, solve_regularized(P.lower, v1(1.0), r, r)).grad_Y(0, 0) + 0.5);
    monotone = monotone && e < prev;
    prev = e;
    trail += (k > 1 ? " " : "") + fmt("%.1e", e);
  }
  return {monotone && prev <= 1e-4, "errors " + trail};
}

// ---------------------------------------------------------------- 5

// prox of each block by active-set enumeration, assembled coordinatewise
Vec prox_reference(const poly::EpiPolyhedralFn& h, const Vec& z, double lam) {
  Vec w = z;
  for (const auto& blk : h.blocks()) {
    const auto nb = static_cast<Eigen::Index>(blk.coords.size());
    Vec zl(nb);
    for (Eigen::Index k = 0; k < nb; ++k) zl(k) = z(blk.coords[static_cast<std::size_t>(k)]);
    const Vec wl = oracle::prox_by_enumeration(blk.A, blk.alpha, blk.B, blk.beta, zl, lam);
    for (Eigen::Index k = 0; k < nb; ++k) w(blk.coords[static_cast<std::size_t>(k)]) = wl(k);
  }
  return w;
}

Verdict prox_and_min_norm() {
  std::mt19937_64 gen(2024);
  std::normal_distribution<double> N01;
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const double c = 1.7;
  struct Family {
    poly::EpiPolyhedralFn h;
    std::function<Vec(const Vec&, double)> closed;  // empty: enumeration reference
  };
  std::vector<Family> fams = {
      {poly::nonpos_indicator(3), [](const Vec& z, double) -> Vec { return z.cwiseMin(0.0); }},
      {poly::hinge(3, c),
       [c](const Vec& z, double l) -> Vec {
         return z.unaryExpr([&](double t) { return t > c * l ? t - c * l : (t < 0 ? t : 0.0); });
       }},
      {poly::zero_fn(2), [](const Vec& z, double) -> Vec { return z; }},
      {poly::l1_pair(2, c), {}},
      {poly::max_of(3), {}},
  };
  double e_qp = 0, e_ref = 0;
  int n = 0;
  for (int t = 0; t < 200; ++t) {
    poly::EpiPolyhedralFn h;
    std::function<Vec(const Vec&, double)> closed;
    if (t % 6 < 5) {
      h = fams[static_cast<std::size_t>(t % 6)].h;
      closed = fams[static_cast<std::size_t>(t % 6)].closed;
    } else {
      std::vector<poly::Piece> pieces;
      for (int j = 0; j < 3; ++j) pieces.push_back({Vec::NullaryExpr(2, [&] { return U(gen); }), U(gen) - 0.5});
      std::vector<poly::DomRow> rows;
      for (int i = 0; i < 2; ++i) rows.push_back({Vec::NullaryExpr(2, [&] { return 0.2 + U(gen); }), 1.0 + U(gen)});
      h = poly::EpiPolyhedralFn(2, pieces, rows);
    }
    const Vec z = Vec::NullaryExpr(h.s(), [&] { return 2.0 * N01(gen); });
    const double lam = 0.05 + std::abs(N01(gen));
    const auto fast = poly::prox(h, z, lam);
    const auto slow = poly::prox_epigraph_qp(h, z, lam);
    const Vec ref = closed ? closed(z, lam) : prox_reference(h, z, lam);
    e_qp = std::max(e_qp, (fast.w - slow.w).lpNorm<Eigen::Infinity>());
    e_ref = std::max(e_ref, (fast.w - ref).lpNorm<Eigen::Infinity>());
    ++n;
  }
  double e_mn = 0;
  for (int t = 0; t < 100; ++t) {
    Mat pts = Mat::NullaryExpr(3, 8, [&] { return N01(gen); });
    pts.colwise() += Vec::Constant(3, t % 3 == 0 ? 0.2 : 1.5);
    const auto r = qp::min_norm_point(pts);
    e_mn = std::max(e_mn, std::abs(r.point.norm() - oracle::min_norm_by_face_grid(pts)));
  }
  return {e_qp <= 1e-6 && e_ref <= 1e-6 && e_mn <= 1e-5,
          std::to_string(n) + " prox: vs epigraph QP " + fmt("%.2e", e_qp) + ", vs closed form/enumeration " +
              fmt("%.2e", e_ref) + "; 100 min-norm vs grid " + fmt("%.2e", e_mn)};
}

// ---------------------------------------------------------------- 6

Verdict gs_example3() {
  const auto P = make_example3();
  std::string d;
  bool ok = true;
  for (double x0 : {-5.0, 5.0}) {
    int hits = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      GSParams p;
      p.x0 = v1(x0);
      p.seed = s;
      if (std::abs(run_gs(P, p).x_final(0)) <= 1e-3) ++hits;
    }
    ok = ok && hits >= 9;
    d += (d.empty() ? "" : ", ") + std::string("x0 = ") + fmt("%+.0f", x0) + ": " + std::to_string(hits) + "/10";
  }
  return {ok, d};
}

// ---------------------------------------------------------------- 7

ex::ExperimentSpec en_spec(std::vector<std::uint64_t> seeds, std::vector<ex::Method> methods, int threads) {
  ex::ExperimentSpec s;
  s.problem.name = "elastic-net";
  s.problem.d = 100;
  s.methods = std::move(methods);
  s.seeds = std::move(seeds);
  s.threads = threads;
  s.keep_records = false;
  return s;
}

Verdict elastic_net() {
  const auto spec = en_spec({0, 1, 2, 3, 4}, {ex::Method::gs, ex::Method::gs_split, ex::Method::gs_early, ex::Method::grid}, 1);
  const auto res = ex::run_experiment(spec);
  ex::write_outputs(res, out_root + "/elastic-net");
  bool ok = true;
  std::string d;
  for (auto seed : spec.seeds) {
    double gs = NAN, grid = NAN;
    for (const auto& r : res.runs) {
      if (r.seed != seed) continue;
      if (r.method == ex::Method::gs) gs = *r.validation_error;
      if (r.method == ex::Method::grid) grid = *r.validation_error;
    }
    const double ratio = gs / grid;
    ok = ok && ratio <= 1.05;
    d += (d.empty() ? "" : " ") + fmt("%.3f", ratio);
  }
  return {ok, "GS/grid validation ratio per seed: " + d + " (table " + out_root + "/elastic-net/table.csv)"};
}

// ---------------------------------------------------------------- 8

Verdict data_poisoning() {
  ex::ExperimentSpec spec;
  spec.problem.name = "data-poisoning";
  spec.problem.d = 50;
  spec.methods = {ex::Method::sqpgs, ex::Method::random};
  spec.seeds = {0, 1, 2, 3, 4};
  spec.keep_records = false;
  const auto res = ex::run_experiment(spec);
  ex::write_outputs(res, out_root + "/data-poisoning");
  bool a = true, b = true, c = true;
  std::string d;
  for (auto seed : spec.seeds) {
    const auto inst = ex::make_instance(spec.problem, seed);
    Vec clean_model;
    near_exact_objective(inst.problem, Vec::Zero(inst.problem.n()), &clean_model);
    const double clean = inst.problem.validation_error(clean_model);
    double pois = NAN, obj = NAN, rnd = NAN, inf = NAN;
    for (const auto& r : res.runs) {
      if (r.seed != seed) continue;
      if (r.method == ex::Method::sqpgs) {
        pois = *r.validation_error;
        obj = r.objective;
        inf = r.infeasibility;
      } else if (r.method == ex::Method::random) {
        rnd = r.objective;
      }
    }
    a = a && pois >= 1.5 * clean;
    b = b && obj > rnd;
    c = c && inf <= 1e-2;
    d += (d.empty() ? "" : "; ") + fmt("%.2f", clean) + "->" + fmt("%.2f", pois) + " (x" + fmt("%.2f", pois / clean) +
         ", random " + fmt("%.2f", rnd) + ", infeas " + fmt("%.1e", inf) + ")";
  }
  return {a && b && c, std::string("(a) ") + (a ? "ok" : "no") + " (b) " + (b ? "ok" : "no") + " (c) " +
                           (c ? "ok" : "no") + ": " + d};
}

// ---------------------------------------------------------------- 9

Verdict determinism() {
  auto same = [](const ex::ExperimentSpec& base) {
    auto s1 = base, s4 = base;
    s1.threads = 1;
    s4.threads = 4;
    return ex::summary_json(ex::run_experiment(s1)).dump() == ex::summary_json(ex::run_experiment(s4)).dump();
  };
  ex::ExperimentSpec e3;
  e3.problem.name = "example3";
  e3.methods = {ex::Method::gs, ex::Method::sqpgs, ex::Method::random};
  e3.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const bool a = same(e3);
  const bool b = same(en_spec({0}, {ex::Method::gs, ex::Method::grid}, 1));
  ex::ExperimentSpec dp;
  dp.problem.name = "data-poisoning";
  dp.problem.d = 50;
  dp.methods = {ex::Method::sqpgs};
  dp.seeds = {0};
  const bool c = same(dp);
  return {a && b && c, std::string("example3 ") + (a ? "identical" : "DIFFERENT") + ", elastic-net seed 0 " +
                           (b ? "identical" : "DIFFERENT") + ", data-poisoning seed 0 " + (c ? "identical" : "DIFFERENT")};
}

// ---------------------------------------------------------------- 10

Verdict degeneracy() {
  const auto data = generate_regression_data(100, 100, 100, 300, 2.0, 0);
  std::string d;
  bool ok = true;
  for (auto enc : {EnEncoding::composite, EnEncoding::split}) {
    const auto P = make_elastic_net(data, enc);
    int raised = 0, tested = 0, reg_ok = 0;
    double cmin = INFINITY, cmax = 0;
    for (const Vec& x : {Vec(Eigen::Vector2d(3.0, 2.0)), Vec(Eigen::Vector2d(2.0, 0.0)),
                         Vec(Eigen::Vector2d(4.0, 1.0)), Vec(Eigen::Vector2d(3.5, -1.0))}) {
      const auto small = solve_regularized(P.lower, x, 1e-8, 1e-8, tight());
      const Vec model = P.model(small.y);
      if ((model.array().abs() < 1e-8).count() == 0) continue;
      ++tested;
      try {
        const auto lim = jacobian_actual_limit(P.lower, small);
        cmin = std::min(cmin, lim.cond_BAB);
        cmax = std::max(cmax, lim.cond_BAB);
      } catch (const IllConditionedError&) {
        ++raised;
      }
      try {
        jacobian(P.lower, solve_regularized(P.lower, x, 0.1, 0.1, tight()));
        ++reg_ok;
      } catch (const Error&) {
      }
    }
    if (enc == EnEncoding::composite) ok = tested > 0 && raised == tested && reg_ok == tested;
    d += std::string(d.empty() ? "" : "; ") + P.name + ": limit raised at " + std::to_string(raised) + "/" +
         std::to_string(tested) + " zero-coefficient points, regularized ok " + std::to_string(reg_ok) + "/" +
         std::to_string(tested);
    if (raised < tested) d += ", limit cond " + fmt("%.1e", cmin) + ".." + fmt("%.1e", cmax);
  }
  return {ok, d};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) out_root = argv[1];
  std::filesystem::create_directories(out_root);
  struct Item {
    int id;
    const char* name;
    Verdict (*fn)();
  };
  const Item items[] = {
      {1, "Example 1 analytic solution mapping", example1_mapping},
      {2, "Example 3 piecewise solution mapping", example3_mapping},
      {3, "Jacobian vs central differences", jacobian_fd},
      {4, "Jacobian convergence on Example 3", jacobian_convergence},
      {5, "prox and min-norm oracles", prox_and_min_norm},
      {6, "GS on Example 3", gs_example3},
      {7, "elastic-net tuning vs grid search", elastic_net},
      {8, "data poisoning with SQP-GS", data_poisoning},
      {9, "determinism across thread counts", determinism},
      {10, "degeneracy signaling of the actual-limit Jacobian", degeneracy},
  };
  std::vector<int> only;
  if (argc > 2) {
    std::stringstream ss(argv[2]);
    for (std::string tok; std::getline(ss, tok, ',');) only.push_back(std::stoi(tok));
  }
  int failed = 0, ran = 0;
  for (const auto& it : items) {
    if (!only.empty() && std::find(only.begin(), only.end(), it.id) == only.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = it.fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!v.pass) ++failed;
    std::printf("%s  criterion %d: %s  [%s] (%.1f s)\n", v.pass ? "PASS" : "FAIL", it.id, it.name, v.detail.c_str(),
                secs);
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed ? 1 : 0;
}
