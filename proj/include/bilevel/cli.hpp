#ifndef BILEVEL_CLI_HPP
#define BILEVEL_CLI_HPP

// bilevel-gs {solve-lower|run|check} --config <path> [--seed N] [--threads K] [--out DIR]
//
// Exit codes: 0 success, 1 algorithmic failure (solver error or failed
// check), 2 configuration error. Failures print {"status": "error", ...} on
// stdout.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bilevel/common.hpp"
#include "bilevel/experiment.hpp"
#include "bilevel/io.hpp"
#include "bilevel/lower.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/sensitivity.hpp"

namespace bilevel::cli {

using json = nlohmann::json;

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2 };

struct Flags {
  std::string command;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<int> seeds;
  std::optional<std::string> out, problem, algo;
  bool quiet = false;
};

struct RunConfig {
  experiment::ExperimentSpec exp;
  LowerOptions lower;
  std::string out_dir = "bilevel-out";
  bool verbose = false;

  // solve-lower
  std::optional<Vec> x, y0;
  double alpha = 0.1, beta = 0.1;
  bool with_jacobian = true;

  // check
  int check_points = 20;
  int jacobian_points = 5;
  int ri_samples = 100;
  double check_alpha = 0.1, check_beta = 0.1;
  std::string inject;
};

inline json error_json(const std::string& kind, const std::string& message) {
  return {{"status", "error"}, {"kind", kind}, {"message", message}};
}

inline int exit_code_for(ErrorKind k) {
  return (k == ErrorKind::config || k == ErrorKind::input) ? exit_config : exit_failure;
}

namespace detail {

inline experiment::ProblemSpec problem_from(const io::Section& sec) {
  experiment::ProblemSpec p;
  p.name = sec.get<std::string>("name", p.name);
  const auto enc = sec.get<std::string>("encoding", "composite");
  if (enc == "composite")
    p.encoding = EnEncoding::composite;
  else if (enc == "split")
    p.encoding = EnEncoding::split;
  else
    throw io::config_error("config: 'problem.encoding' must be composite or split");
  p.d = sec.get<Eigen::Index>("d", p.d);
  p.n_tr = sec.get<Eigen::Index>("n_tr", p.n_tr);
  p.n_val = sec.get<Eigen::Index>("n_val", p.n_val);
  p.n_test = sec.get<Eigen::Index>("n_test", p.n_test);
  p.snr = sec.get<double>("snr", p.snr);
  p.c_budget = sec.get<double>("c_budget", p.c_budget);
  p.lambda1 = sec.get<double>("lambda1", p.lambda1);
  p.lambda2 = sec.get<double>("lambda2", p.lambda2);
  if (sec.has("data_dir")) p.data_dir = sec.req<std::string>("data_dir");
  if (p.name == "linear-quadratic") {
    LinearQuadraticSpec lq;
    lq.Q = sec.req<Mat>("Q");
    lq.C = sec.req<Mat>("C");
    lq.K = sec.req<Mat>("K");
    lq.L = sec.req<Mat>("L");
    lq.q = sec.req<Vec>("q");
    lq.k0 = sec.req<Vec>("k0");
    lq.y_target = sec.req<Vec>("y_target");
    lq.x_weight = sec.get<double>("x_weight", 0.0);
    lq.h = io::poly_from_config(sec.sub("h"));
    p.lq = std::move(lq);
  }
  sec.finish();
  bool known = false;
  for (const auto& n : experiment::problem_names()) known |= n == p.name;
  if (!known) throw io::config_error("config: unknown problem '" + p.name + "'");
  return p;
}

inline std::vector<experiment::Method> methods_from(const io::Section& root) {
  if (!root.has("algo")) return {experiment::Method::gs};
  const json& a = root.raw("algo");
  if (a.is_string()) return experiment::parse_methods(a.get<std::string>());
  if (!a.is_array()) throw io::config_error("config: 'algo' must be a string or an array of strings");
  std::vector<experiment::Method> out;
  for (const auto& v : a) {
    if (!v.is_string()) throw io::config_error("config: 'algo' entries must be strings");
    out.push_back(experiment::parse_method(v.get<std::string>()));
  }
  if (out.empty()) throw io::config_error("config: 'algo' is empty");
  return out;
}

/// Adds 1e-2 to every entry of the named oracle's output.
inline void inject_fault(BilevelProblem& P, const std::string& c) {
  auto& o = P.lower;
  const double e = 1e-2;
  auto bump_v = [e](const Vec& v) -> Vec { return v.array() + e; };
  auto bump_m = [e](const Mat& M) -> Mat { return M.array() + e; };
  if (c == "g_grad_y") {
    o.g_grad_y = [f = o.g_grad_y, bump_v](const Vec& x, const Vec& y) { return bump_v(f(x, y)); };
  } else if (c == "g_hess_yy") {
    o.g_hess_yy = [f = o.g_hess_yy, bump_m](const Vec& x, const Vec& y) { return bump_m(f(x, y)); };
  } else if (c == "g_mixed_xy") {
    o.g_mixed_xy = [f = o.g_mixed_xy, bump_m](const Vec& x, const Vec& y) { return bump_m(f(x, y)); };
  } else if (c == "G_jac_y") {
    o.G_jac_y = [f = o.G_jac_y, bump_m](const Vec& x, const Vec& y) { return bump_m(f(x, y)); };
  } else if (c == "G_jac_x") {
    o.G_jac_x = [f = o.G_jac_x, bump_m](const Vec& x, const Vec& y) { return bump_m(f(x, y)); };
  } else if (c == "f_grad_x") {
    P.f_grad_x = [f = P.f_grad_x, bump_v](const Vec& x, const Vec& y) { return bump_v(f(x, y)); };
  } else if (c == "f_grad_y") {
    P.f_grad_y = [f = P.f_grad_y, bump_v](const Vec& x, const Vec& y) { return bump_v(f(x, y)); };
  } else if (c == "constraint") {
    if (P.constraints.empty()) throw io::config_error("config: check.inject = constraint on an unconstrained problem");
    auto& k = P.constraints.front();
    k.grad = [f = k.grad, bump_v](const Vec& x) { return bump_v(f(x)); };
  } else {
    throw io::config_error("config: unknown check.inject component '" + c +
                           "' (g_grad_y, g_hess_yy, g_mixed_xy, G_jac_y, G_jac_x, f_grad_x, f_grad_y, constraint)");
  }
}

}  // namespace detail

/// Whole-config validation, before any solver runs. Flags override keys.
inline RunConfig parse_config(const json& cfg, const Flags& fl) {
  const io::Section root(cfg, "");
  RunConfig rc;
  auto& ex = rc.exp;

  if (root.has("problem") && root.raw("problem").is_string()) {
    ex.problem.name = root.req<std::string>("problem");
    detail::problem_from(io::Section(json{{"name", ex.problem.name}}, "problem"));
  } else {
    ex.problem = detail::problem_from(root.sub("problem"));
  }
  if (fl.problem) {
    detail::problem_from(io::Section(json{{"name", *fl.problem}}, "problem"));
    ex.problem.name = *fl.problem;
  }

  ex.methods = detail::methods_from(root);
  if (fl.algo) ex.methods = experiment::parse_methods(*fl.algo);
  const std::uint64_t base = fl.seed.value_or(root.get<std::uint64_t>("seed", 0));
  ex.seeds = {base};
  if (root.has("seeds")) {
    const json& s = root.raw("seeds");
    ex.seeds.clear();
    if (s.is_number_integer() && s.get<std::int64_t>() >= 1) {
      for (std::int64_t k = 0; k < s.get<std::int64_t>(); ++k) ex.seeds.push_back(base + static_cast<std::uint64_t>(k));
    } else if (s.is_array() && !s.empty()) {
      for (const auto& v : s) {
        if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw io::config_error("config: 'seeds' entries must be nonnegative integers");
        ex.seeds.push_back(v.get<std::uint64_t>());
      }
    } else {
      throw io::config_error("config: 'seeds' must be a positive count or a list of seeds");
    }
  }
  if (fl.seeds) {
    if (*fl.seeds < 1) throw io::config_error("--seeds must be positive");
    ex.seeds.clear();
    for (int k = 0; k < *fl.seeds; ++k) ex.seeds.push_back(base + static_cast<std::uint64_t>(k));
  }
  ex.threads = fl.threads.value_or(root.get<int>("threads", 1));
  if (ex.threads < 1) throw io::config_error("threads must be positive");
  rc.out_dir = fl.out.value_or(root.get<std::string>("out", rc.out_dir));
  rc.verbose = root.get<bool>("verbose", false) && !fl.quiet;
  ex.random_points = root.get<int>("random_points", ex.random_points);
  ex.random_radius2 = root.get<double>("random_radius2", ex.random_radius2);
  ex.keep_records = root.get<bool>("records", true);
  if (ex.random_points < 1) throw io::config_error("config: 'random_points' must be positive");
  {
    const auto g = root.sub("grid");
    ex.grid_lo = g.get<double>("lo", ex.grid_lo);
    ex.grid_hi = g.get<double>("hi", ex.grid_hi);
    ex.grid_count = g.get<int>("count", ex.grid_count);
    g.finish();
    if (ex.grid_count < 1 || !(ex.grid_lo <= ex.grid_hi)) throw io::config_error("config: bad [grid] range");
  }

  rc.lower = io::lower_options_from(root.sub("lower"));

  // Algorithm sections are checked against the actual problem dimension.
  const auto probe = experiment::make_instance(ex.problem, ex.seeds.front());
  const auto n = probe.problem.n();
  const json gs_j = root.has("gs") ? root.raw("gs") : json::object();
  const json sq_j = root.has("sqpgs") ? root.raw("sqpgs") : json::object();
  const LowerOptions lo = rc.lower;
  ex.gs_overrides = [gs_j, lo](GSParams p) {
    p.sens.lower = lo;
    return io::gs_params_from(io::Section(gs_j, "gs"), p);
  };
  ex.sqpgs_overrides = [sq_j, lo](SQPGSParams p) {
    p.sens.lower = lo;
    return io::sqpgs_params_from(io::Section(sq_j, "sqpgs"), p);
  };
  try {
    ex.gs_overrides(experiment::default_gs(ex.problem, probe.problem)).validate(n);
    ex.sqpgs_overrides(experiment::default_sqpgs(ex.problem, probe.problem)).validate(n);
  } catch (const Error& e) {
    throw io::config_error(e.what());
  }

  {
    const auto s = root.sub("solve_lower");
    if (s.has("x")) rc.x = s.req<Vec>("x");
    if (s.has("y0")) rc.y0 = s.req<Vec>("y0");
    rc.alpha = s.get<double>("alpha", rc.alpha);
    rc.beta = s.get<double>("beta", rc.beta);
    rc.with_jacobian = s.get<bool>("jacobian", rc.with_jacobian);
    s.finish();
    if (!(rc.alpha > 0.0 && rc.beta > 0.0)) throw io::config_error("config: solve_lower alpha and beta must be > 0");
    if (rc.x && rc.x->size() != n) throw io::config_error("config: 'solve_lower.x' must have length " + std::to_string(n));
    if (rc.y0 && rc.y0->size() != probe.problem.m())
      throw io::config_error("config: 'solve_lower.y0' must have length " + std::to_string(probe.problem.m()));
  }
  {
    const auto c = root.sub("check");
    rc.check_points = c.get<int>("points", rc.check_points);
    rc.jacobian_points = c.get<int>("jacobian_points", rc.jacobian_points);
    rc.ri_samples = c.get<int>("ri_samples", rc.ri_samples);
    rc.check_alpha = c.get<double>("alpha", rc.check_alpha);
    rc.check_beta = c.get<double>("beta", rc.check_beta);
    rc.inject = c.get<std::string>("inject", "");
    c.finish();
    if (rc.check_points < 1 || rc.jacobian_points < 0 || rc.ri_samples < 0)
      throw io::config_error("config: [check] counts must be nonnegative");
    if (!rc.inject.empty()) {
      auto P = probe.problem;
      detail::inject_fault(P, rc.inject);
    }
  }
  root.finish();
  return rc;
}

inline int cmd_solve_lower(const RunConfig& rc, std::ostream& out) {
  const auto inst = experiment::make_instance(rc.exp.problem, rc.exp.seeds.front());
  const auto& P = inst.problem;
  const Vec x = rc.x.value_or(P.x_typical.size() == P.n() ? P.x_typical : Vec::Zero(P.n()));
  const auto sol = solve_regularized(P.lower, x, rc.alpha, rc.beta, rc.lower, rc.y0);
  json j = {{"status", "ok"}, {"problem", P.name}, {"solution", io::to_json(sol)}};
  if (rc.with_jacobian) {
    try {
      SensitivityOptions so;
      so.lower = rc.lower;
      j["jacobian"] = io::to_json(jacobian(P.lower, sol, so));
    } catch (const IllConditionedError& e) {
      j["jacobian"] = {{"error", "ill_conditioned"}, {"message", e.what()}, {"condition", io::number(e.condition())}};
    }
  }
  out << j.dump(2) << '\n';
  return exit_ok;
}

inline int cmd_run(const RunConfig& rc, std::ostream& out, std::ostream& log) {
  const auto res = experiment::run_experiment(rc.exp, [&](const experiment::MethodRun& r) {
    if (rc.verbose)
      log << experiment::method_name(r.method) << " seed " << r.seed << ": objective " << r.objective
          << ", " << r.iterations << " iterations, " << r.timing.total << " s\n";
  });
  experiment::write_outputs(res, rc.out_dir);
  json j = experiment::summary_json(res);
  out << json{{"status", "ok"}, {"out", rc.out_dir}, {"table", j["table"]}}.dump(2) << '\n';
  if (rc.verbose) log << experiment::table_csv(res);
  return exit_ok;
}

inline int cmd_check(const RunConfig& rc, std::ostream& out) {
  auto inst = experiment::make_instance(rc.exp.problem, rc.exp.seeds.front());
  auto& P = inst.problem;
  if (!rc.inject.empty()) detail::inject_fault(P, rc.inject);
  const std::uint64_t seed = rc.exp.seeds.front() + 1;

  const auto orc = check_oracles(P, rc.check_points, seed);
  json oracles = json::object();
  json failed = json::array();
  for (const auto& e : orc.entries) {
    oracles[e.component] = e.error;
    if (e.error > orc.tol) failed.push_back(e.component);
  }

  json jac = nullptr;
  if (rc.jacobian_points > 0) {
    const auto jr = check_jacobian_fd(P, rc.jacobian_points, seed, rc.check_alpha, rc.check_beta);
    jac = {{"tested", jr.tested}, {"skipped", jr.skipped}, {"max_rel_err", jr.max_rel_err}, {"tol", jr.tol}};
    if (jr.tested > 0 && !jr.ok()) failed.push_back("jacobian");
  }

  json ri = nullptr;
  if (rc.ri_samples > 0) {
    const auto st = ri_statistics(P, rc.ri_samples, seed, rc.check_alpha, rc.check_beta);
    ri = {{"samples", st.samples},
          {"ri_true", st.ri_true},
          {"fraction", st.samples ? static_cast<double>(st.ri_true) / st.samples : 0.0},
          {"degenerate", st.degenerate},
          {"ill_conditioned", st.ill_conditioned},
          {"failed", st.failed},
          {"min_cond", io::number(st.min_cond)},
          {"max_cond", io::number(st.max_cond)}};
  }
  const bool ok = failed.empty();
  out << json{{"status", ok ? "ok" : "failed"}, {"problem", P.name}, {"oracles", oracles},
              {"oracle_tol", orc.tol},         {"jacobian", jac},    {"ri_flag", ri},
              {"failed", failed}}
             .dump(2)
      << '\n';
  return ok ? exit_ok : exit_failure;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& log) {
  CLI::App app{"Hyper-gradient sampling for bilevel programs with composite lower levels", "bilevel-gs"};
  app.require_subcommand(1);
  Flags fl;
  std::uint64_t seed = 0;
  int threads = 1, seeds = 1;
  std::string opt_out, problem, algo;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", fl.config, "TOML or JSON run config (auto-detected)");
    sub->add_option("--seed", seed, "base seed");
    sub->add_option("--threads", threads, "worker threads; changes wall time only");
    sub->add_option("--out", opt_out, "output directory for run");
    sub->add_option("--problem", problem, "built-in problem, overrides the config");
    sub->add_option("--algo", algo, "comma-separated: gs, gs-split, gs-early, sqpgs, grid, random");
    sub->add_option("--seeds", seeds, "number of seeds, starting at --seed");
    sub->add_flag("--quiet", fl.quiet, "no progress output");
  };
  std::vector<CLI::App*> subs = {app.add_subcommand("solve-lower", "solve the regularized lower level at one x"),
                                 app.add_subcommand("run", "run algorithms and baselines over seeds"),
                                 app.add_subcommand("check", "oracle, Jacobian and relative-interior self-checks")};
  for (auto* s : subs) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return exit_ok;
    }
    out << error_json("config", e.what()).dump() << '\n';
    return exit_config;
  }
  for (auto* s : subs) {
    if (!s->parsed()) continue;
    fl.command = s->get_name();
    if (s->count("--seed")) fl.seed = seed;
    if (s->count("--threads")) fl.threads = threads;
    if (s->count("--seeds")) fl.seeds = seeds;
    if (s->count("--out")) fl.out = opt_out;
    if (s->count("--problem")) fl.problem = problem;
    if (s->count("--algo")) fl.algo = algo;
  }

  RunConfig rc;
  try {
    const json cfg = fl.config.empty() ? json::object() : io::load_config_file(fl.config);
    rc = parse_config(cfg, fl);
  } catch (const Error& e) {
    out << error_json("config", e.what()).dump() << '\n';
    return exit_config;
  } catch (const std::exception& e) {
    out << error_json("config", e.what()).dump() << '\n';
    return exit_config;
  }

  try {
    if (fl.command == "solve-lower") return cmd_solve_lower(rc, out);
    if (fl.command == "run") return cmd_run(rc, out, log);
    return cmd_check(rc, out);
  } catch (const Error& e) {
    out << error_json(to_string(e.kind()), e.what()).dump() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    out << error_json("internal", e.what()).dump() << '\n';
    return exit_failure;
  }
}

}  // namespace bilevel::cli

#endif  // BILEVEL_CLI_HPP
