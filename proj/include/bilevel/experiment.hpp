#ifndef BILEVEL_EXPERIMENT_HPP
#define BILEVEL_EXPERIMENT_HPP

// Multi-seed experiment driver shared by the CLI and the acceptance suite:
// builds instances, runs the methods, retrains at their outputs and writes
// summary.json, timing.json, table.csv and records.jsonl.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bilevel/common.hpp"
#include "bilevel/gs.hpp"
#include "bilevel/io.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/sqpgs.hpp"

namespace bilevel::experiment {

using json = nlohmann::json;

// ---------------------------------------------------------------- problems

struct ProblemSpec {
  std::string name = "example3";
  EnEncoding encoding = EnEncoding::composite;
  Eigen::Index d = 0;  // 0: 100 for elastic-net, 50 for data-poisoning
  Eigen::Index n_tr = 100, n_val = 100, n_test = 300;
  double snr = 2.0;
  double c_budget = 100.0;
  double lambda1 = std::exp(3.0), lambda2 = std::exp(2.0);
  std::optional<std::string> data_dir;  // import a CSV bundle instead of generating
  std::optional<LinearQuadraticSpec> lq;
};

inline const std::vector<std::string>& problem_names() {
  static const std::vector<std::string> names = {"example1", "example3", "ridge", "smooth", "constrained",
                                                 "elastic-net", "data-poisoning", "linear-quadratic"};
  return names;
}

inline bool uses_regression_data(const std::string& name) {
  return name == "elastic-net" || name == "data-poisoning";
}

struct Instance {
  BilevelProblem problem;
  std::shared_ptr<const SyntheticRegressionData> data;
};

inline Instance make_instance(const ProblemSpec& spec, std::uint64_t seed,
                              std::optional<EnEncoding> encoding = std::nullopt) {
  Instance inst;
  if (uses_regression_data(spec.name)) {
    const Eigen::Index d = spec.d > 0 ? spec.d : (spec.name == "elastic-net" ? 100 : 50);
    inst.data = std::make_shared<const SyntheticRegressionData>(
        spec.data_dir ? import_regression_data(*spec.data_dir)
                      : generate_regression_data(d, spec.n_tr, spec.n_val, spec.n_test, spec.snr, seed));
    if (spec.name == "elastic-net")
      inst.problem = make_elastic_net(*inst.data, encoding.value_or(spec.encoding));
    else
      inst.problem = make_data_poisoning(*inst.data, spec.c_budget, spec.lambda1, spec.lambda2);
  } else if (spec.name == "example1") {
    inst.problem = make_example1();
  } else if (spec.name == "example3") {
    inst.problem = make_example3();
  } else if (spec.name == "ridge") {
    inst.problem = make_ridge(make_ridge_data(2, 3, 6, 7 + seed));
  } else if (spec.name == "smooth") {
    inst.problem = make_smooth_sanity();
  } else if (spec.name == "constrained") {
    inst.problem = make_constrained_sanity();
  } else if (spec.name == "linear-quadratic") {
    require(spec.lq.has_value(), "problem linear-quadratic needs Q, C, K, L, q, k0, y_target and h",
            ErrorKind::config);
    inst.problem = make_linear_quadratic(*spec.lq);
  } else {
    throw Error(ErrorKind::config, "unknown problem '" + spec.name + "'");
  }
  return inst;
}

// ---------------------------------------------------------------- methods

enum class Method { gs, gs_split, gs_early, sqpgs, grid, random };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::gs: return "gs";
    case Method::gs_split: return "gs-split";
    case Method::gs_early: return "gs-early";
    case Method::sqpgs: return "sqpgs";
    case Method::grid: return "grid";
    case Method::random: return "random";
  }
  return "unknown";
}

inline const char* method_label(Method m) {
  switch (m) {
    case Method::gs: return "GS";
    case Method::gs_split: return "GS-split";
    case Method::gs_early: return "GS-early";
    case Method::sqpgs: return "SQP-GS";
    case Method::grid: return "Grid search";
    case Method::random: return "Random search";
  }
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::gs, Method::gs_split, Method::gs_early, Method::sqpgs, Method::grid, Method::random})
    if (s == method_name(m)) return m;
  throw Error(ErrorKind::config, "unknown algorithm '" + s + "' (gs, gs-split, gs-early, sqpgs, grid, random)");
}

inline std::vector<Method> parse_methods(const std::string& list) {
  std::vector<Method> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_method(item));
  require(!out.empty(), "empty algorithm list", ErrorKind::config);
  return out;
}

/// Experiment defaults. Elastic net and data poisoning use the published
/// tuned values; everything else the library defaults.
inline GSParams default_gs(const ProblemSpec& spec, const BilevelProblem& P) {
  GSParams p;
  p.x0 = P.x_typical.size() == P.n() ? P.x_typical : Vec::Zero(P.n());
  if (spec.name == "example3") p.x0 = Vec::Constant(1, 5.0);
  if (spec.name == "elastic-net") {
    p.N_sam = 5;
    p.max_iter = 1000;
  }
  return p;
}

inline SQPGSParams default_sqpgs(const ProblemSpec& spec, const BilevelProblem& P) {
  SQPGSParams p;
  p.x0 = P.x_typical.size() == P.n() ? P.x_typical : Vec::Zero(P.n());
  if (spec.name == "example3") p.x0 = Vec::Constant(1, 5.0);
  if (spec.name == "constrained") p.x0 = Vec::Constant(1, 5.0);
  if (spec.name == "data-poisoning") {
    p.alpha0 = p.beta0 = 0.01;
    p.eps0 = p.rho0 = 0.1;
    p.alpha_opt = p.beta_opt = 1e-6;
    p.eps_opt = 1e-4;
    p.N_sam = 101;
    p.gamma = 0.5;
    p.eta = 30.0;
    p.delta = 1e-4;
    p.theta0 = 1e-4;
    p.mu_alpha = p.mu_beta = 0.2;
    p.mu_eps = 0.8;
  }
  return p;
}

struct ExperimentSpec {
  ProblemSpec problem;
  std::vector<Method> methods{Method::gs};
  std::vector<std::uint64_t> seeds{0};
  int threads = 1;
  // Overrides applied on top of default_gs / default_sqpgs (x0 included).
  std::function<GSParams(GSParams)> gs_overrides;
  std::function<SQPGSParams(SQPGSParams)> sqpgs_overrides;
  int random_points = 2000;
  double random_radius2 = -1.0;  // < 0: the budget for data-poisoning, 25 otherwise
  double grid_lo = -5.0, grid_hi = 5.0;
  int grid_count = 21;
  bool keep_records = true;
};

struct MethodRun {
  Method method = Method::gs;
  std::uint64_t seed = 0;
  Vec x;
  double objective = 0.0;  // problem's own sense, at the actual lower-level solution
  std::optional<double> validation_error, test_error;
  double infeasibility = 0.0;
  int iterations = 0;
  std::string termination;  // empty for baselines
  int descents = 0, shrinks = 0, ls_fails = 0;
  int evaluations = 0;
  PhaseTiming timing;
  std::vector<RunRecord> records;
};

struct TableRow {
  std::string method;
  double time = 0.0;
  std::optional<double> validation_error, test_error, objective;
  double infeasibility = 0.0;
  int runs = 0;
};

struct ExperimentResult {
  std::string problem;
  bool regression = false;
  bool constrained = false;
  std::vector<std::uint64_t> seeds;
  std::vector<MethodRun> runs;
  std::vector<TableRow> table;
};

namespace detail {

inline void retrain(const BilevelProblem& P, MethodRun& run) {
  Vec model;
  run.objective = P.reported(near_exact_objective(P, run.x, &model));
  if (P.validation_error) run.validation_error = P.validation_error(model);
  if (P.test_error) run.test_error = P.test_error(model);
  run.infeasibility = P.infeasibility(run.x);
}

inline void copy_run(const RunResult& r, bool keep, MethodRun& run) {
  run.x = r.x_final;
  run.iterations = static_cast<int>(r.records.size());
  run.termination = to_string(r.termination);
  run.descents = r.descents;
  run.shrinks = r.shrinks;
  run.ls_fails = r.ls_fails;
  run.timing = r.timing;
  if (keep) run.records = r.records;
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

inline MethodRun run_method(const ExperimentSpec& spec, Method m, std::uint64_t seed) {
  const auto& ps = spec.problem;
  const bool split = m == Method::gs_split;
  if (split)
    require(ps.name == "elastic-net", "gs-split applies to elastic-net only", ErrorKind::config);
  const Instance inst = make_instance(ps, seed, split ? std::optional(EnEncoding::split) : std::nullopt);
  const BilevelProblem& P = inst.problem;
  MethodRun run;
  run.method = m;
  run.seed = seed;
  const auto t0 = bilevel::detail::Clock::now();
  switch (m) {
    case Method::gs:
    case Method::gs_split:
    case Method::gs_early: {
      require(P.r() == 0, "problem " + P.name + " has upper-level constraints; use sqpgs", ErrorKind::config);
      GSParams p = default_gs(ps, P);
      if (spec.gs_overrides) p = spec.gs_overrides(p);
      p.seed = seed;
      p.threads = spec.threads;
      if (m == Method::gs_early) p.stop_at_first_eta_hit = true;
      detail::copy_run(run_gs(P, p), spec.keep_records, run);
      break;
    }
    case Method::sqpgs: {
      SQPGSParams p = default_sqpgs(ps, P);
      if (spec.sqpgs_overrides) p = spec.sqpgs_overrides(p);
      p.seed = seed;
      p.threads = spec.threads;
      detail::copy_run(run_sqpgs(P, p), spec.keep_records, run);
      break;
    }
    case Method::grid: {
      require(P.n() == 2, "grid search needs a two-dimensional upper level", ErrorKind::config);
      const auto b = grid_search_baseline(P, spec.grid_lo, spec.grid_hi, spec.grid_count, spec.threads);
      run.x = b.best_point;
      run.evaluations = b.evaluations;
      break;
    }
    case Method::random: {
      const double r2 = spec.random_radius2 >= 0.0 ? spec.random_radius2
                                                   : (ps.name == "data-poisoning" ? ps.c_budget : 25.0);
      const auto b = random_search_baseline(P, spec.random_points, seed, r2, spec.threads);
      run.x = b.best_point;
      run.evaluations = b.evaluations;
      break;
    }
  }
  const auto t_ret = bilevel::detail::Clock::now();
  detail::retrain(P, run);
  if (m == Method::grid || m == Method::random) {
    run.timing.lower = bilevel::detail::seconds_since(t0);
    run.timing.total = run.timing.lower;
  } else {
    run.timing.lower += bilevel::detail::seconds_since(t_ret);
    run.timing.total = bilevel::detail::seconds_since(t0);
  }
  return run;
}

inline ExperimentResult run_experiment(const ExperimentSpec& spec,
                                       const std::function<void(const MethodRun&)>& on_run = {}) {
  require(!spec.methods.empty(), "no algorithms selected", ErrorKind::config);
  require(!spec.seeds.empty(), "no seeds selected", ErrorKind::config);
  require(spec.threads >= 1, "threads must be positive", ErrorKind::config);
  ExperimentResult res;
  res.problem = spec.problem.name;
  res.seeds = spec.seeds;
  res.regression = uses_regression_data(spec.problem.name);
  res.constrained = make_instance(spec.problem, spec.seeds.front()).problem.r() > 0;
  for (Method m : spec.methods)
    for (auto seed : spec.seeds) {
      res.runs.push_back(run_method(spec, m, seed));
      if (on_run) on_run(res.runs.back());
    }
  for (Method m : spec.methods) {
    TableRow row;
    row.method = method_label(m);
    std::vector<double> t, val, test, obj, inf;
    for (const auto& r : res.runs) {
      if (r.method != m) continue;
      t.push_back(r.timing.total);
      if (r.validation_error) val.push_back(*r.validation_error);
      if (r.test_error) test.push_back(*r.test_error);
      obj.push_back(r.objective);
      inf.push_back(r.infeasibility);
    }
    row.runs = static_cast<int>(t.size());
    row.time = detail::mean(t);
    if (!val.empty()) row.validation_error = detail::mean(val);
    if (!test.empty()) row.test_error = detail::mean(test);
    if (!res.regression) row.objective = detail::mean(obj);
    row.infeasibility = detail::mean(inf);
    res.table.push_back(row);
  }
  return res;
}

// ---------------------------------------------------------------- output

inline constexpr int schema_version = 1;

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

/// Everything reported except wall-clock times, so the file is a pure
/// function of config and seed.
inline json summary_json(const ExperimentResult& res) {
  json runs = json::array();
  for (const auto& r : res.runs) {
    json j = {{"method", method_name(r.method)},
              {"seed", r.seed},
              {"x", io::to_json(r.x)},
              {"objective", r.objective},
              {"validation_error", opt_json(r.validation_error)},
              {"test_error", opt_json(r.test_error)},
              {"infeasibility", r.infeasibility},
              {"iterations", r.iterations},
              {"termination", r.termination},
              {"descents", r.descents},
              {"shrinks", r.shrinks},
              {"ls_fails", r.ls_fails},
              {"evaluations", r.evaluations}};
    runs.push_back(std::move(j));
  }
  json table = json::array();
  for (const auto& t : res.table)
    table.push_back({{"method", t.method},
                     {"runs", t.runs},
                     {"validation_error", opt_json(t.validation_error)},
                     {"test_error", opt_json(t.test_error)},
                     {"objective", opt_json(t.objective)},
                     {"infeasibility", t.infeasibility}});
  return {{"schema", schema_version}, {"problem", res.problem}, {"seeds", res.seeds}, {"runs", runs},
          {"table", table}};
}

inline json timing_json(const ExperimentResult& res) {
  json runs = json::array();
  for (const auto& r : res.runs)
    runs.push_back({{"method", method_name(r.method)},
                    {"seed", r.seed},
                    {"lower", r.timing.lower},
                    {"qp", r.timing.qp},
                    {"total", r.timing.total}});
  json table = json::array();
  for (const auto& t : res.table) table.push_back({{"method", t.method}, {"time", t.time}});
  return {{"schema", schema_version}, {"runs", runs}, {"table", table}};
}

/// Method, Time, then Validation/Test error for the regression problems or
/// Objective otherwise, and Infeasibility when the problem is constrained.
inline std::string table_csv(const ExperimentResult& res) {
  std::ostringstream os;
  os << "Method,Time";
  if (res.regression)
    os << ",Validation error,Test error";
  else
    os << ",Objective";
  if (res.constrained) os << ",Infeasibility";
  os << '\n';
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  for (const auto& t : res.table) {
    os << t.method << ',' << num(t.time);
    if (res.regression)
      os << ',' << (t.validation_error ? num(*t.validation_error) : "") << ','
         << (t.test_error ? num(*t.test_error) : "");
    else
      os << ',' << (t.objective ? num(*t.objective) : "");
    if (res.constrained) os << ',' << num(t.infeasibility);
    os << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::config, "cannot write " + path.string());
  out << text;
}

inline void write_outputs(const ExperimentResult& res, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path base(dir);
  write_text(base / "summary.json", summary_json(res).dump(2) + "\n");
  write_text(base / "timing.json", timing_json(res).dump(2) + "\n");
  write_text(base / "table.csv", table_csv(res));
  std::ostringstream rec;
  for (const auto& r : res.runs)
    for (const auto& x : r.records) {
      json j = io::to_json(x);
      j["method"] = method_name(r.method);
      j["seed"] = r.seed;
      rec << j.dump() << '\n';
    }
  write_text(base / "records.jsonl", rec.str());
}

}  // namespace bilevel::experiment

#endif  // BILEVEL_EXPERIMENT_HPP
