#ifndef BILEVEL_IO_HPP
#define BILEVEL_IO_HPP

// Config loading (TOML or JSON, auto-detected) with strict key checking, and
// JSON serialization of solutions, Jacobians and run records.

#include <cstdint>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "bilevel/common.hpp"
#include "bilevel/gs.hpp"
#include "bilevel/lower.hpp"
#include "bilevel/poly.hpp"
#include "bilevel/sensitivity.hpp"
#include "bilevel/sqpgs.hpp"

namespace bilevel::io {

using json = nlohmann::json;

inline Error config_error(const std::string& what) { return Error(ErrorKind::config, what); }

// ---------------------------------------------------------------- parsing

namespace detail {

inline json from_toml(const toml::node& n, const std::string& path) {
  if (const auto* t = n.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = from_toml(v, path + "." + std::string(k.str()));
    return out;
  }
  if (const auto* a = n.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(from_toml(v, path + "[]"));
    return out;
  }
  if (const auto* v = n.as_integer()) return v->get();
  if (const auto* v = n.as_floating_point()) return v->get();
  if (const auto* v = n.as_boolean()) return v->get();
  if (const auto* v = n.as_string()) return v->get();
  throw config_error("config: unsupported TOML value at " + path);
}

}  // namespace detail

/// JSON when the first non-blank character is '{', TOML otherwise.
inline json parse_config_text(const std::string& text) {
  const auto pos = text.find_first_not_of(" \t\r\n");
  if (pos != std::string::npos && text[pos] == '{') {
    try {
      return json::parse(text);
    } catch (const json::parse_error& e) {
      throw config_error(std::string("config: invalid JSON: ") + e.what());
    }
  }
  try {
    return detail::from_toml(toml::parse(text), "");
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config: invalid TOML: " << e.description() << " (line " << e.source().begin.line << ")";
    throw config_error(os.str());
  }
}

inline json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Read access to one config table. Every key read is remembered; finish()
/// rejects the ones nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(std::make_shared<json>(j)), path_(std::move(path)) {
    if (!j_->is_object()) throw config_error("config: " + where() + " must be a table");
  }

  const std::string& path() const { return path_; }
  bool has(const std::string& key) const {
    used_.insert(key);
    return j_->contains(key);
  }

  template <class T>
  T get(const std::string& key, const T& fallback) const {
    return has(key) ? convert<T>(key) : fallback;
  }

  template <class T>
  T req(const std::string& key) const {
    if (!has(key)) throw config_error("config: missing key " + where(key));
    return convert<T>(key);
  }

  Section sub(const std::string& key) const {
    if (!has(key)) return Section(json::object(), full(key));
    return Section(j_->at(key), full(key));
  }

  const json& raw(const std::string& key) const {
    if (!has(key)) throw config_error("config: missing key " + where(key));
    return j_->at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_->items())
      if (!used_.count(k)) throw config_error("config: unknown key " + where(k));
  }

 private:
  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where(const std::string& key = "") const {
    const std::string p = key.empty() ? path_ : full(key);
    return p.empty() ? "<root>" : "'" + p + "'";
  }

  template <class T>
  T convert(const std::string& key) const {
    const json& v = j_->at(key);
    try {
      if constexpr (std::is_same_v<T, Vec>) {
        if (!v.is_array()) throw config_error("config: " + where(key) + " must be an array of numbers");
        Vec out(static_cast<Eigen::Index>(v.size()));
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (!v[i].is_number()) throw config_error("config: " + where(key) + " must be an array of numbers");
          out(static_cast<Eigen::Index>(i)) = v[i].get<double>();
        }
        return out;
      } else if constexpr (std::is_same_v<T, Mat>) {
        if (!v.is_array()) throw config_error("config: " + where(key) + " must be an array of rows");
        const std::size_t rows = v.size();
        const std::size_t cols = rows ? v[0].size() : 0;
        Mat out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (std::size_t i = 0; i < rows; ++i) {
          if (!v[i].is_array() || v[i].size() != cols)
            throw config_error("config: " + where(key) + " rows must have equal length");
          for (std::size_t k = 0; k < cols; ++k) {
            if (!v[i][k].is_number()) throw config_error("config: " + where(key) + " must hold numbers");
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = v[i][k].get<double>();
          }
        }
        return out;
      } else if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw config_error("config: " + where(key) + " must be a number");
        return v.get<double>();
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!v.is_number_integer()) throw config_error("config: " + where(key) + " must be an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.get<std::int64_t>() < 0 && v.is_number_integer() && !v.is_number_unsigned())
            throw config_error("config: " + where(key) + " must be nonnegative");
        }
        return v.get<T>();
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw config_error("config: " + where(key) + " must be true or false");
        return v.get<bool>();
      } else {
        if (!v.is_string()) throw config_error("config: " + where(key) + " must be a string");
        return v.get<T>();
      }
    } catch (const json::exception& e) {
      throw config_error("config: " + where(key) + ": " + e.what());
    }
  }

  std::shared_ptr<json> j_;
  std::string path_;
  mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------- builders

namespace detail {

inline std::vector<poly::Piece> pieces_from(const Section& sec, Eigen::Index s) {
  std::vector<poly::Piece> out;
  const json& arr = sec.raw("max_pieces");
  if (!arr.is_array()) throw config_error("config: '" + sec.path() + ".max_pieces' must be an array");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    Section p(arr[i], sec.path() + ".max_pieces[" + std::to_string(i) + "]");
    poly::Piece pc{p.req<Vec>("a"), p.get<double>("alpha", 0.0)};
    p.finish();
    if (pc.a.size() != s) throw config_error("config: '" + p.path() + ".a' has the wrong length");
    out.push_back(std::move(pc));
  }
  return out;
}

inline std::vector<poly::DomRow> rows_from(const Section& sec, Eigen::Index s) {
  std::vector<poly::DomRow> out;
  if (!sec.has("dom_rows")) return out;
  const json& arr = sec.raw("dom_rows");
  if (!arr.is_array()) throw config_error("config: '" + sec.path() + ".dom_rows' must be an array");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    Section r(arr[i], sec.path() + ".dom_rows[" + std::to_string(i) + "]");
    poly::DomRow row{r.req<Vec>("b"), r.get<double>("beta", 0.0)};
    r.finish();
    if (row.b.size() != s) throw config_error("config: '" + r.path() + ".b' has the wrong length");
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace detail

/// {"preset": "l1_pair"|"nonpos_indicator"|"max"|"hinge"|"zero", ...},
/// {"s", "max_pieces": [{"a", "alpha"}], "dom_rows": [{"b", "beta"}]}, or
/// {"s", "blocks": [{"coords", "max_pieces", "dom_rows"}]}.
inline poly::EpiPolyhedralFn poly_from_config(const Section& sec) {
  poly::EpiPolyhedralFn h;
  try {
    if (sec.has("preset")) {
      const auto name = sec.req<std::string>("preset");
      if (name == "l1_pair") {
        h = poly::l1_pair(sec.req<int>("d"), sec.get<double>("scale", 1.0));
      } else if (name == "hinge") {
        h = poly::hinge(sec.req<int>("s"), sec.get<double>("scale", 1.0));
      } else if (name == "nonpos_indicator") {
        h = poly::nonpos_indicator(sec.req<int>("s"));
      } else if (name == "max") {
        h = poly::max_of(sec.req<int>("s"));
      } else if (name == "zero") {
        h = poly::zero_fn(sec.req<int>("s"));
      } else {
        throw config_error("config: unknown h preset '" + name + "'");
      }
    } else if (sec.has("blocks")) {
      const auto s = sec.req<int>("s");
      const json& arr = sec.raw("blocks");
      if (!arr.is_array()) throw config_error("config: '" + sec.path() + ".blocks' must be an array");
      std::vector<poly::Block> blocks;
      for (std::size_t i = 0; i < arr.size(); ++i) {
        Section b(arr[i], sec.path() + ".blocks[" + std::to_string(i) + "]");
        const Vec coords = b.req<Vec>("coords");
        const auto nb = coords.size();
        const auto pcs = detail::pieces_from(b, nb);
        const auto rows = detail::rows_from(b, nb);
        b.finish();
        poly::Block blk;
        for (Eigen::Index k = 0; k < nb; ++k) blk.coords.push_back(static_cast<Eigen::Index>(coords(k)));
        blk.A.resize(static_cast<Eigen::Index>(pcs.size()), nb);
        blk.alpha.resize(static_cast<Eigen::Index>(pcs.size()));
        for (std::size_t j = 0; j < pcs.size(); ++j) {
          blk.A.row(static_cast<Eigen::Index>(j)) = pcs[j].a.transpose();
          blk.alpha(static_cast<Eigen::Index>(j)) = pcs[j].alpha;
        }
        blk.B.resize(static_cast<Eigen::Index>(rows.size()), nb);
        blk.beta.resize(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t j = 0; j < rows.size(); ++j) {
          blk.B.row(static_cast<Eigen::Index>(j)) = rows[j].b.transpose();
          blk.beta(static_cast<Eigen::Index>(j)) = rows[j].beta;
        }
        blocks.push_back(std::move(blk));
      }
      h = poly::EpiPolyhedralFn::separable(s, std::move(blocks));
    } else {
      const auto s = sec.req<int>("s");
      h = poly::EpiPolyhedralFn(s, detail::pieces_from(sec, s), detail::rows_from(sec, s));
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::config) throw;
    throw config_error("config: '" + sec.path() + "': " + e.what());
  }
  sec.finish();
  return h;
}

inline LowerOptions lower_options_from(const Section& sec, LowerOptions o = {}) {
  o.tol_ll = sec.get<double>("tol_ll", o.tol_ll);
  o.max_iter = sec.get<int>("max_iter", o.max_iter);
  o.tol_act = sec.get<double>("tol_act", o.tol_act);
  const auto m = sec.get<std::string>("method", o.method == LowerMethod::newton ? "newton" : "accelerated");
  if (m == "newton")
    o.method = LowerMethod::newton;
  else if (m == "accelerated")
    o.method = LowerMethod::accelerated;
  else
    throw config_error("config: '" + sec.path() + ".method' must be newton or accelerated");
  sec.finish();
  return o;
}

inline SensitivityOptions sensitivity_options_from(const Section& sec, SensitivityOptions o = {}) {
  o.cond_threshold = sec.get<double>("cond_threshold", o.cond_threshold);
  o.tol_act = sec.get<double>("tol_act", o.tol_act);
  sec.finish();
  return o;
}

/// Reads [gs] keys over `p`; x0 must already have the right size.
inline GSParams gs_params_from(const Section& sec, GSParams p) {
  p.x0 = sec.get<Vec>("x0", p.x0);
  p.eta0 = sec.get<double>("eta0", p.eta0);
  p.alpha0 = sec.get<double>("alpha0", p.alpha0);
  p.beta0 = sec.get<double>("beta0", p.beta0);
  p.eps0 = sec.get<double>("eps0", p.eps0);
  p.eta_opt = sec.get<double>("eta_opt", p.eta_opt);
  p.eps_opt = sec.get<double>("eps_opt", p.eps_opt);
  p.alpha_opt = sec.get<double>("alpha_opt", p.alpha_opt);
  p.beta_opt = sec.get<double>("beta_opt", p.beta_opt);
  p.mu_eta = sec.get<double>("mu_eta", p.mu_eta);
  p.mu_eps = sec.get<double>("mu_eps", p.mu_eps);
  p.mu_alpha = sec.get<double>("mu_alpha", p.mu_alpha);
  p.mu_beta = sec.get<double>("mu_beta", p.mu_beta);
  p.delta = sec.get<double>("delta", p.delta);
  p.gamma = sec.get<double>("gamma", p.gamma);
  p.N_sam = sec.get<int>("N_sam", p.N_sam);
  p.max_iter = sec.get<int>("max_iter", p.max_iter);
  p.max_backtracks = sec.get<int>("max_backtracks", p.max_backtracks);
  p.include_center = sec.get<bool>("include_center", p.include_center);
  p.stop_at_first_eta_hit = sec.get<bool>("stop_at_first_eta_hit", p.stop_at_first_eta_hit);
  p.fixed_radius = sec.get<bool>("fixed_radius", p.fixed_radius);
  p.max_resample = sec.get<int>("max_resample", p.max_resample);
  p.sens = sensitivity_options_from(sec.sub("sensitivity"), p.sens);
  sec.finish();
  return p;
}

inline SQPGSParams sqpgs_params_from(const Section& sec, SQPGSParams p) {
  p.x0 = sec.get<Vec>("x0", p.x0);
  p.rho0 = sec.get<double>("rho0", p.rho0);
  p.theta0 = sec.get<double>("theta0", p.theta0);
  p.eta = sec.get<double>("eta", p.eta);
  p.mu_rho = sec.get<double>("mu_rho", p.mu_rho);
  p.mu_theta = sec.get<double>("mu_theta", p.mu_theta);
  p.mu_alpha = sec.get<double>("mu_alpha", p.mu_alpha);
  p.mu_beta = sec.get<double>("mu_beta", p.mu_beta);
  p.mu_eps = sec.get<double>("mu_eps", p.mu_eps);
  p.alpha0 = sec.get<double>("alpha0", p.alpha0);
  p.beta0 = sec.get<double>("beta0", p.beta0);
  p.eps0 = sec.get<double>("eps0", p.eps0);
  p.alpha_opt = sec.get<double>("alpha_opt", p.alpha_opt);
  p.beta_opt = sec.get<double>("beta_opt", p.beta_opt);
  p.eps_opt = sec.get<double>("eps_opt", p.eps_opt);
  p.delta = sec.get<double>("delta", p.delta);
  p.gamma = sec.get<double>("gamma", p.gamma);
  p.N_sam = sec.get<int>("N_sam", p.N_sam);
  p.max_iter = sec.get<int>("max_iter", p.max_iter);
  p.max_backtracks = sec.get<int>("max_backtracks", p.max_backtracks);
  p.include_center = sec.get<bool>("include_center", p.include_center);
  p.max_resample = sec.get<int>("max_resample", p.max_resample);
  p.qp_tol = sec.get<double>("qp_tol", p.qp_tol);
  p.sens = sensitivity_options_from(sec.sub("sensitivity"), p.sens);
  sec.finish();
  return p;
}

// ---------------------------------------------------------------- serialization

inline json to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline json to_json(const Mat& M) {
  json a = json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) a.push_back(to_json(Vec(M.row(i).transpose())));
  return a;
}

inline Vec vec_from_json(const json& a) {
  Vec v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

/// Non-finite doubles become the strings "inf", "-inf", "nan".
inline json number(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

inline json to_json(const poly::ActiveSets& a) {
  json out = json::object();
  out["J_active"] = a.J_active;
  out["I_active"] = a.I_active;
  out["tol_act"] = a.tol_act;
  return out;
}

inline json to_json(const PrimalDualSolution& s) {
  json out = json::object();
  out["x"] = to_json(s.x);
  out["y"] = to_json(s.y);
  out["p"] = to_json(s.p);
  out["w_prox"] = to_json(s.w_prox);
  out["alpha"] = s.alpha;
  out["beta"] = s.beta;
  out["iterations"] = s.iterations;
  out["grad_norm"] = s.grad_norm;
  out["active"] = to_json(s.active);
  json sig = json::array(), tau = json::array();
  for (const auto& v : s.rep.sigma) sig.push_back(to_json(v));
  for (const auto& v : s.rep.tau) tau.push_back(to_json(v));
  out["sigma"] = sig;
  out["tau"] = tau;
  out["degenerate"] = s.rep.degenerate;
  return out;
}

inline json to_json(const SensitivityResult& r, bool with_matrices = false) {
  json out = json::object();
  out["grad_Y"] = to_json(r.grad_Y);
  out["grad_P"] = to_json(r.grad_P);
  out["cond_BAB"] = number(r.cond_BAB);
  out["ri_flag"] = r.ri_flag;
  out["rank"] = r.rank;
  if (with_matrices) {
    out["A"] = to_json(r.A);
    out["B"] = to_json(r.B);
  }
  return out;
}

inline json to_json(const RunRecord& r) {
  json out = json::object();
  out["iter"] = r.iter;
  out["x"] = to_json(r.x);
  out["event"] = to_string(r.event);
  out["w_norm"] = r.w_norm;
  out["t"] = r.t;
  out["alpha"] = r.alpha;
  out["beta"] = r.beta;
  out["eps"] = r.eps;
  out["eta"] = r.eta;
  out["f_val"] = r.f_val;
  if (r.event == RunEvent::descent) out["f_trial"] = r.f_trial;
  out["wolfe_gap"] = r.wolfe_gap;
  out["backtracks"] = r.backtracks;
  out["resampled"] = r.resampled;
  if (r.rho) out["rho"] = *r.rho;
  if (r.theta) out["theta"] = *r.theta;
  if (r.delta_q) out["delta_q"] = *r.delta_q;
  if (r.infeasibility) out["infeasibility"] = *r.infeasibility;
  if (r.phi) out["phi"] = *r.phi;
  out["wall_time"] = r.wall_time;
  return out;
}

}  // namespace bilevel::io

#endif  // BILEVEL_IO_HPP
