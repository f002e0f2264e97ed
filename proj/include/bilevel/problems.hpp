#ifndef BILEVEL_PROBLEMS_HPP
#define BILEVEL_PROBLEMS_HPP

// Built-in bilevel problems. Upper-level objectives are stored in
// minimization form: a maximization problem carries -f and sense = max.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "bilevel/common.hpp"
#include "bilevel/lower.hpp"
#include "bilevel/parallel.hpp"
#include "bilevel/poly.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {

enum class Sense { min, max };

struct UpperConstraint {
  std::string name;
  std::function<double(const Vec&)> c;
  std::function<Vec(const Vec&)> grad;
};

struct BilevelProblem {
  std::string name;
  LowerLevelOracles lower;
  std::function<double(const Vec&, const Vec&)> f_val;
  std::function<Vec(const Vec&, const Vec&)> f_grad_x;
  std::function<Vec(const Vec&, const Vec&)> f_grad_y;
  std::vector<UpperConstraint> constraints;
  Sense sense = Sense::min;

  // Optional reporting hooks on the model coefficients model_of(y).
  std::function<Vec(const Vec&)> model_of;
  std::function<double(const Vec&)> validation_error;
  std::function<double(const Vec&)> test_error;

  // Solution of the unregularized lower level, when a dedicated solver
  // exists. Used for retraining and the baselines.
  std::function<Vec(const Vec&)> actual_lower;

  // Typical x and spread used by the oracle self-check.
  Vec x_typical;
  double x_spread = 1.0;

  Eigen::Index n() const { return lower.n; }
  Eigen::Index m() const { return lower.m; }
  Eigen::Index s() const { return lower.s; }
  Eigen::Index r() const { return static_cast<Eigen::Index>(constraints.size()); }

  /// Objective value in the problem's own sense.
  double reported(double f_min_form) const { return sense == Sense::max ? -f_min_form : f_min_form; }

  Vec model(const Vec& y) const { return model_of ? model_of(y) : y; }

  double infeasibility(const Vec& x) const {
    double v = 0.0;
    for (const auto& k : constraints) v += std::max(k.c(x), 0.0);
    return v;
  }

  void validate() const {
    lower.validate();
    require(f_val && f_grad_x && f_grad_y, "problem " + name + ": missing upper-level oracle");
    for (const auto& k : constraints) require(k.c && k.grad, "problem " + name + ": incomplete constraint");
  }
};

// ---------------------------------------------------------------- analytic examples

inline BilevelProblem make_example1() {
  BilevelProblem P;
  P.name = "example1";
  auto& o = P.lower;
  o.n = 1;
  o.m = 1;
  o.s = 2;
  o.g_val = [](const Vec& x, const Vec& y) { return x(0) * y(0); };
  o.g_grad_y = [](const Vec& x, const Vec&) { return Vec::Constant(1, x(0)); };
  o.g_hess_yy = [](const Vec&, const Vec&) { return Mat::Zero(1, 1); };
  o.g_mixed_xy = [](const Vec&, const Vec&) { return Mat::Ones(1, 1); };
  o.G_val = [](const Vec& x, const Vec&) {
    Vec G(2);
    G << 0.0, -x(0) * x(0);
    return G;
  };
  o.G_jac_y = [](const Vec&, const Vec&) { return Mat::Zero(2, 1); };
  o.G_jac_x = [](const Vec& x, const Vec&) {
    Mat J(2, 1);
    J << 0.0, -2.0 * x(0);
    return J;
  };
  o.h = poly::EpiPolyhedralFn(2, {{Vec::Unit(2, 0), 0.0}}, {{Vec::Unit(2, 1), 0.0}});
  P.f_val = [](const Vec&, const Vec& y) { return y(0); };
  P.f_grad_x = [](const Vec&, const Vec&) { return Vec::Zero(1); };
  P.f_grad_y = [](const Vec&, const Vec&) { return Vec::Ones(1); };
  P.x_typical = Vec::Zero(1);
  P.x_spread = 2.0;
  return P;
}

inline BilevelProblem make_example3() {
  BilevelProblem P;
  P.name = "example3";
  auto& o = P.lower;
  o.n = 1;
  o.m = 1;
  o.s = 2;
  o.g_val = [](const Vec& x, const Vec& y) { return y(0) * y(0) + x(0) * y(0); };
  o.g_grad_y = [](const Vec& x, const Vec& y) { return Vec::Constant(1, 2.0 * y(0) + x(0)); };
  o.g_hess_yy = [](const Vec&, const Vec&) { return Mat::Constant(1, 1, 2.0); };
  o.g_mixed_xy = [](const Vec&, const Vec&) { return Mat::Ones(1, 1); };
  o.G_val = [](const Vec& x, const Vec& y) {
    Vec G(2);
    G << x(0) + y(0) - 1.0, x(0) - y(0) - 100.0;
    return G;
  };
  o.G_jac_y = [](const Vec&, const Vec&) {
    Mat J(2, 1);
    J << 1.0, -1.0;
    return J;
  };
  o.G_jac_x = [](const Vec&, const Vec&) { return Mat::Ones(2, 1); };
  o.h = poly::nonpos_indicator(2);
  P.f_val = [](const Vec&, const Vec& y) { return y(0) * y(0); };
  P.f_grad_x = [](const Vec&, const Vec&) { return Vec::Zero(1); };
  P.f_grad_y = [](const Vec&, const Vec& y) { return Vec::Constant(1, 2.0 * y(0)); };
  P.x_typical = Vec::Zero(1);
  P.x_spread = 5.0;
  return P;
}

/// Ridge fixture: g = |A y - b - E x|^2 with a zero-valued h and f = |y|^2.
struct RidgeData {
  Mat A, E;
  Vec b;
};

inline RidgeData make_ridge_data(Eigen::Index n = 2, Eigen::Index m = 3, Eigen::Index rows = 6,
                                 std::uint64_t seed = 7) {
  Rng rng(seed);
  RidgeData d;
  d.A = Mat(rows, m);
  d.E = Mat(rows, n);
  for (Eigen::Index i = 0; i < rows; ++i) {
    d.A.row(i) = rng.normal_vec(m).transpose();
    d.E.row(i) = rng.normal_vec(n).transpose();
  }
  d.b = rng.normal_vec(rows);
  return d;
}

inline BilevelProblem make_ridge(const RidgeData& data) {
  auto D = std::make_shared<const RidgeData>(data);
  BilevelProblem P;
  P.name = "ridge";
  auto& o = P.lower;
  o.n = D->E.cols();
  o.m = D->A.cols();
  o.s = 1;
  auto resid = [D](const Vec& x, const Vec& y) -> Vec { return D->A * y - D->b - D->E * x; };
  o.g_val = [resid](const Vec& x, const Vec& y) { return resid(x, y).squaredNorm(); };
  o.g_grad_y = [D, resid](const Vec& x, const Vec& y) -> Vec { return 2.0 * D->A.transpose() * resid(x, y); };
  o.g_hess_yy = [D](const Vec&, const Vec&) -> Mat { return 2.0 * D->A.transpose() * D->A; };
  o.g_mixed_xy = [D](const Vec&, const Vec&) -> Mat { return -2.0 * D->A.transpose() * D->E; };
  o.G_val = [](const Vec&, const Vec& y) { return Vec::Constant(1, y.sum()); };
  o.G_jac_y = [m = o.m](const Vec&, const Vec&) -> Mat { return Mat::Ones(1, m); };
  o.G_jac_x = [n = o.n](const Vec&, const Vec&) -> Mat { return Mat::Zero(1, n); };
  o.h = poly::zero_fn(1);
  P.f_val = [](const Vec&, const Vec& y) { return y.squaredNorm(); };
  P.f_grad_x = [n = o.n](const Vec&, const Vec&) -> Vec { return Vec::Zero(n); };
  P.f_grad_y = [](const Vec&, const Vec& y) -> Vec { return 2.0 * y; };
  P.x_typical = Vec::Zero(o.n);
  return P;
}

/// f = (x - 3)^2 over a lower level whose solution is y = 0.
inline BilevelProblem make_smooth_sanity() {
  BilevelProblem P;
  P.name = "smooth";
  auto& o = P.lower;
  o.n = 1;
  o.m = 1;
  o.s = 1;
  o.g_val = [](const Vec&, const Vec& y) { return 0.5 * y(0) * y(0); };
  o.g_grad_y = [](const Vec&, const Vec& y) -> Vec { return y; };
  o.g_hess_yy = [](const Vec&, const Vec&) { return Mat::Identity(1, 1); };
  o.g_mixed_xy = [](const Vec&, const Vec&) { return Mat::Zero(1, 1); };
  o.G_val = [](const Vec&, const Vec&) { return Vec::Zero(1); };
  o.G_jac_y = [](const Vec&, const Vec&) { return Mat::Zero(1, 1); };
  o.G_jac_x = [](const Vec&, const Vec&) { return Mat::Zero(1, 1); };
  o.h = poly::zero_fn(1);
  P.f_val = [](const Vec& x, const Vec&) { return (x(0) - 3.0) * (x(0) - 3.0); };
  P.f_grad_x = [](const Vec& x, const Vec&) { return Vec::Constant(1, 2.0 * (x(0) - 3.0)); };
  P.f_grad_y = [](const Vec&, const Vec&) { return Vec::Zero(1); };
  P.x_typical = Vec::Zero(1);
  P.x_spread = 3.0;
  return P;
}

/// minimize (x1 - 2)^2 subject to x1 - 1 <= 0, trivial lower level.
inline BilevelProblem make_constrained_sanity() {
  BilevelProblem P = make_smooth_sanity();
  P.name = "constrained";
  P.f_val = [](const Vec& x, const Vec&) { return (x(0) - 2.0) * (x(0) - 2.0); };
  P.f_grad_x = [](const Vec& x, const Vec&) { return Vec::Constant(1, 2.0 * (x(0) - 2.0)); };
  P.constraints.push_back({"x1 <= 1", [](const Vec& x) { return x(0) - 1.0; },
                           [](const Vec&) { return Vec::Ones(1); }});
  return P;
}

/// Declarative problem with quadratic g and affine G:
///   g = 1/2 y'Qy + y'(Cx + q),  G = K y + L x + k0,
///   f = 1/2 |y - y_target|^2 + (x_weight/2)|x|^2.
struct LinearQuadraticSpec {
  Mat Q, C, K, L;
  Vec q, k0, y_target;
  double x_weight = 0.0;
  poly::EpiPolyhedralFn h;
};

inline BilevelProblem make_linear_quadratic(const LinearQuadraticSpec& spec) {
  const auto m = spec.Q.rows();
  const auto n = spec.C.cols();
  const auto s = spec.K.rows();
  check_dim(spec.Q.cols(), m, "linear_quadratic: Q");
  check_dim(spec.C.rows(), m, "linear_quadratic: C rows");
  check_dim(spec.q.size(), m, "linear_quadratic: q");
  check_dim(spec.K.cols(), m, "linear_quadratic: K cols");
  check_dim(spec.L.rows(), s, "linear_quadratic: L rows");
  check_dim(spec.L.cols(), n, "linear_quadratic: L cols");
  check_dim(spec.k0.size(), s, "linear_quadratic: k0");
  check_dim(spec.y_target.size(), m, "linear_quadratic: y_target");
  check_dim(spec.h.s(), s, "linear_quadratic: h");
  require((spec.Q - spec.Q.transpose()).cwiseAbs().maxCoeff() <= 1e-12, "linear_quadratic: Q must be symmetric");
  auto S = std::make_shared<const LinearQuadraticSpec>(spec);
  BilevelProblem P;
  P.name = "linear-quadratic";
  auto& o = P.lower;
  o.n = n;
  o.m = m;
  o.s = s;
  o.g_val = [S](const Vec& x, const Vec& y) { return 0.5 * y.dot(S->Q * y) + y.dot(S->C * x + S->q); };
  o.g_grad_y = [S](const Vec& x, const Vec& y) -> Vec { return S->Q * y + S->C * x + S->q; };
  o.g_hess_yy = [S](const Vec&, const Vec&) -> Mat { return S->Q; };
  o.g_mixed_xy = [S](const Vec&, const Vec&) -> Mat { return S->C; };
  o.G_val = [S](const Vec& x, const Vec& y) -> Vec { return S->K * y + S->L * x + S->k0; };
  o.G_jac_y = [S](const Vec&, const Vec&) -> Mat { return S->K; };
  o.G_jac_x = [S](const Vec&, const Vec&) -> Mat { return S->L; };
  o.h = spec.h;
  P.f_val = [S](const Vec& x, const Vec& y) {
    return 0.5 * (y - S->y_target).squaredNorm() + 0.5 * S->x_weight * x.squaredNorm();
  };
  P.f_grad_x = [S](const Vec& x, const Vec&) -> Vec { return S->x_weight * x; };
  P.f_grad_y = [S](const Vec&, const Vec& y) -> Vec { return y - S->y_target; };
  P.x_typical = Vec::Zero(n);
  return P;
}

// ---------------------------------------------------------------- elastic-net solver

/// argmin 0.5 y'Hy - c'y + l1 |y|_1 for H positive definite. Cyclic
/// coordinate descent identifies the support and signs; the answer is then
/// the solution of the reduced linear system, accepted only when it is sign
/// consistent and satisfies the subgradient condition off the support.
inline Vec elastic_net_exact(const Mat& H, const Vec& c, double l1, const std::optional<Vec>& y0 = std::nullopt,
                             int max_sweeps = 100000) {
  const auto d = c.size();
  require(H.rows() == d && H.cols() == d, "elastic_net_exact: dimension mismatch");
  require(l1 >= 0.0, "elastic_net_exact: l1 must be nonnegative");
  Vec y = y0 ? *y0 : Vec::Zero(d);
  check_dim(y.size(), d, "elastic_net_exact: y0");
  Vec g = H * y - c;
  const double scale = 1.0 + c.cwiseAbs().maxCoeff();

  auto polish = [&](Vec& out) {
    std::vector<Eigen::Index> S;
    for (Eigen::Index j = 0; j < d; ++j)
      if (y(j) != 0.0) S.push_back(j);
    const auto k = static_cast<Eigen::Index>(S.size());
    out = Vec::Zero(d);
    if (k > 0) {
      Mat HS(k, k);
      Vec rhs(k);
      for (Eigen::Index a = 0; a < k; ++a) {
        rhs(a) = c(S[a]) - l1 * (y(S[a]) > 0 ? 1.0 : -1.0);
        for (Eigen::Index b = 0; b < k; ++b) HS(a, b) = H(S[a], S[b]);
      }
      const Vec z = HS.ldlt().solve(rhs);
      for (Eigen::Index a = 0; a < k; ++a) {
        if (z(a) * y(S[a]) <= 0.0) return false;
        out(S[a]) = z(a);
      }
    }
    const Vec gr = H * out - c;
    for (Eigen::Index j = 0; j < d; ++j)
      if (out(j) == 0.0 && std::abs(gr(j)) > l1 + 1e-12 * scale) return false;
    return true;
  };

  Vec exact;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double change = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double hjj = H(j, j);
      const double z = hjj * y(j) - g(j);
      const double nj = (z > l1 ? z - l1 : (z < -l1 ? z + l1 : 0.0)) / hjj;
      const double dj = nj - y(j);
      if (dj != 0.0) {
        g += dj * H.col(j);
        y(j) = nj;
        change = std::max(change, std::abs(dj) * std::sqrt(hjj));
      }
    }
    if ((sweep % 10 == 9 || change <= 1e-10 * scale) && polish(exact)) return exact;
    if (change == 0.0) break;
  }
  if (polish(exact)) return exact;
  throw ConvergenceError("elastic_net_exact: support did not settle", y, (H * y - c).norm());
}

// ---------------------------------------------------------------- synthetic regression data

struct SyntheticRegressionData {
  Mat A_train, A_val, A_test;
  Vec b_train, b_val, b_test;
  Vec x_true;
  std::uint64_t seed = 0;
  Eigen::Index d = 0, n_tr = 0, n_val = 0, n_test = 0;
  double snr = 2.0;
  double sigma = 0.0;
};

inline Mat ar_covariance(Eigen::Index d, double rho = 0.5) {
  Mat S(d, d);
  for (Eigen::Index j = 0; j < d; ++j)
    for (Eigen::Index k = 0; k < d; ++k) S(j, k) = std::pow(rho, static_cast<double>(std::abs(j - k)));
  return S;
}

/// Gaussian rows with covariance 0.5^{|j-k|}, responses from a model with 15
/// unit coefficients at seeded random positions, and noise variance
/// x_true' Sigma x_true / snr shared by all three splits.
inline SyntheticRegressionData generate_regression_data(Eigen::Index d, Eigen::Index n_tr, Eigen::Index n_val,
                                                        Eigen::Index n_test, double snr, std::uint64_t seed) {
  require(d >= 15, "generate_regression_data: d must be at least 15");
  require(n_tr > 0 && n_val > 0 && n_test >= 0, "generate_regression_data: split sizes must be positive");
  require(snr > 0.0, "generate_regression_data: snr must be positive");
  SyntheticRegressionData D;
  D.seed = seed;
  D.d = d;
  D.n_tr = n_tr;
  D.n_val = n_val;
  D.n_test = n_test;
  D.snr = snr;

  Rng rng(seed);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(d));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  for (std::size_t i = idx.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.engine()() % (i + 1));
    std::swap(idx[i], idx[j]);
  }
  D.x_true = Vec::Zero(d);
  for (int k = 0; k < 15; ++k) D.x_true(idx[static_cast<std::size_t>(k)]) = 1.0;

  const Mat Sigma = ar_covariance(d);
  const Mat Lc = Eigen::LLT<Mat>(Sigma).matrixL();
  D.sigma = std::sqrt(D.x_true.dot(Sigma * D.x_true) / snr);

  auto draw = [&](Eigen::Index rows, Mat& A, Vec& b) {
    A.resize(rows, d);
    for (Eigen::Index i = 0; i < rows; ++i) A.row(i) = (Lc * rng.normal_vec(d)).transpose();
    b = A * D.x_true;
    for (Eigen::Index i = 0; i < rows; ++i) b(i) += D.sigma * rng.normal();
  };
  draw(n_tr, D.A_train, D.b_train);
  draw(n_val, D.A_val, D.b_val);
  draw(n_test, D.A_test, D.b_test);
  return D;
}

inline double mean_squared_error(const Mat& A, const Vec& b, const Vec& x) {
  return A.rows() ? (A * x - b).squaredNorm() / static_cast<double>(A.rows()) : 0.0;
}

namespace detail {

inline void write_matrix_csv(const std::string& path, const Mat& M) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write " + path, ErrorKind::config);
  out.precision(17);
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index j = 0; j < M.cols(); ++j) out << (j ? "," : "") << M(i, j);
    out << '\n';
  }
}

inline Mat read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot read " + path, ErrorKind::config);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const auto next = line.find(',', pos);
      row.push_back(std::stod(line.substr(pos, next - pos)));
      if (next == std::string::npos) break;
      pos = next + 1;
    }
    rows.push_back(std::move(row));
  }
  const auto r = static_cast<Eigen::Index>(rows.size());
  const auto c = r ? static_cast<Eigen::Index>(rows[0].size()) : 0;
  Mat M(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    require(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) == c, "ragged csv " + path,
            ErrorKind::config);
    for (Eigen::Index j = 0; j < c; ++j) M(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return M;
}

}  // namespace detail

/// Writes <dir>/{A_train,b_train,...,x_true}.csv and manifest.json.
inline void export_regression_data(const SyntheticRegressionData& D, const std::string& dir) {
  auto col = [](const Vec& v) { return Mat(v); };
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  detail::write_matrix_csv(dir + "/A_train.csv", D.A_train);
  detail::write_matrix_csv(dir + "/A_val.csv", D.A_val);
  detail::write_matrix_csv(dir + "/A_test.csv", D.A_test);
  detail::write_matrix_csv(dir + "/b_train.csv", col(D.b_train));
  detail::write_matrix_csv(dir + "/b_val.csv", col(D.b_val));
  detail::write_matrix_csv(dir + "/b_test.csv", col(D.b_test));
  detail::write_matrix_csv(dir + "/x_true.csv", col(D.x_true));
  nlohmann::json man = {{"schema", 1}, {"seed", D.seed}, {"d", D.d},          {"n_tr", D.n_tr},
                        {"n_val", D.n_val}, {"n_test", D.n_test}, {"snr", D.snr}, {"sigma", D.sigma}};
  std::ofstream out(dir + "/manifest.json");
  require(static_cast<bool>(out), "cannot write manifest in " + dir, ErrorKind::config);
  out << man.dump(2) << '\n';
}

inline SyntheticRegressionData import_regression_data(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  require(static_cast<bool>(in), "cannot read manifest in " + dir, ErrorKind::config);
  const auto man = nlohmann::json::parse(in);
  SyntheticRegressionData D;
  D.seed = man.at("seed").get<std::uint64_t>();
  D.d = man.at("d").get<Eigen::Index>();
  D.n_tr = man.at("n_tr").get<Eigen::Index>();
  D.n_val = man.at("n_val").get<Eigen::Index>();
  D.n_test = man.at("n_test").get<Eigen::Index>();
  D.snr = man.at("snr").get<double>();
  D.sigma = man.at("sigma").get<double>();
  D.A_train = detail::read_matrix_csv(dir + "/A_train.csv");
  D.A_val = detail::read_matrix_csv(dir + "/A_val.csv");
  D.A_test = detail::read_matrix_csv(dir + "/A_test.csv");
  D.b_train = detail::read_matrix_csv(dir + "/b_train.csv").col(0);
  D.b_val = detail::read_matrix_csv(dir + "/b_val.csv").col(0);
  D.b_test = D.n_test ? Vec(detail::read_matrix_csv(dir + "/b_test.csv").col(0)) : Vec();
  D.x_true = detail::read_matrix_csv(dir + "/x_true.csv").col(0);
  return D;
}

// ---------------------------------------------------------------- elastic net

enum class EnEncoding { composite, split };

namespace detail {

inline void attach_regression_metrics(BilevelProblem& P, const std::shared_ptr<const SyntheticRegressionData>& D) {
  P.validation_error = [D](const Vec& model) { return mean_squared_error(D->A_val, D->b_val, model); };
  P.test_error = [D](const Vec& model) { return mean_squared_error(D->A_test, D->b_test, model); };
}

}  // namespace detail

/// Upper variable x = (lambda1, lambda2); lower level trains the elastic-net
/// model with weights exp(lambda1) on |.|_1 and exp(lambda2)/2 on |.|^2.
inline BilevelProblem make_elastic_net(const SyntheticRegressionData& data, EnEncoding enc = EnEncoding::composite) {
  auto D = std::make_shared<const SyntheticRegressionData>(data);
  const auto d = D->d;
  const double inv_val = 1.0 / static_cast<double>(D->n_val);
  auto AtA2 = std::make_shared<const Mat>(2.0 * D->A_train.transpose() * D->A_train);
  auto Atb2 = std::make_shared<const Vec>(2.0 * D->A_train.transpose() * D->b_train);

  BilevelProblem P;
  auto& o = P.lower;
  o.n = 2;
  P.x_typical = Vec::Zero(2);
  P.x_spread = 2.0;

  if (enc == EnEncoding::composite) {
    P.name = "elastic-net";
    o.m = d;
    o.s = 2 * d;
    o.g_val = [D](const Vec& x, const Vec& y) {
      return (D->A_train * y - D->b_train).squaredNorm() + 0.5 * std::exp(x(1)) * y.squaredNorm();
    };
    o.g_grad_y = [AtA2, Atb2](const Vec& x, const Vec& y) -> Vec {
      return *AtA2 * y - *Atb2 + std::exp(x(1)) * y;
    };
    o.g_hess_yy = [AtA2](const Vec& x, const Vec&) -> Mat {
      Mat H = *AtA2;
      H.diagonal().array() += std::exp(x(1));
      return H;
    };
    o.g_mixed_xy = [d](const Vec& x, const Vec& y) -> Mat {
      Mat M = Mat::Zero(d, 2);
      M.col(1) = std::exp(x(1)) * y;
      return M;
    };
    o.G_val = [d](const Vec& x, const Vec& y) -> Vec {
      Vec G(2 * d);
      G << std::exp(x(0)) * y, -std::exp(x(0)) * y;
      return G;
    };
    o.G_jac_y = [d](const Vec& x, const Vec&) -> Mat {
      Mat J(2 * d, d);
      J << std::exp(x(0)) * Mat::Identity(d, d), -std::exp(x(0)) * Mat::Identity(d, d);
      return J;
    };
    o.G_jac_x = [d](const Vec& x, const Vec& y) -> Mat {
      Mat J = Mat::Zero(2 * d, 2);
      J.col(0) << std::exp(x(0)) * y, -std::exp(x(0)) * y;
      return J;
    };
    o.G_hess_yy_contract = [d](const Vec&, const Vec&, const Vec&) -> Mat { return Mat::Zero(d, d); };
    o.G_mixed_contract = [d](const Vec& x, const Vec&, const Vec& p) -> Mat {
      Mat M = Mat::Zero(d, 2);
      M.col(0) = std::exp(x(0)) * (p.head(d) - p.tail(d));
      return M;
    };
    o.h = poly::l1_pair(d);
    P.model_of = [](const Vec& y) -> Vec { return y; };
    P.f_val = [D, inv_val](const Vec&, const Vec& y) { return inv_val * (D->A_val * y - D->b_val).squaredNorm(); };
    P.f_grad_y = [D, inv_val](const Vec&, const Vec& y) -> Vec {
      return 2.0 * inv_val * D->A_val.transpose() * (D->A_val * y - D->b_val);
    };
  } else {
    // y = (x+, x-) >= 0, model x+ - x-, G = -y with the nonpositive-orthant indicator.
    P.name = "elastic-net-split";
    o.m = 2 * d;
    o.s = 2 * d;
    auto model = [d](const Vec& y) -> Vec { return y.head(d) - y.tail(d); };
    auto lift = [d](const Vec& v) -> Vec {
      Vec u(2 * d);
      u << v, -v;
      return u;
    };
    o.g_val = [D, model](const Vec& x, const Vec& y) {
      const Vec v = model(y);
      return (D->A_train * v - D->b_train).squaredNorm() + std::exp(x(0)) * y.sum() +
             0.5 * std::exp(x(1)) * v.squaredNorm();
    };
    o.g_grad_y = [AtA2, Atb2, model, lift](const Vec& x, const Vec& y) -> Vec {
      const Vec v = model(y);
      Vec g = lift(*AtA2 * v - *Atb2 + std::exp(x(1)) * v);
      g.array() += std::exp(x(0));
      return g;
    };
    o.g_hess_yy = [AtA2, d](const Vec& x, const Vec&) -> Mat {
      Mat H = *AtA2;
      H.diagonal().array() += std::exp(x(1));
      Mat out(2 * d, 2 * d);
      out << H, -H, -H, H;
      return out;
    };
    o.g_mixed_xy = [d, model, lift](const Vec& x, const Vec& y) -> Mat {
      Mat M(2 * d, 2);
      M.col(0).setConstant(std::exp(x(0)));
      M.col(1) = std::exp(x(1)) * lift(model(y));
      return M;
    };
    o.G_val = [](const Vec&, const Vec& y) -> Vec { return -y; };
    o.G_jac_y = [d](const Vec&, const Vec&) -> Mat { return -Mat::Identity(2 * d, 2 * d); };
    o.G_jac_x = [d](const Vec&, const Vec&) -> Mat { return Mat::Zero(2 * d, 2); };
    o.h = poly::nonpos_indicator(2 * d);
    P.model_of = model;
    P.f_val = [D, inv_val, model](const Vec&, const Vec& y) {
      return inv_val * (D->A_val * model(y) - D->b_val).squaredNorm();
    };
    P.f_grad_y = [D, inv_val, model, lift](const Vec&, const Vec& y) -> Vec {
      return lift(2.0 * inv_val * D->A_val.transpose() * (D->A_val * model(y) - D->b_val));
    };
  }
  P.f_grad_x = [](const Vec&, const Vec&) -> Vec { return Vec::Zero(2); };
  const bool split = enc == EnEncoding::split;
  P.actual_lower = [AtA2, Atb2, d, split](const Vec& x) -> Vec {
    Mat H = *AtA2;
    H.diagonal().array() += std::exp(x(1));
    const Vec v = elastic_net_exact(H, *Atb2, std::exp(x(0)));
    if (!split) return v;
    Vec y(2 * d);
    y << v.cwiseMax(0.0), (-v).cwiseMax(0.0);
    return y;
  };
  detail::attach_regression_metrics(P, D);
  return P;
}

// ---------------------------------------------------------------- data poisoning

/// Upper variable w in R^{n_tr} perturbs the training responses; the attacker
/// maximizes the validation error subject to |w|^2 <= c_budget.
inline BilevelProblem make_data_poisoning(const SyntheticRegressionData& data, double c_budget = 100.0,
                                          double lambda1 = std::exp(3.0), double lambda2 = std::exp(2.0)) {
  require(lambda1 > 0.0 && lambda2 > 0.0, "make_data_poisoning: lambda1 and lambda2 must be positive");
  require(c_budget >= 0.0, "make_data_poisoning: budget must be nonnegative");
  auto D = std::make_shared<const SyntheticRegressionData>(data);
  const auto d = D->d;
  const auto ntr = D->n_tr;
  const double inv_val = 1.0 / static_cast<double>(D->n_val);
  auto AtA2 = std::make_shared<const Mat>(2.0 * D->A_train.transpose() * D->A_train);
  auto At2 = std::make_shared<const Mat>(2.0 * D->A_train.transpose());

  BilevelProblem P;
  P.name = "data-poisoning";
  P.sense = Sense::max;
  auto& o = P.lower;
  o.n = ntr;
  o.m = d;
  o.s = 2 * d;
  o.g_val = [D, lambda2](const Vec& w, const Vec& y) {
    return (D->A_train * y - D->b_train - w).squaredNorm() + 0.5 * lambda2 * y.squaredNorm();
  };
  o.g_grad_y = [D, At2, lambda2](const Vec& w, const Vec& y) -> Vec {
    return *At2 * (D->A_train * y - D->b_train - w) + lambda2 * y;
  };
  o.g_hess_yy = [AtA2, lambda2](const Vec&, const Vec&) -> Mat {
    Mat H = *AtA2;
    H.diagonal().array() += lambda2;
    return H;
  };
  o.g_mixed_xy = [At2](const Vec&, const Vec&) -> Mat { return -*At2; };
  o.G_val = [d](const Vec&, const Vec& y) -> Vec {
    Vec G(2 * d);
    G << y, -y;
    return G;
  };
  o.G_jac_y = [d](const Vec&, const Vec&) -> Mat {
    Mat J(2 * d, d);
    J << Mat::Identity(d, d), -Mat::Identity(d, d);
    return J;
  };
  o.G_jac_x = [d, ntr](const Vec&, const Vec&) -> Mat { return Mat::Zero(2 * d, ntr); };
  o.h = poly::l1_pair(d, lambda1);
  P.model_of = [](const Vec& y) -> Vec { return y; };
  P.f_val = [D, inv_val](const Vec&, const Vec& y) { return -inv_val * (D->A_val * y - D->b_val).squaredNorm(); };
  P.f_grad_x = [ntr](const Vec&, const Vec&) -> Vec { return Vec::Zero(ntr); };
  P.f_grad_y = [D, inv_val](const Vec&, const Vec& y) -> Vec {
    return -2.0 * inv_val * D->A_val.transpose() * (D->A_val * y - D->b_val);
  };
  P.constraints.push_back({"budget", [c_budget](const Vec& w) { return w.squaredNorm() - c_budget; },
                           [](const Vec& w) -> Vec { return 2.0 * w; }});
  P.actual_lower = [D, AtA2, At2, lambda1, lambda2](const Vec& w) -> Vec {
    Mat H = *AtA2;
    H.diagonal().array() += lambda2;
    return elastic_net_exact(H, *At2 * (D->b_train + w), lambda1);
  };
  detail::attach_regression_metrics(P, D);
  P.x_typical = Vec::Zero(ntr);
  P.x_spread = std::sqrt(c_budget / static_cast<double>(ntr));
  return P;
}

// ---------------------------------------------------------------- baselines

struct BaselineResult {
  double best_value = 0.0;  // in the problem's own sense
  Vec best_point;
  Vec best_model;
  int evaluations = 0;
};

inline constexpr double near_exact_reg = 1e-8;

/// Lower-level solution without regularization: the problem's dedicated
/// solver when it has one, else continuation down to near_exact_reg.
inline Vec actual_lower_solution(const BilevelProblem& P, const Vec& x, const LowerOptions& opts = {}) {
  if (P.actual_lower) return P.actual_lower(x);
  return solve_near_exact(P.lower, x, near_exact_reg, opts).y;
}

/// Upper objective at the actual lower-level solution, minimization form.
inline double near_exact_objective(const BilevelProblem& P, const Vec& x, Vec* model_out = nullptr,
                                   const LowerOptions& opts = {}) {
  const Vec y = actual_lower_solution(P, x, opts);
  if (model_out) *model_out = P.model(y);
  return P.f_val(x, y);
}

/// Exhaustive evaluation over a tensor grid of the first two upper
/// coordinates, lo..hi in `count` points each.
inline BaselineResult grid_search_baseline(const BilevelProblem& P, double lo = -5.0, double hi = 5.0,
                                           int count = 21, int threads = 1) {
  require(P.n() == 2, "grid_search_baseline: needs a two-dimensional upper level");
  require(count >= 1, "grid_search_baseline: empty grid");
  const std::size_t total = static_cast<std::size_t>(count) * static_cast<std::size_t>(count);
  std::vector<double> vals(total);
  std::vector<Vec> models(total);
  auto coord = [&](int k) { return count == 1 ? lo : lo + (hi - lo) * k / (count - 1); };
  parallel_for(total, threads, [&](std::size_t k) {
    Vec x(2);
    x << coord(static_cast<int>(k) / count), coord(static_cast<int>(k) % count);
    vals[k] = near_exact_objective(P, x, &models[k]);
  });
  const auto best = static_cast<std::size_t>(std::min_element(vals.begin(), vals.end()) - vals.begin());
  BaselineResult r;
  r.best_value = P.reported(vals[best]);
  r.best_point = Vec(2);
  r.best_point << coord(static_cast<int>(best) / count), coord(static_cast<int>(best) % count);
  r.best_model = models[best];
  r.evaluations = static_cast<int>(total);
  return r;
}

/// Uniform sampling in the ball |x|^2 <= radius2 (the data-poisoning budget
/// set), best value in the problem's sense.
inline BaselineResult random_search_baseline(const BilevelProblem& P, int n_points, std::uint64_t seed,
                                             double radius2, int threads = 1) {
  require(n_points >= 1, "random_search_baseline: n_points must be positive");
  require(radius2 >= 0.0, "random_search_baseline: negative radius");
  Rng rng(seed);
  std::vector<Vec> pts(static_cast<std::size_t>(n_points));
  for (auto& p : pts) p = rng.ball(Vec::Zero(P.n()), std::sqrt(radius2));
  std::vector<double> vals(pts.size());
  std::vector<Vec> models(pts.size());
  parallel_for(pts.size(), threads, [&](std::size_t k) { vals[k] = near_exact_objective(P, pts[k], &models[k]); });
  const auto best = static_cast<std::size_t>(std::min_element(vals.begin(), vals.end()) - vals.begin());
  BaselineResult r;
  r.best_value = P.reported(vals[best]);
  r.best_point = pts[best];
  r.best_model = models[best];
  r.evaluations = n_points;
  return r;
}

// ---------------------------------------------------------------- oracle self-check

struct OracleCheckEntry {
  std::string component;
  double error;  // max |analytic - fd| / max(1, |fd|_inf)
};

struct OracleCheckReport {
  std::vector<OracleCheckEntry> entries;  // worst error per component
  double tol = 1e-6;
  bool ok() const {
    return std::all_of(entries.begin(), entries.end(), [&](const auto& e) { return e.error <= tol; });
  }
  std::string worst() const {
    const auto it = std::max_element(entries.begin(), entries.end(),
                                     [](const auto& a, const auto& b) { return a.error < b.error; });
    return it == entries.end() ? std::string() : it->component;
  }
};

namespace detail {

inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& F, const Vec& v, double step) {
  const Vec f0 = F(v);
  Mat J(f0.size(), v.size());
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    const double hj = step * (1.0 + std::abs(v(j)));
    Vec vp = v, vm = v;
    vp(j) += hj;
    vm(j) -= hj;
    J.col(j) = (F(vp) - F(vm)) / (2.0 * hj);
  }
  return J;
}

inline double scaled_gap(const Mat& analytic, const Mat& fd) {
  if (analytic.size() == 0) return 0.0;
  if (analytic.rows() != fd.rows() || analytic.cols() != fd.cols()) return std::numeric_limits<double>::infinity();
  return (analytic - fd).cwiseAbs().maxCoeff() / std::max(1.0, fd.cwiseAbs().maxCoeff());
}

}  // namespace detail

/// Compares every analytic derivative against central differences at
/// `points` random (x, y, p) triples.
inline OracleCheckReport check_oracles(const BilevelProblem& P, int points = 20, std::uint64_t seed = 1,
                                       double step = 1e-5) {
  P.validate();
  const auto& o = P.lower;
  OracleCheckReport rep;
  std::vector<std::pair<std::string, double>> worst;
  auto note = [&](const std::string& c, double e) {
    for (auto& w : worst)
      if (w.first == c) {
        w.second = std::max(w.second, e);
        return;
      }
    worst.emplace_back(c, e);
  };
  auto vec1 = [](double v) { return Vec::Constant(1, v); };
  Rng rng(seed);
  for (int k = 0; k < points; ++k) {
    const Vec x = (P.x_typical.size() == o.n ? P.x_typical : Vec::Zero(o.n)) + 0.5 * P.x_spread * rng.normal_vec(o.n);
    const Vec y = rng.normal_vec(o.m);
    const Vec p = rng.normal_vec(o.s).cwiseAbs();

    note("g_grad_y", detail::scaled_gap(o.g_grad_y(x, y).transpose(),
                                         detail::fd_jacobian([&](const Vec& v) { return vec1(o.g_val(x, v)); }, y, step)));
    note("g_hess_yy", detail::scaled_gap(o.g_hess_yy(x, y),
                                          detail::fd_jacobian([&](const Vec& v) { return o.g_grad_y(x, v); }, y, step)));
    note("g_mixed_xy", detail::scaled_gap(o.g_mixed_xy(x, y),
                                           detail::fd_jacobian([&](const Vec& v) { return o.g_grad_y(v, y); }, x, step)));
    note("G_jac_y", detail::scaled_gap(o.G_jac_y(x, y),
                                        detail::fd_jacobian([&](const Vec& v) { return o.G_val(x, v); }, y, step)));
    note("G_jac_x", detail::scaled_gap(o.G_jac_x(x, y),
                                        detail::fd_jacobian([&](const Vec& v) { return o.G_val(v, y); }, x, step)));
    note("G_hess_yy_contract",
         detail::scaled_gap(o.G_hess(x, y, p), detail::fd_jacobian(
                                                   [&](const Vec& v) -> Vec { return o.G_jac_y(x, v).transpose() * p; },
                                                   y, step)));
    note("G_mixed_contract",
         detail::scaled_gap(o.G_mixed(x, y, p), detail::fd_jacobian(
                                                    [&](const Vec& v) -> Vec { return o.G_jac_y(v, y).transpose() * p; },
                                                    x, step)));
    note("f_grad_x", detail::scaled_gap(P.f_grad_x(x, y).transpose(),
                                         detail::fd_jacobian([&](const Vec& v) { return vec1(P.f_val(v, y)); }, x, step)));
    note("f_grad_y", detail::scaled_gap(P.f_grad_y(x, y).transpose(),
                                         detail::fd_jacobian([&](const Vec& v) { return vec1(P.f_val(x, v)); }, y, step)));
    for (const auto& c : P.constraints)
      note("constraint:" + c.name,
           detail::scaled_gap(c.grad(x).transpose(),
                              detail::fd_jacobian([&](const Vec& v) { return vec1(c.c(v)); }, x, step)));
  }
  for (auto& w : worst) rep.entries.push_back({w.first, w.second});
  return rep;
}

}  // namespace bilevel

#endif  // BILEVEL_PROBLEMS_HPP
