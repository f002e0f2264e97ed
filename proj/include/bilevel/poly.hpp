#ifndef BILEVEL_POLY_HPP
#define BILEVEL_POLY_HPP

// Proper nondecreasing epi-polyhedral functions
//
//   h(z) = max_j <a^j, z> - alpha_j   if <b^i, z> <= beta_i for all i,
//          +inf                       otherwise,
//
// stored as a separable sum of blocks over disjoint coordinate subsets. A
// single block over all coordinates is the general case; the ell-1 style
// functions used by the regression problems are sums of small blocks, which
// keeps the piece count linear in s.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bilevel/common.hpp"
#include "bilevel/qp.hpp"

namespace bilevel::poly {

struct Piece {
  Vec a;
  double alpha = 0.0;
};

struct DomRow {
  Vec b;
  double beta = 0.0;
};

enum class BlockKind {
  linear_box,  // one piece, every row bounds a single coordinate
  scaled_max,  // c * max_k (z_k - o_k), no rows
  scalar,      // one coordinate, any pieces and rows
  generic,
};

inline const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::linear_box: return "linear_box";
    case BlockKind::scaled_max: return "scaled_max";
    case BlockKind::scalar: return "scalar";
    case BlockKind::generic: return "generic";
  }
  return "unknown";
}

/// One separable term. Pieces and rows are in block-local coordinates.
struct Block {
  std::vector<Eigen::Index> coords;
  Mat A;      // pieces x nb
  Vec alpha;  // pieces
  Mat B;      // rows x nb
  Vec beta;   // rows

  BlockKind kind = BlockKind::generic;
  bool empty_domain = false;

  // linear_box: u(k) upper bound on local coordinate k (+inf if none)
  Vec upper;
  // scaled_max: common scale, offsets o_k = alpha_j / c, piece index per coordinate
  double scale = 1.0;
  Vec offset;
  std::vector<int> piece_of_coord;

  Eigen::Index size() const { return static_cast<Eigen::Index>(coords.size()); }
  Eigen::Index num_pieces() const { return A.rows(); }
  Eigen::Index num_rows() const { return B.rows(); }

  Vec gather(const Vec& z) const {
    Vec out(size());
    for (Eigen::Index k = 0; k < size(); ++k) out(k) = z(coords[k]);
    return out;
  }
  void scatter(const Vec& local, Vec& z) const {
    for (Eigen::Index k = 0; k < size(); ++k) z(coords[k]) = local(k);
  }

  double max_part(const Vec& zl) const { return (A * zl - alpha).maxCoeff(); }
};

namespace detail {

inline bool is_zero_row(const Vec& v) { return v.cwiseAbs().maxCoeff() == 0.0; }

inline void classify(Block& blk) {
  const auto nb = blk.size();
  const auto np = blk.num_pieces();
  blk.empty_domain = false;
  std::vector<Eigen::Index> nonzero_rows;
  for (Eigen::Index i = 0; i < blk.num_rows(); ++i) {
    if (is_zero_row(blk.B.row(i).transpose())) {
      if (blk.beta(i) < 0.0) blk.empty_domain = true;
    } else {
      nonzero_rows.push_back(i);
    }
  }

  if (np == 1) {
    bool box = true;
    Vec u = Vec::Constant(nb, std::numeric_limits<double>::infinity());
    for (auto i : nonzero_rows) {
      Eigen::Index hit = -1;
      int count = 0;
      for (Eigen::Index k = 0; k < nb; ++k)
        if (blk.B(i, k) != 0.0) {
          hit = k;
          ++count;
        }
      if (count != 1) {
        box = false;
        break;
      }
      u(hit) = std::min(u(hit), blk.beta(i) / blk.B(i, hit));
    }
    if (box) {
      blk.kind = BlockKind::linear_box;
      blk.upper = u;
      return;
    }
  }

  if (nonzero_rows.empty() && np == nb && nb >= 1) {
    double c = -1.0;
    std::vector<int> piece_of(nb, -1);
    bool ok = true;
    for (Eigen::Index j = 0; j < np && ok; ++j) {
      Eigen::Index hit = -1;
      int count = 0;
      for (Eigen::Index k = 0; k < nb; ++k)
        if (blk.A(j, k) != 0.0) {
          hit = k;
          ++count;
        }
      if (count != 1 || piece_of[hit] != -1) {
        ok = false;
        break;
      }
      if (c < 0.0) c = blk.A(j, hit);
      if (blk.A(j, hit) != c) ok = false;
      piece_of[hit] = static_cast<int>(j);
    }
    if (ok) {
      blk.kind = BlockKind::scaled_max;
      blk.scale = c;
      blk.piece_of_coord = piece_of;
      blk.offset.resize(nb);
      for (Eigen::Index k = 0; k < nb; ++k) blk.offset(k) = blk.alpha(piece_of[k]) / c;
      return;
    }
  }

  if (nb == 1) {
    blk.kind = BlockKind::scalar;
    blk.upper = Vec::Constant(1, std::numeric_limits<double>::infinity());
    for (auto i : nonzero_rows) blk.upper(0) = std::min(blk.upper(0), blk.beta(i) / blk.B(i, 0));
    return;
  }
  blk.kind = BlockKind::generic;
}

}  // namespace detail

class EpiPolyhedralFn {
 public:
  EpiPolyhedralFn() = default;

  /// General form: one block over all s coordinates.
  EpiPolyhedralFn(Eigen::Index s, const std::vector<Piece>& max_pieces,
                  const std::vector<DomRow>& dom_rows)
      : s_(s) {
    require(s > 0, "EpiPolyhedralFn: dimension must be positive");
    Block blk;
    blk.coords.resize(static_cast<std::size_t>(s));
    std::iota(blk.coords.begin(), blk.coords.end(), Eigen::Index{0});
    blk.A.resize(static_cast<Eigen::Index>(max_pieces.size()), s);
    blk.alpha.resize(static_cast<Eigen::Index>(max_pieces.size()));
    for (std::size_t j = 0; j < max_pieces.size(); ++j) {
      check_dim(max_pieces[j].a.size(), s, "max piece");
      blk.A.row(static_cast<Eigen::Index>(j)) = max_pieces[j].a.transpose();
      blk.alpha(static_cast<Eigen::Index>(j)) = max_pieces[j].alpha;
    }
    blk.B.resize(static_cast<Eigen::Index>(dom_rows.size()), s);
    blk.beta.resize(static_cast<Eigen::Index>(dom_rows.size()));
    for (std::size_t i = 0; i < dom_rows.size(); ++i) {
      check_dim(dom_rows[i].b.size(), s, "dom row");
      blk.B.row(static_cast<Eigen::Index>(i)) = dom_rows[i].b.transpose();
      blk.beta(static_cast<Eigen::Index>(i)) = dom_rows[i].beta;
    }
    blocks_.push_back(std::move(blk));
    finalize();
  }

  /// Separable sum. Coordinates not covered by any block do not enter h.
  static EpiPolyhedralFn separable(Eigen::Index s, std::vector<Block> blocks) {
    require(s > 0, "EpiPolyhedralFn: dimension must be positive");
    EpiPolyhedralFn h;
    h.s_ = s;
    h.blocks_ = std::move(blocks);
    h.finalize();
    return h;
  }

  Eigen::Index s() const { return s_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  const std::vector<Eigen::Index>& uncovered() const { return uncovered_; }
  bool single_block() const { return blocks_.size() == 1; }

  /// Pieces of the max as full s-vectors. For separable functions this is
  /// the Cartesian-product expansion, refused when it would be large.
  std::vector<Piece> max_pieces(std::size_t limit = 4096) const {
    std::vector<Piece> out{{Vec::Zero(s_), 0.0}};
    for (const auto& blk : blocks_) {
      require(out.size() * static_cast<std::size_t>(blk.num_pieces()) <= limit,
              "max_pieces: expansion too large");
      std::vector<Piece> next;
      for (const auto& pc : out)
        for (Eigen::Index j = 0; j < blk.num_pieces(); ++j) {
          Piece q = pc;
          for (Eigen::Index k = 0; k < blk.size(); ++k) q.a(blk.coords[k]) += blk.A(j, k);
          q.alpha += blk.alpha(j);
          next.push_back(std::move(q));
        }
      out = std::move(next);
    }
    return out;
  }

  std::vector<DomRow> dom_rows() const {
    std::vector<DomRow> out;
    for (const auto& blk : blocks_)
      for (Eigen::Index i = 0; i < blk.num_rows(); ++i) {
        DomRow r{Vec::Zero(s_), blk.beta(i)};
        for (Eigen::Index k = 0; k < blk.size(); ++k) r.b(blk.coords[k]) = blk.B(i, k);
        out.push_back(std::move(r));
      }
    return out;
  }

 private:
  void finalize() {
    std::vector<char> seen(static_cast<std::size_t>(s_), 0);
    for (auto& blk : blocks_) {
      require(!blk.coords.empty(), "EpiPolyhedralFn: empty block");
      require(blk.num_pieces() > 0, "EpiPolyhedralFn: at least one max piece is required");
      check_dim(blk.A.cols(), blk.size(), "block pieces");
      check_dim(blk.alpha.size(), blk.num_pieces(), "block alpha");
      if (blk.B.size() == 0 && blk.beta.size() == 0) blk.B.resize(0, blk.size());
      check_dim(blk.B.cols(), blk.size(), "block rows");
      check_dim(blk.beta.size(), blk.num_rows(), "block beta");
      for (auto c : blk.coords) {
        require(c >= 0 && c < s_, "EpiPolyhedralFn: block coordinate out of range");
        require(!seen[static_cast<std::size_t>(c)], "EpiPolyhedralFn: blocks overlap");
        seen[static_cast<std::size_t>(c)] = 1;
      }
      require(blk.A.allFinite() && blk.alpha.allFinite() && blk.B.allFinite() &&
                  blk.beta.allFinite(),
              "EpiPolyhedralFn: non-finite coefficient");
      require(blk.A.minCoeff() >= 0.0 && (blk.num_rows() == 0 || blk.B.minCoeff() >= 0.0),
              "EpiPolyhedralFn: coefficients must be nonnegative (h nondecreasing)");
      detail::classify(blk);
    }
    uncovered_.clear();
    for (Eigen::Index c = 0; c < s_; ++c)
      if (!seen[static_cast<std::size_t>(c)]) uncovered_.push_back(c);
  }

  Eigen::Index s_ = 0;
  std::vector<Block> blocks_;
  std::vector<Eigen::Index> uncovered_;
};

// ---------------------------------------------------------------- presets

/// sum_i c * max{z_i, z_{d+i}}; with z = (t, -t) this is c * |t|_1.
inline EpiPolyhedralFn l1_pair(Eigen::Index d, double scale = 1.0) {
  require(d > 0 && scale > 0.0, "l1_pair: need d > 0 and scale > 0");
  std::vector<Block> blocks;
  for (Eigen::Index i = 0; i < d; ++i) {
    Block b;
    b.coords = {i, d + i};
    b.A = scale * Mat::Identity(2, 2);
    b.alpha = Vec::Zero(2);
    blocks.push_back(std::move(b));
  }
  return EpiPolyhedralFn::separable(2 * d, std::move(blocks));
}

/// Indicator of the nonpositive orthant in R^s.
inline EpiPolyhedralFn nonpos_indicator(Eigen::Index s) {
  std::vector<DomRow> rows;
  for (Eigen::Index i = 0; i < s; ++i) rows.push_back({Vec::Unit(s, i), 0.0});
  return EpiPolyhedralFn(s, {{Vec::Zero(s), 0.0}}, rows);
}

/// max{z_1, ..., z_s}.
inline EpiPolyhedralFn max_of(Eigen::Index s) {
  std::vector<Piece> pieces;
  for (Eigen::Index i = 0; i < s; ++i) pieces.push_back({Vec::Unit(s, i), 0.0});
  return EpiPolyhedralFn(s, pieces, {});
}

/// sum_i c * max{z_i, 0}.
inline EpiPolyhedralFn hinge(Eigen::Index s, double scale = 1.0) {
  require(s > 0 && scale > 0.0, "hinge: need s > 0 and scale > 0");
  std::vector<Block> blocks;
  for (Eigen::Index i = 0; i < s; ++i) {
    Block b;
    b.coords = {i};
    b.A = Mat(2, 1);
    b.A << scale, 0.0;
    b.alpha = Vec::Zero(2);
    blocks.push_back(std::move(b));
  }
  return EpiPolyhedralFn::separable(s, std::move(blocks));
}

/// The zero function on R^s (single zero piece).
inline EpiPolyhedralFn zero_fn(Eigen::Index s) {
  return EpiPolyhedralFn(s, {{Vec::Zero(s), 0.0}}, {});
}

// ---------------------------------------------------------------- evaluate

inline ExtendedReal evaluate(const EpiPolyhedralFn& h, const Vec& z) {
  check_dim(z.size(), h.s(), "evaluate: z");
  double total = 0.0;
  for (const auto& blk : h.blocks()) {
    const Vec zl = blk.gather(z);
    if (blk.num_rows() > 0 && ((blk.B * zl - blk.beta).array() > 0.0).any())
      return ExtendedReal::pos_infinity();
    total += blk.max_part(zl);
  }
  return ExtendedReal(total);
}

// ---------------------------------------------------------------- active sets

struct ActiveSets {
  std::vector<std::vector<int>> J_active;  // per block, active max pieces
  std::vector<std::vector<int>> I_active;  // per block, active dom rows
  double tol_act = 1e-6;

  friend bool operator==(const ActiveSets& x, const ActiveSets& y) {
    return x.J_active == y.J_active && x.I_active == y.I_active;
  }
};

inline constexpr double default_tol_act = 1e-6;

inline ActiveSets active_sets(const EpiPolyhedralFn& h, const Vec& z,
                              double tol_act = default_tol_act) {
  check_dim(z.size(), h.s(), "active_sets: z");
  require(tol_act >= 0.0, "active_sets: negative tolerance");
  ActiveSets act;
  act.tol_act = tol_act;
  for (const auto& blk : h.blocks()) {
    const Vec zl = blk.gather(z);
    std::vector<int> I, J;
    for (Eigen::Index i = 0; i < blk.num_rows(); ++i) {
      const double gap = blk.B.row(i).dot(zl) - blk.beta(i);
      const double band = tol_act * (1.0 + std::abs(blk.beta(i)));
      if (gap > band)
        throw Error(ErrorKind::infeasible_point, "active_sets: point outside dom h");
      if (std::abs(gap) <= band) I.push_back(static_cast<int>(i));
    }
    const Vec vals = blk.A * zl - blk.alpha;
    const double hv = vals.maxCoeff();
    for (Eigen::Index j = 0; j < vals.size(); ++j)
      if (hv - vals(j) <= tol_act * (1.0 + std::abs(hv))) J.push_back(static_cast<int>(j));
    act.J_active.push_back(std::move(J));
    act.I_active.push_back(std::move(I));
  }
  return act;
}

// ---------------------------------------------------------------- prox

struct ProxResult {
  Vec w;         // minimiser of h(w) + |w - z|^2 / (2 lambda)
  Vec p;         // (z - w) / lambda, the envelope gradient
  double value;  // Moreau envelope at z
};

namespace detail {

/// Euclidean projection onto the unit simplex (sort-based). The projection
/// commutes with adding a constant vector, so v is shifted to max 0 first;
/// otherwise the unit mass is lost against entries of order 1e16.
inline Vec project_simplex(const Vec& v_in) {
  const auto n = v_in.size();
  if (n == 0) return v_in;
  const Vec v = v_in.array() - v_in.maxCoeff();
  Vec u = v;
  std::sort(u.data(), u.data() + n, std::greater<double>());
  double cum = 0.0, theta = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    cum += u(k);
    const double t = (cum - 1.0) / static_cast<double>(k + 1);
    if (u(k) - t > 0.0) theta = t;
  }
  return (v.array() - theta).cwiseMax(0.0);
}

/// Upper envelope of lines a_j t - alpha_j as (slopes ascending, breakpoints).
struct Envelope1D {
  std::vector<double> slope, icpt, bp;  // bp.size() == slope.size() - 1
};

inline Envelope1D envelope_1d(const Mat& A, const Vec& alpha) {
  std::vector<int> idx(static_cast<std::size_t>(A.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int i, int j) {
    if (A(i, 0) != A(j, 0)) return A(i, 0) < A(j, 0);
    return alpha(i) < alpha(j);
  });
  Envelope1D e;
  for (int j : idx) {
    const double a = A(j, 0), c = -alpha(j);
    if (!e.slope.empty() && e.slope.back() == a) continue;  // same slope, larger alpha
    while (!e.slope.empty()) {
      const double x_new = (e.icpt.back() - c) / (a - e.slope.back());
      if (!e.bp.empty() && x_new <= e.bp.back()) {
        e.slope.pop_back();
        e.icpt.pop_back();
        e.bp.pop_back();
      } else {
        e.bp.push_back(x_new);
        break;
      }
    }
    e.slope.push_back(a);
    e.icpt.push_back(c);
  }
  return e;
}

inline double prox_scalar_block(const Block& blk, double z, double lambda) {
  const Envelope1D e = envelope_1d(blk.A, blk.alpha);
  const auto K = e.slope.size();
  double w = 0.0;
  bool found = false;
  for (std::size_t k = 0; k < K && !found; ++k) {
    const double lo = k == 0 ? -std::numeric_limits<double>::infinity() : e.bp[k - 1];
    const double hi = k + 1 == K ? std::numeric_limits<double>::infinity() : e.bp[k];
    const double cand = z - lambda * e.slope[k];
    if (cand >= lo && cand <= hi) {
      w = cand;
      found = true;
    } else if (cand > hi && k + 1 < K && z - lambda * e.slope[k + 1] < hi) {
      w = hi;
      found = true;
    }
  }
  if (!found) w = z - lambda * e.slope.back();
  return std::min(w, blk.upper(0));
}

inline Vec prox_generic_block(const Block& blk, const Vec& zl, double lambda) {
  const auto nb = blk.size();
  const auto np = blk.num_pieces();
  const auto nr = blk.num_rows();
  qp::DenseQP prob;
  prob.P = Mat::Zero(nb + 1, nb + 1);
  prob.P.topLeftCorner(nb, nb) = Mat::Identity(nb, nb) / lambda;
  prob.q = Vec::Zero(nb + 1);
  prob.q.head(nb) = -zl / lambda;
  prob.q(nb) = 1.0;
  prob.G_in = Mat::Zero(np + nr, nb + 1);
  prob.h_in = Vec::Zero(np + nr);
  prob.G_in.topLeftCorner(np, nb) = blk.A;
  prob.G_in.block(0, nb, np, 1).setConstant(-1.0);
  prob.h_in.head(np) = blk.alpha;
  if (nr > 0) {
    prob.G_in.bottomLeftCorner(nr, nb) = blk.B;
    prob.h_in.tail(nr) = blk.beta;
  }
  const auto sol = qp::solve_qp(prob, 1e-10, 300);
  if (sol.status == qp::QPStatus::infeasible)
    throw Error(ErrorKind::infeasible_function, "prox: dom h is empty");
  if (sol.status != qp::QPStatus::optimal)
    throw Error(ErrorKind::qp_failure, std::string("prox: epigraph QP ") + qp::to_string(sol.status));
  return sol.primal.head(nb);
}

inline Vec prox_block(const Block& blk, const Vec& zl, double lambda, bool force_generic) {
  if (blk.empty_domain) throw Error(ErrorKind::infeasible_function, "prox: dom h is empty");
  if (force_generic) return prox_generic_block(blk, zl, lambda);
  switch (blk.kind) {
    case BlockKind::linear_box:
      return (zl - lambda * blk.A.row(0).transpose()).cwiseMin(blk.upper);
    case BlockKind::scaled_max: {
      const Vec v = zl - blk.offset;
      const double c = blk.scale;
      const Vec pr = c * project_simplex(v / (lambda * c));
      return zl - lambda * pr;
    }
    case BlockKind::scalar:
      return Vec::Constant(1, prox_scalar_block(blk, zl(0), lambda));
    case BlockKind::generic:
      return prox_generic_block(blk, zl, lambda);
  }
  return zl;
}

/// Envelope gradient of a block, computed without cancellation where a
/// closed form is available.
inline Vec envelope_grad_block(const Block& blk, const Vec& zl, const Vec& wl, double lambda,
                               bool force_generic) {
  if (!force_generic) {
    if (blk.kind == BlockKind::linear_box) {
      const Vec shifted = zl - lambda * blk.A.row(0).transpose();
      return blk.A.row(0).transpose() + (shifted - blk.upper).cwiseMax(0.0) / lambda;
    }
    if (blk.kind == BlockKind::scaled_max) {
      const double c = blk.scale;
      return c * project_simplex((zl - blk.offset) / (lambda * c));
    }
  }
  return (zl - wl) / lambda;
}

inline ProxResult prox_impl(const EpiPolyhedralFn& h, const Vec& z, double lambda,
                            bool force_generic) {
  check_dim(z.size(), h.s(), "prox: z");
  require(lambda > 0.0 && std::isfinite(lambda), "prox: lambda must be positive");
  ProxResult r{z, Vec::Zero(h.s()), 0.0};
  double val = 0.0;
  for (const auto& blk : h.blocks()) {
    const Vec zl = blk.gather(z);
    const Vec wl = prox_block(blk, zl, lambda, force_generic);
    const Vec pl = envelope_grad_block(blk, zl, wl, lambda, force_generic);
    blk.scatter(wl, r.w);
    blk.scatter(pl, r.p);
    val += blk.max_part(wl) + 0.5 * (wl - zl).squaredNorm() / lambda;
  }
  r.value = val;
  return r;
}

}  // namespace detail

inline ProxResult prox(const EpiPolyhedralFn& h, const Vec& z, double lambda) {
  return detail::prox_impl(h, z, lambda, false);
}

/// Prox through the epigraph QP on every block, bypassing closed forms.
inline ProxResult prox_epigraph_qp(const EpiPolyhedralFn& h, const Vec& z, double lambda) {
  return detail::prox_impl(h, z, lambda, true);
}

inline double moreau_envelope(const EpiPolyhedralFn& h, const Vec& z, double lambda) {
  return prox(h, z, lambda).value;
}

inline Vec moreau_gradient(const EpiPolyhedralFn& h, const Vec& z, double lambda) {
  return prox(h, z, lambda).p;
}

// ---------------------------------------------------------------- multipliers

struct MultiplierRepresentation {
  std::vector<Vec> sigma;  // per block, aligned with ActiveSets::J_active
  std::vector<Vec> tau;    // per block, aligned with ActiveSets::I_active
  double residual = 0.0;   // |sum sigma a + sum tau b - p|_inf
  bool degenerate = false; // some active index carries a (near) zero weight
};

namespace detail {

struct BlockRep {
  Vec sigma, tau;
  double residual;
};

inline BlockRep rep_generic(const Mat& Aa, const Mat& Ba, const Vec& pl) {
  const auto nj = Aa.rows(), ni = Ba.rows(), nb = pl.size();
  const auto nv = nj + ni;
  Mat M(nb, nv);
  M << Aa.transpose(), Ba.transpose();

  qp::DenseQP st1;
  st1.P = M.transpose() * M;
  st1.q = -M.transpose() * pl;
  st1.G_in = -Mat::Identity(nv, nv);
  st1.h_in = Vec::Zero(nv);
  st1.A_eq = Mat::Zero(1, nv);
  st1.A_eq.leftCols(nj).setOnes();
  st1.b_eq = Vec::Ones(1);
  const auto s1 = qp::solve_qp(st1, 1e-12, 300);
  if (s1.status == qp::QPStatus::infeasible || s1.status == qp::QPStatus::unbounded)
    throw Error(ErrorKind::not_a_subgradient, "multiplier_representation: stage 1 failed");
  const Vec x1 = s1.primal.cwiseMax(0.0);
  const Vec target = M * x1;
  if ((target - pl).lpNorm<Eigen::Infinity>() > 1e-6)
    throw Error(ErrorKind::not_a_subgradient, "multiplier_representation: p is not a subgradient");

  qp::DenseQP st2;
  st2.P = Mat::Identity(nv, nv);
  st2.q = Vec::Zero(nv);
  st2.G_in = -Mat::Identity(nv, nv);
  st2.h_in = Vec::Zero(nv);
  st2.A_eq = Mat::Zero(nb + 1, nv);
  st2.A_eq.topRows(nb) = M;
  st2.A_eq.row(nb).head(nj).setOnes();
  st2.b_eq = Vec(nb + 1);
  st2.b_eq << target, 1.0;
  const auto s2 = qp::solve_qp(st2, 1e-12, 300);
  Vec x = x1;
  if (s2.status == qp::QPStatus::optimal || s2.status == qp::QPStatus::max_iter) {
    Vec cand = s2.primal.cwiseMax(0.0);
    if ((M * cand - target).lpNorm<Eigen::Infinity>() <= 1e-9) x = cand;
  }
  if (nj > 0) {
    const double t = x.head(nj).sum();
    if (t > 0.0) x.head(nj) /= t;
  }
  return {x.head(nj), x.tail(ni), (M * x - pl).lpNorm<Eigen::Infinity>()};
}

inline BlockRep rep_block(const Block& blk, const Vec& pl, const std::vector<int>& J,
                          const std::vector<int>& I) {
  const auto nb = blk.size();
  require(!J.empty(), "multiplier_representation: no active piece");
  if (blk.kind == BlockKind::linear_box) {
    Vec r = pl - blk.A.row(0).transpose();
    Vec tau = Vec::Zero(static_cast<Eigen::Index>(I.size()));
    Vec norm2 = Vec::Zero(nb);
    for (int i : I) norm2 += blk.B.row(i).cwiseAbs2().transpose();
    for (std::size_t t = 0; t < I.size(); ++t) {
      Eigen::Index k = 0;
      blk.B.row(I[t]).cwiseAbs().maxCoeff(&k);
      if (norm2(k) > 0.0) tau(static_cast<Eigen::Index>(t)) = std::max(0.0, r(k)) * blk.B(I[t], k) / norm2(k);
    }
    Vec recon = blk.A.row(0).transpose();
    for (std::size_t t = 0; t < I.size(); ++t) recon += tau(static_cast<Eigen::Index>(t)) * blk.B.row(I[t]).transpose();
    const double res = (recon - pl).lpNorm<Eigen::Infinity>();
    if (res > 1e-6)
      throw Error(ErrorKind::not_a_subgradient, "multiplier_representation: p is not a subgradient");
    return {Vec::Ones(1), tau, res};
  }
  if (blk.kind == BlockKind::scaled_max) {
    Vec sigma(static_cast<Eigen::Index>(J.size()));
    Vec recon = Vec::Zero(nb);
    for (std::size_t t = 0; t < J.size(); ++t) {
      Eigen::Index k = 0;
      blk.A.row(J[t]).maxCoeff(&k);
      sigma(static_cast<Eigen::Index>(t)) = std::max(0.0, pl(k) / blk.scale);
    }
    const double tot = sigma.sum();
    if (std::abs(tot - 1.0) <= 1e-6 && tot > 0.0) {
      sigma /= tot;
      for (std::size_t t = 0; t < J.size(); ++t)
        recon += sigma(static_cast<Eigen::Index>(t)) * blk.A.row(J[t]).transpose();
      const double res = (recon - pl).lpNorm<Eigen::Infinity>();
      if (res <= 1e-6) return {sigma, Vec::Zero(0), res};
    }
    throw Error(ErrorKind::not_a_subgradient, "multiplier_representation: p is not a subgradient");
  }
  Mat Aa(static_cast<Eigen::Index>(J.size()), nb), Ba(static_cast<Eigen::Index>(I.size()), nb);
  for (std::size_t t = 0; t < J.size(); ++t) Aa.row(static_cast<Eigen::Index>(t)) = blk.A.row(J[t]);
  for (std::size_t t = 0; t < I.size(); ++t) Ba.row(static_cast<Eigen::Index>(t)) = blk.B.row(I[t]);
  if (J.size() == 1 && I.empty()) {
    const double res = (Aa.row(0).transpose() - pl).lpNorm<Eigen::Infinity>();
    if (res > 1e-6)
      throw Error(ErrorKind::not_a_subgradient, "multiplier_representation: p is not a subgradient");
    return {Vec::Ones(1), Vec::Zero(0), res};
  }
  return rep_generic(Aa, Ba, pl);
}

}  // namespace detail

inline MultiplierRepresentation multiplier_representation(const EpiPolyhedralFn& h, const Vec& z,
                                                          const Vec& p, const ActiveSets& active) {
  check_dim(z.size(), h.s(), "multiplier_representation: z");
  check_dim(p.size(), h.s(), "multiplier_representation: p");
  require(active.J_active.size() == h.blocks().size(), "multiplier_representation: active sets do not match h");
  MultiplierRepresentation rep;
  for (auto c : h.uncovered()) {
    rep.residual = std::max(rep.residual, std::abs(p(c)));
    if (std::abs(p(c)) > 1e-6)
      throw Error(ErrorKind::not_a_subgradient, "multiplier_representation: p nonzero off the support of h");
  }
  const double pscale = 1.0 + (p.size() ? p.cwiseAbs().maxCoeff() : 0.0);
  for (std::size_t b = 0; b < h.blocks().size(); ++b) {
    const auto& blk = h.blocks()[b];
    auto br = detail::rep_block(blk, blk.gather(p), active.J_active[b], active.I_active[b]);
    rep.residual = std::max(rep.residual, br.residual);
    if (active.J_active[b].size() > 1 && br.sigma.size() && br.sigma.minCoeff() <= 1e-8) rep.degenerate = true;
    if (br.tau.size() && br.tau.minCoeff() <= 1e-8 * pscale) rep.degenerate = true;
    rep.sigma.push_back(std::move(br.sigma));
    rep.tau.push_back(std::move(br.tau));
  }
  return rep;
}

/// Reconstructs sum sigma_j a^j + sum tau_i b^i as an s-vector.
inline Vec reconstruct(const EpiPolyhedralFn& h, const ActiveSets& active,
                       const MultiplierRepresentation& rep) {
  Vec u = Vec::Zero(h.s());
  for (std::size_t b = 0; b < h.blocks().size(); ++b) {
    const auto& blk = h.blocks()[b];
    Vec ul = Vec::Zero(blk.size());
    for (std::size_t t = 0; t < active.J_active[b].size(); ++t)
      ul += rep.sigma[b](static_cast<Eigen::Index>(t)) * blk.A.row(active.J_active[b][t]).transpose();
    for (std::size_t t = 0; t < active.I_active[b].size(); ++t)
      ul += rep.tau[b](static_cast<Eigen::Index>(t)) * blk.B.row(active.I_active[b][t]).transpose();
    blk.scatter(ul, u);
  }
  return u;
}

// ---------------------------------------------------------------- critical cone

struct ConeBasis {
  Mat B_z;  // s x rank, orthonormal columns
  Eigen::Index rank = 0;
};

/// Stacked reduced critical-cone rows {a^i - a^{j0}}, {b^i} as s-vectors.
inline Mat cone_constraint_matrix(const EpiPolyhedralFn& h, const ActiveSets& active) {
  std::vector<Vec> rows;
  for (std::size_t b = 0; b < h.blocks().size(); ++b) {
    const auto& blk = h.blocks()[b];
    const auto& J = active.J_active[b];
    const auto& I = active.I_active[b];
    for (std::size_t t = 1; t < J.size(); ++t) {
      Vec r = Vec::Zero(h.s());
      blk.scatter((blk.A.row(J[t]) - blk.A.row(J[0])).transpose(), r);
      rows.push_back(std::move(r));
    }
    for (int i : I) {
      Vec r = Vec::Zero(h.s());
      blk.scatter(blk.B.row(i).transpose(), r);
      rows.push_back(std::move(r));
    }
  }
  Mat M(static_cast<Eigen::Index>(rows.size()), h.s());
  for (std::size_t k = 0; k < rows.size(); ++k) M.row(static_cast<Eigen::Index>(k)) = rows[k].transpose();
  return M;
}

inline ConeBasis critical_cone_basis(const EpiPolyhedralFn& h, const Vec& z, const Vec& p,
                                     const ActiveSets& active) {
  check_dim(z.size(), h.s(), "critical_cone_basis: z");
  check_dim(p.size(), h.s(), "critical_cone_basis: p");
  require(active.J_active.size() == h.blocks().size(), "critical_cone_basis: active sets do not match h");
  std::vector<Vec> cols;
  for (std::size_t b = 0; b < h.blocks().size(); ++b) {
    const auto& blk = h.blocks()[b];
    const auto& J = active.J_active[b];
    const auto& I = active.I_active[b];
    if (blk.kind == BlockKind::linear_box) {
      std::vector<Eigen::Index> hit;
      for (int i : I) {
        Eigen::Index k = 0;
        blk.B.row(i).cwiseAbs().maxCoeff(&k);
        if (std::find(hit.begin(), hit.end(), k) == hit.end()) hit.push_back(k);
      }
      std::sort(hit.begin(), hit.end());
      for (auto k : hit) cols.push_back(Vec::Unit(h.s(), blk.coords[k]));
      continue;
    }
    const auto nrow = static_cast<Eigen::Index>((J.empty() ? 0 : J.size() - 1) + I.size());
    if (nrow == 0) continue;
    Mat Ml(nrow, blk.size());
    Eigen::Index r = 0;
    for (std::size_t t = 1; t < J.size(); ++t) Ml.row(r++) = blk.A.row(J[t]) - blk.A.row(J[0]);
    for (int i : I) Ml.row(r++) = blk.B.row(i);
    Eigen::JacobiSVD<Mat> svd(Ml, Eigen::ComputeFullV);
    const Vec sv = svd.singularValues();
    if (sv.size() == 0 || sv(0) == 0.0) continue;
    const double cut = 1e-10 * sv(0);
    for (Eigen::Index k = 0; k < sv.size(); ++k) {
      if (sv(k) <= cut) break;
      Vec c = Vec::Zero(h.s());
      blk.scatter(svd.matrixV().col(k), c);
      cols.push_back(std::move(c));
    }
  }
  ConeBasis out;
  out.rank = static_cast<Eigen::Index>(cols.size());
  out.B_z = Mat::Zero(h.s(), out.rank);
  for (std::size_t k = 0; k < cols.size(); ++k) out.B_z.col(static_cast<Eigen::Index>(k)) = cols[k];
  return out;
}

// ---------------------------------------------------------------- conjugate

/// h*(p) through the representation LP
///   min sum sigma_j alpha_j + sum tau_i beta_i
///   s.t. sum sigma_j a^j + sum tau_i b^i = p, sigma in the simplex, tau >= 0,
/// which is the dual of sup_z <p, z> - h(z). +inf when p is not in dom h*.
inline ExtendedReal conjugate(const EpiPolyhedralFn& h, const Vec& p, double tol = 1e-9) {
  check_dim(p.size(), h.s(), "conjugate: p");
  const double pscale = 1.0 + (p.size() ? p.cwiseAbs().maxCoeff() : 0.0);
  for (auto c : h.uncovered())
    if (std::abs(p(c)) > tol * pscale) return ExtendedReal::pos_infinity();
  double total = 0.0;
  for (const auto& blk : h.blocks()) {
    if (blk.empty_domain) return ExtendedReal::pos_infinity();  // h identically +inf
    const Vec pl = blk.gather(p);
    if (blk.kind == BlockKind::linear_box) {
      const Vec r = pl - blk.A.row(0).transpose();
      double v = blk.alpha(0);
      for (Eigen::Index k = 0; k < blk.size(); ++k) {
        if (std::isinf(blk.upper(k))) {
          if (std::abs(r(k)) > tol * pscale) return ExtendedReal::pos_infinity();
        } else {
          if (r(k) < -tol * pscale) return ExtendedReal::pos_infinity();
          v += blk.upper(k) * std::max(0.0, r(k));
        }
      }
      total += v;
      continue;
    }
    if (blk.kind == BlockKind::scaled_max) {
      const Vec sig = pl / blk.scale;
      if (sig.minCoeff() < -tol * pscale || std::abs(sig.sum() - 1.0) > tol * pscale)
        return ExtendedReal::pos_infinity();
      double v = 0.0;
      for (Eigen::Index k = 0; k < blk.size(); ++k) v += std::max(0.0, sig(k)) * blk.alpha(blk.piece_of_coord[k]);
      total += v;
      continue;
    }
    const auto np = blk.num_pieces(), nr = blk.num_rows(), nv = np + nr;
    qp::DenseQP lp;
    lp.P = Mat::Zero(nv, nv);
    lp.q = Vec(nv);
    lp.q << blk.alpha, blk.beta;
    lp.G_in = -Mat::Identity(nv, nv);
    lp.h_in = Vec::Zero(nv);
    lp.A_eq = Mat(blk.size() + 1, nv);
    lp.A_eq.topRows(blk.size()) << blk.A.transpose(), blk.B.transpose();
    lp.A_eq.row(blk.size()) << Vec::Ones(np).transpose(), Vec::Zero(nr).transpose();
    lp.b_eq = Vec(blk.size() + 1);
    lp.b_eq << pl, 1.0;
    const auto sol = qp::solve_qp(lp, 1e-10, 300);
    if (sol.status == qp::QPStatus::infeasible) return ExtendedReal::pos_infinity();
    if (sol.status != qp::QPStatus::optimal)
      throw Error(ErrorKind::qp_failure, std::string("conjugate: LP ") + qp::to_string(sol.status));
    total += sol.objective;
  }
  return ExtendedReal(total);
}

}  // namespace bilevel::poly

#endif  // BILEVEL_POLY_HPP
