#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "graphem/data.hpp"
#include "graphem/error.hpp"
#include "graphem/gmrf.hpp"
#include "graphem/linalg.hpp"

namespace graphem {

/// Per-block l1 penalties. `uniform`, when set, overrides all three.
struct PenaltySpec {
  double rho_tt = 0.0;
  double rho_tp = 0.0;
  double rho_pp = 0.0;
  std::optional<double> uniform;

  static PenaltySpec all(double rho) { return PenaltySpec{rho, rho, rho, rho}; }

  double for_block(Block b) const {
    if (uniform) return *uniform;
    switch (b) {
      case Block::tt: return rho_tt;
      case Block::tp: return rho_tp;
      case Block::pp: return rho_pp;
    }
    return 0.0;
  }

  double& operator[](Block b) {
    switch (b) {
      case Block::tt: return rho_tt;
      case Block::tp: return rho_tp;
      default: return rho_pp;
    }
  }

  void validate() const {
    for (double r : {rho_tt, rho_tp, rho_pp, uniform.value_or(0.0)})
      if (!std::isfinite(r) || r < 0.0) throw ArgumentError("penalty must be finite and non-negative");
  }
};

/// Fraction of structurally nonzero off-diagonal entries in each block.
struct BlockSparsity {
  double tt = 0.0;
  double tp = 0.0;
  double pp = 0.0;

  double operator[](Block b) const {
    switch (b) {
      case Block::tt: return tt;
      case Block::tp: return tp;
      default: return pp;
    }
  }
  double& operator[](Block b) {
    switch (b) {
      case Block::tt: return tt;
      case Block::tp: return tp;
      default: return pp;
    }
  }
};

struct SparsityTarget {
  BlockSparsity target{0.005, 0.005, 0.005};
  double tolerance = 0.001;

  void validate() const {
    const double lo = std::min({target.tt, target.tp, target.pp});
    const double hi = std::max({target.tt, target.tp, target.pp});
    if (!(lo > 0.0) || hi > 1.0) throw ArgumentError("sparsity targets must lie in (0, 1]");
    if (!(tolerance >= 0.0) || !(tolerance < lo)) throw ArgumentError("sparsity tolerance must be below the smallest target");
  }
};

/// Smallest uniform penalty at which the penalized estimate is diagonal:
/// max over i != j of |S_ij|.
inline double rho_max(const Matrix& s) {
  if (s.rows() < 2 || s.cols() != s.rows()) throw ArgumentError("rho_max: need a square matrix with p >= 2");
  double m = 0.0;
  for (Index j = 0; j < s.cols(); ++j)
    for (Index i = 0; i < s.rows(); ++i)
      if (i != j) m = std::max(m, std::abs(s(i, j)));
  return m;
}

/// `count` evenly spaced penalties from 0.1 * rho_max to rho_max inclusive.
inline std::vector<double> rho_grid(const Matrix& s, int count = 10) {
  const double hi = rho_max(s);
  if (!(hi > 0.0)) throw ValidationError("rho_grid: rho_max is zero (input is already diagonal)");
  if (count < 1) throw ArgumentError("rho_grid: count must be positive");
  const double lo = 0.1 * hi;
  std::vector<double> out;
  if (count == 1) return {hi};
  for (int k = 0; k < count; ++k) out.push_back(lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(count - 1));
  out.back() = hi;
  return out;
}

/// Per-entry penalty weights from block penalties. The diagonal is penalized
/// with the TT (temperature) or PP (proxy) weight.
inline Matrix penalty_matrix(const PenaltySpec& penalty, const FieldGeometry& geom) {
  penalty.validate();
  const Index p = geom.size();
  Matrix r(p, p);
  for (Index j = 0; j < p; ++j)
    for (Index i = 0; i < p; ++i) r(i, j) = penalty.for_block(geom.block_of(i, j));
  return r;
}

inline BlockSparsity sparsity_of(const Matrix& omega, const FieldGeometry& geom) {
  if (omega.rows() != geom.size()) throw ValidationError("sparsity_of: geometry size mismatch");
  std::array<double, 3> nonzero{}, possible{};
  for (Index j = 0; j < omega.cols(); ++j) {
    for (Index i = j + 1; i < omega.rows(); ++i) {
      const auto b = static_cast<std::size_t>(geom.block_of(i, j));
      possible[b] += 1.0;
      if (omega(i, j) != 0.0) nonzero[b] += 1.0;
    }
  }
  auto frac = [&](std::size_t b) { return possible[b] > 0.0 ? nonzero[b] / possible[b] : 0.0; };
  return {frac(0), frac(1), frac(2)};
}

struct GlassoOptions {
  double tol = 1e-6;
  int max_iter = 1000;
};

/// Penalized precision estimate:
///   maximize log det(Omega) - tr(S Omega) - sum_ij R_ij |omega_ij|
/// by block coordinate descent over columns, each column a lasso problem
/// solved by cyclic soft-thresholding. `sigma` is the covariance iterate,
/// which satisfies |S_ij - sigma_ij| <= R_ij; `omega` is assembled from the
/// column regressions and is exactly zero where the lasso put zeros.
/// `objective` is the penalized objective.
inline PrecisionEstimate glasso_solve(const Matrix& s, const Matrix& r, const GlassoOptions& opts = {}) {
  const Index p = s.rows();
  if (s.cols() != p || r.rows() != p || r.cols() != p) throw ValidationError("glasso_solve: shape mismatch");
  if (!is_symmetric(s, 1e-10)) throw ValidationError("glasso_solve: S is not symmetric");
  if ((r.array() < 0.0).any() || !r.allFinite()) throw ArgumentError("glasso_solve: negative or non-finite penalty");
  if (!(opts.tol > 0.0)) throw ArgumentError("glasso_solve: tol must be positive");

  Matrix w = s;
  w.diagonal() += r.diagonal();
  for (Index j = 0; j < p; ++j)
    if (!(w(j, j) > 0.0)) throw ValidationError("glasso_solve: non-positive diagonal at " + std::to_string(j));

  Matrix beta = Matrix::Zero(p, p);  // column j: regression of j on the others
  Vector resid(p), column(p);
  IndexList support;
  const double inner_tol = 0.1 * opts.tol;
  const double gap_tol = 1e-5 * static_cast<double>(p);

  PrecisionEstimate out;
  auto soft = [](double z, double t) { return z > t ? z - t : (z < -t ? z + t : 0.0); };
  // w * b restricted to the nonzeros of b.
  auto sparse_product = [&](const auto& b, Vector& dst) {
    support.clear();
    for (Index k = 0; k < p; ++k)
      if (b(k) != 0.0) support.push_back(k);
    dst.setZero();
    for (Index k : support) dst.noalias() += w.col(k) * b(k);
  };

  for (int sweep = 1; sweep <= opts.max_iter; ++sweep) {
    double max_change = 0.0;
    for (Index j = 0; j < p; ++j) {
      auto b = beta.col(j);
      sparse_product(b, column);
      resid = s.col(j) - column;  // entry j is unused
      for (int pass = 0; pass < 10000; ++pass) {
        double moved = 0.0;
        for (Index k = 0; k < p; ++k) {
          if (k == j) continue;
          const double wkk = w(k, k);
          const double z = resid(k) + wkk * b(k);
          const double updated = soft(z, r(k, j)) / wkk;
          const double delta = updated - b(k);
          if (delta != 0.0) {
            resid.noalias() -= w.col(k) * delta;
            b(k) = updated;
            moved = std::max(moved, std::abs(delta) * wkk);
          }
        }
        if (moved < inner_tol) break;
      }
      sparse_product(b, column);
      for (Index i = 0; i < p; ++i) {
        if (i == j) continue;
        max_change = std::max(max_change, std::abs(column(i) - w(i, j)));
        w(i, j) = column(i);
        w(j, i) = column(i);
      }
    }
    out.sweeps = sweep;
    if (max_change >= opts.tol) continue;

    Matrix theta = Matrix::Zero(p, p);
    for (Index j = 0; j < p; ++j) {
      double explained = 0.0;
      for (Index k = 0; k < p; ++k)
        if (k != j) explained += w(k, j) * beta(k, j);
      const double tjj = 1.0 / (w(j, j) - explained);
      theta(j, j) = tjj;
      for (Index k = 0; k < p; ++k)
        if (k != j) theta(k, j) = -beta(k, j) * tjj;
    }
    Matrix omega = 0.5 * (theta + theta.transpose());
    auto llt_omega = try_cholesky(omega);
    auto llt_w = try_cholesky(w);
    if (!llt_omega || !llt_w) continue;
    const double penalty_term = r.cwiseProduct(omega.cwiseAbs()).sum();
    const double primal = -log_det(*llt_omega) + s.cwiseProduct(omega).sum() + penalty_term;
    const double dual = log_det(*llt_w) + static_cast<double>(p);
    const double gap = primal - dual;
    out.trace.push_back(gap);
    if (std::abs(gap) > gap_tol) continue;

    out.objective = -primal;
    out.omega = std::move(omega);
    out.sigma = w;
    out.graph = graph_from_precision(out.omega, 0.0);
    return out;
  }
  throw ConvergenceError("glasso_solve: no convergence after " + std::to_string(opts.max_iter) +
                             " sweeps (duality-gap trace attached)",
                         out.trace, w);
}

inline PrecisionEstimate glasso_solve(const Matrix& s, const PenaltySpec& penalty, const FieldGeometry& geom,
                                      double tol = 1e-6) {
  if (geom.size() != s.rows()) throw ValidationError("glasso_solve: geometry size mismatch");
  GlassoOptions opts;
  opts.tol = tol;
  return glasso_solve(s, penalty_matrix(penalty, geom), opts);
}

/// Uniform-penalty solve; no geometry needed.
inline PrecisionEstimate glasso_solve(const Matrix& s, double rho, double tol = 1e-6) {
  if (!std::isfinite(rho) || rho < 0.0) throw ArgumentError("glasso_solve: negative penalty");
  GlassoOptions opts;
  opts.tol = tol;
  return glasso_solve(s, Matrix::Constant(s.rows(), s.rows(), rho), opts);
}

struct SparsitySearchResult {
  PenaltySpec penalty;
  PrecisionEstimate estimate;
  BlockSparsity achieved;
  int solves = 0;
};

/// Finds block penalties whose estimate hits the per-block sparsity targets.
/// All penalties start at rho_max; each block is then bisected on
/// [0, rho_max] in the order TT, TP, PP with the other penalties held fixed,
/// followed by one pass re-checking every block. A block with no possible
/// entries (e.g. PP with a single proxy) is skipped.
inline SparsitySearchResult sparsity_search(const Matrix& s, const FieldGeometry& geom, const SparsityTarget& target,
                                            double tol = 1e-6, int max_steps = 40) {
  target.validate();
  const double hi0 = rho_max(s);
  if (!(hi0 > 0.0)) throw ValidationError("sparsity_search: rho_max is zero (input is already diagonal)");

  SparsitySearchResult res;
  res.penalty = PenaltySpec{hi0, hi0, hi0, std::nullopt};
  auto solve = [&](const PenaltySpec& pen) {
    ++res.solves;
    return glasso_solve(s, pen, geom, tol);
  };

  const auto nt = static_cast<Index>(geom.temperature_indices().size());
  const auto np = geom.size() - nt;
  auto has_entries = [&](Block b) {
    switch (b) {
      case Block::tt: return nt >= 2;
      case Block::tp: return nt >= 1 && np >= 1;
      default: return np >= 2;
    }
  };
  auto within = [&](const BlockSparsity& got, Block b) {
    return !has_entries(b) || std::abs(got[b] - target.target[b]) <= target.tolerance;
  };

  res.estimate = solve(res.penalty);
  res.achieved = sparsity_of(res.estimate.omega, geom);

  auto search_block = [&](Block b) {
    if (within(res.achieved, b)) return;
    double lo = 0.0, hi = hi0;
    double best_err = std::abs(res.achieved[b] - target.target[b]);
    for (int step = 0; step < max_steps; ++step) {
      PenaltySpec probe = res.penalty;
      probe[b] = 0.5 * (lo + hi);
      auto est = solve(probe);
      auto got = sparsity_of(est.omega, geom);
      const double err = std::abs(got[b] - target.target[b]);
      if (err < best_err) best_err = err;
      if (got[b] > target.target[b]) lo = probe[b];
      else hi = probe[b];
      if (err <= target.tolerance) {
        res.penalty = probe;
        res.estimate = std::move(est);
        res.achieved = got;
        return;
      }
    }
    std::ostringstream msg;
    msg << "sparsity_search: target " << target.target[b] << " for block " << to_string(b)
        << " unreachable in " << max_steps << " bisection steps (closest error " << best_err << ")";
    throw ConvergenceError(msg.str(), {res.achieved.tt, res.achieved.tp, res.achieved.pp});
  };

  for (Block b : {Block::tt, Block::tp, Block::pp}) search_block(b);
  for (Block b : {Block::tt, Block::tp, Block::pp}) search_block(b);
  return res;
}

}  // namespace graphem
