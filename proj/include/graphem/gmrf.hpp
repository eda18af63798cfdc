#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "graphem/data.hpp"
#include "graphem/error.hpp"
#include "graphem/geodesy.hpp"
#include "graphem/graph.hpp"
#include "graphem/linalg.hpp"

namespace graphem {

/// A precision matrix together with its inverse and its support graph.
/// Off-graph entries of `omega` are exactly zero.
struct PrecisionEstimate {
  Matrix omega;
  Matrix sigma;
  Graph graph;
  double objective = 0.0;  // log det(omega) - tr(S omega)
  double jitter = 0.0;     // diagonal shift applied to S before solving
  int sweeps = 0;
  std::vector<double> trace;
};

/// Partial correlation of variables i and j given all others.
inline double partial_correlation(const Matrix& omega, Index i, Index j) {
  if (i == j) throw ArgumentError("partial_correlation: i and j must differ");
  if (i < 0 || j < 0 || i >= omega.rows() || j >= omega.rows())
    throw ArgumentError("partial_correlation: index out of range");
  return -omega(i, j) / std::sqrt(omega(i, i) * omega(j, j));
}

/// Support graph of a precision matrix: edge (i, j) iff |omega_ij| > tol.
/// The default threshold is 1e-8 * max|omega|.
inline Graph graph_from_precision(const Matrix& omega, std::optional<double> tol = std::nullopt) {
  if (omega.rows() != omega.cols()) throw ValidationError("graph_from_precision: matrix is not square");
  if (!is_symmetric(omega, 1e-10)) throw ValidationError("graph_from_precision: matrix is not symmetric");
  const double thr = tol ? *tol : 1e-8 * omega.cwiseAbs().maxCoeff();
  if (thr < 0.0) throw ArgumentError("graph_from_precision: negative threshold");
  Graph g(omega.rows());
  for (Index j = 0; j < omega.cols(); ++j)
    for (Index i = j + 1; i < omega.rows(); ++i)
      if (std::abs(omega(i, j)) > thr) g.add_edge(i, j);
  return g;
}

/// log det(omega) - tr(S omega), the Gaussian profile log-likelihood up to
/// constants and the factor n/2.
inline double constrained_loglik(const Matrix& omega, const Matrix& s) {
  auto llt = try_cholesky(omega);
  if (!llt) throw NumericalError("constrained_loglik: precision matrix is not positive definite");
  return log_det(*llt) - s.cwiseProduct(omega).sum();
}

struct GraphicalMleOptions {
  double tol = 1e-6;
  int max_iter = 500;
  /// Record log det of the covariance iterate after every sweep. Costs one
  /// Cholesky per sweep.
  bool record_trace = false;
  /// Over-relaxation factor for the free covariance entries, in [1, 2).
  /// 1 is plain block coordinate ascent. If a relaxed sweep loses positive
  /// definiteness the solve restarts unrelaxed.
  double relaxation = 1.0;
};

namespace detail {

inline Matrix precision_from_regressions(const Matrix& s, const Graph& g, const std::vector<Vector>& beta) {
  const Index p = s.rows();
  Matrix theta = Matrix::Zero(p, p);
  for (Index j = 0; j < p; ++j) {
    const auto& nb = g.neighbors(j);
    const auto& b = beta[static_cast<std::size_t>(j)];
    double explained = 0.0;
    for (std::size_t k = 0; k < nb.size(); ++k) explained += s(nb[k], j) * b(static_cast<Index>(k));
    const double tjj = 1.0 / (s(j, j) - explained);
    theta(j, j) = tjj;
    for (std::size_t k = 0; k < nb.size(); ++k) theta(nb[k], j) = -b(static_cast<Index>(k)) * tjj;
  }
  return 0.5 * (theta + theta.transpose());
}

/// Inverse and log determinant of an SPD matrix whose off-diagonal support is
/// `g`, through a sparse Cholesky factorization. Empty if not positive definite.
inline std::optional<std::pair<Matrix, double>> sparse_spd_inverse(const Matrix& omega, const Graph& g) {
  const Index p = omega.rows();
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(static_cast<std::size_t>(p + 2 * g.edge_count()));
  for (Index j = 0; j < p; ++j) {
    entries.emplace_back(j, j, omega(j, j));
    for (Index i : g.neighbors(j)) entries.emplace_back(i, j, omega(i, j));
  }
  Eigen::SparseMatrix<double> sp(p, p);
  sp.setFromTriplets(entries.begin(), entries.end());
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(sp);
  if (llt.info() != Eigen::Success) return std::nullopt;
  double log_det = 0.0;
  const Vector d = Eigen::SparseMatrix<double>(llt.matrixL()).diagonal();
  for (Index i = 0; i < p; ++i) {
    if (!(d(i) > 0.0) || !std::isfinite(d(i))) return std::nullopt;
    log_det += 2.0 * std::log(d(i));
  }
  Matrix inv = llt.solve(Matrix::Identity(p, p));
  return std::make_pair(Matrix(0.5 * (inv + inv.transpose())), log_det);
}

inline double moment_residual(const Matrix& sigma, const Matrix& s, const Graph& g) {
  double worst = 0.0;
  for (Index j = 0; j < s.rows(); ++j) {
    worst = std::max(worst, std::abs(sigma(j, j) - s(j, j)));
    for (Index i : g.neighbors(j)) worst = std::max(worst, std::abs(sigma(i, j) - s(i, j)));
  }
  return worst;
}

}  // namespace detail

/// Maximum likelihood covariance under the zero pattern of `g`:
///   maximize log det(Omega) - tr(S Omega)  s.t.  omega_ij = 0 for (i, j) not in g.
///
/// Cycles over vertices; for vertex j the covariance column is re-solved as a
/// regression of j on its graph neighbours, which maximizes log det of the
/// covariance iterate over that column with the entries on edges and the
/// diagonal pinned to S. A sweep is converged when no covariance entry moved
/// by more than `tol`; the result is then accepted once the covariance
/// recovered from the (exactly sparse) precision matches S on the diagonal and
/// on every edge to within `tol`.
///
/// `warm_start`, when given, seeds the entries off the graph.
inline PrecisionEstimate graphical_mle(const Matrix& s, const Graph& g, const GraphicalMleOptions& opts = {},
                                       const Matrix* warm_start = nullptr) {
  const Index p = s.rows();
  if (s.cols() != p) throw ValidationError("graphical_mle: S is not square");
  if (g.size() != p) throw ValidationError("graphical_mle: graph size does not match S");
  if (!(opts.tol > 0.0) || opts.max_iter < 1) throw ArgumentError("graphical_mle: tol must be > 0 and max_iter >= 1");
  if (!(opts.relaxation >= 1.0 && opts.relaxation < 2.0)) throw ArgumentError("graphical_mle: relaxation must lie in [1, 2)");
  if (!is_symmetric(s, 1e-10)) throw ValidationError("graphical_mle: S is not symmetric");
  for (Index j = 0; j < p; ++j)
    if (!(s(j, j) > 0.0)) throw ValidationError("graphical_mle: S has a non-positive diagonal entry at " + std::to_string(j));

  PrecisionEstimate out;
  out.graph = g;

  Matrix sj = s;
  {
    auto chol = cholesky_with_jitter(s, "graphical_mle: S");
    out.jitter = chol.jitter;
    sj.diagonal().array() += chol.jitter;
  }

  if (g.edge_count() == p * (p - 1) / 2) {
    // Complete graph: the constraint set is empty and the MLE is S itself.
    auto llt = try_cholesky(sj);
    if (!llt) throw NumericalError("graphical_mle: S is not positive definite");
    out.omega = spd_inverse(*llt);
    out.sigma = sj;
    out.objective = -log_det(*llt) - s.cwiseProduct(out.omega).sum();
    out.sweeps = 0;
    return out;
  }

  Matrix seeded;
  const bool warm = warm_start && warm_start->rows() == p && warm_start->cols() == p;
  if (warm) {
    seeded = *warm_start;
    for (Index j = 0; j < p; ++j) {
      seeded(j, j) = sj(j, j);
      for (Index i : g.neighbors(j)) seeded(i, j) = sj(i, j);
    }
  }

  std::size_t max_deg = 0;
  for (Index j = 0; j < p; ++j) max_deg = std::max(max_deg, g.neighbors(j).size());

  // A failed attempt returns false, except the last one, which throws.
  auto run = [&](const Matrix& start, double relax, bool last) -> bool {
    Matrix w = start;
    std::vector<Vector> beta(static_cast<std::size_t>(p));
    std::vector<double> chol(max_deg * max_deg);
    Vector column(p);
    out.trace.clear();
    // The recovered precision amplifies the remaining change in W; after a
    // failed acceptance test, wait until W has settled proportionally further.
    double check_below = opts.tol;
    for (int sweep = 1; sweep <= opts.max_iter; ++sweep) {
      double max_change = 0.0;
      for (Index j = 0; j < p; ++j) {
        const auto& nb = g.neighbors(j);
        const std::size_t d = nb.size();
        auto& b = beta[static_cast<std::size_t>(j)];
        b.resize(static_cast<Index>(d));
        column.setZero();
        if (d > 0) {
          // Solve W[nb, nb] b = S[nb, j] by a dense Cholesky on the small block.
          for (std::size_t c = 0; c < d; ++c) {
            for (std::size_t r = c; r < d; ++r) {
              double v = w(nb[r], nb[c]);
              for (std::size_t k = 0; k < c; ++k) v -= chol[r * max_deg + k] * chol[c * max_deg + k];
              if (r == c) {
                if (!(v > 0.0)) {
                  if (!last) return false;
                  throw NumericalError("graphical_mle: neighbourhood system of vertex " + std::to_string(j) +
                                       " is singular");
                }
                chol[c * max_deg + c] = std::sqrt(v);
              } else {
                chol[r * max_deg + c] = v / chol[c * max_deg + c];
              }
            }
          }
          for (std::size_t r = 0; r < d; ++r) {
            double v = sj(nb[r], j);
            for (std::size_t k = 0; k < r; ++k) v -= chol[r * max_deg + k] * b(static_cast<Index>(k));
            b(static_cast<Index>(r)) = v / chol[r * max_deg + r];
          }
          for (std::size_t r = d; r-- > 0;) {
            double v = b(static_cast<Index>(r));
            for (std::size_t k = r + 1; k < d; ++k) v -= chol[k * max_deg + r] * b(static_cast<Index>(k));
            b(static_cast<Index>(r)) = v / chol[r * max_deg + r];
          }
          std::size_t k = 0;
          for (; k + 4 <= d; k += 4) {
            const Index q = static_cast<Index>(k);
            column.noalias() += b(q) * w.col(nb[k]) + b(q + 1) * w.col(nb[k + 1]) + b(q + 2) * w.col(nb[k + 2]) +
                                b(q + 3) * w.col(nb[k + 3]);
          }
          for (; k < d; ++k) column.noalias() += b(static_cast<Index>(k)) * w.col(nb[k]);
        }
        if (relax != 1.0) column = relax * column - (relax - 1.0) * w.col(j);
        for (Index i : nb) column(i) = sj(i, j);
        column(j) = w(j, j);
        max_change = std::max(max_change, (column - w.col(j)).cwiseAbs().maxCoeff());
        w.col(j) = column;
        w.row(j) = column.transpose();
      }
      out.sweeps = sweep;
      if (opts.record_trace) {
        auto llt = try_cholesky(w);
        out.trace.push_back(llt ? log_det(*llt) : -std::numeric_limits<double>::infinity());
      }
      if (!std::isfinite(max_change)) {
        if (!last) return false;
        throw NumericalError("graphical_mle: covariance iterate is not finite");
      }
      if (max_change >= check_below) continue;

      Matrix omega = detail::precision_from_regressions(sj, g, beta);
      auto inv = detail::sparse_spd_inverse(omega, g);
      if (!inv) {
        check_below = 0.5 * max_change;
        continue;
      }
      if (const double resid = detail::moment_residual(inv->first, sj, g); resid > opts.tol) {
        check_below = max_change * std::min(0.5, opts.tol / resid);
        continue;
      }

      out.objective = inv->second - s.cwiseProduct(omega).sum();
      out.omega = std::move(omega);
      out.sigma = std::move(inv->first);
      return true;
    }
    if (!last) return false;
    throw ConvergenceError("graphical_mle: no convergence after " + std::to_string(opts.max_iter) + " sweeps",
                           out.trace, w);
  };

  if (warm && run(seeded, opts.relaxation, false)) return out;
  if (opts.relaxation != 1.0 && run(sj, opts.relaxation, false)) return out;
  run(sj, 1.0, true);
  return out;
}

/// Degree and neighbour-distance summary for one block of a T/P graph.
/// TT counts temperature neighbours of temperature vertices, TP counts
/// temperature neighbours of proxy vertices, PP proxy neighbours of proxies.
struct BlockStats {
  Block block = Block::tt;
  Index vertices = 0;
  double mean_degree = 0.0;
  double sd_degree = 0.0;
  std::vector<Index> degrees;
  /// Mean great-circle distance (km) from each vertex with at least one
  /// in-block neighbour to those neighbours.
  std::vector<double> mean_neighbor_distance_km;
};

inline std::array<BlockStats, 3> graph_block_stats(const Graph& g, const FieldGeometry& geom) {
  if (geom.size() != g.size()) throw ValidationError("graph_block_stats: geometry and graph sizes differ");
  std::array<BlockStats, 3> out;
  out[0].block = Block::tt;
  out[1].block = Block::tp;
  out[2].block = Block::pp;

  auto tally = [&](BlockStats& st, const IndexList& from, ColumnKind want) {
    st.vertices = static_cast<Index>(from.size());
    for (Index v : from) {
      Index deg = 0;
      double dist = 0.0;
      for (Index u : g.neighbors(v)) {
        if (geom.kind(u) != want) continue;
        ++deg;
        const auto vu = static_cast<std::size_t>(v), uu = static_cast<std::size_t>(u);
        dist += great_circle_distance({geom.lat[vu], geom.lon[vu]}, {geom.lat[uu], geom.lon[uu]});
      }
      st.degrees.push_back(deg);
      if (deg > 0) st.mean_neighbor_distance_km.push_back(dist / static_cast<double>(deg));
    }
    if (st.degrees.empty()) return;
    double sum = 0.0, sq = 0.0;
    for (Index d : st.degrees) {
      sum += static_cast<double>(d);
      sq += static_cast<double>(d) * static_cast<double>(d);
    }
    const double m = sum / static_cast<double>(st.degrees.size());
    st.mean_degree = m;
    st.sd_degree = std::sqrt(std::max(0.0, sq / static_cast<double>(st.degrees.size()) - m * m));
  };

  const auto t = geom.temperature_indices();
  const auto pr = geom.proxy_indices();
  tally(out[0], t, ColumnKind::temperature);
  tally(out[1], pr, ColumnKind::temperature);
  tally(out[2], pr, ColumnKind::proxy);
  return out;
}

}  // namespace graphem
