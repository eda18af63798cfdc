#pragma once

// Independent reference computations for the tests. Nothing here calls the
// solvers under test.

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "graphem/graph.hpp"
#include "graphem/linalg.hpp"

namespace oracle {

using graphem::Graph;
using graphem::Index;
using graphem::IndexList;
using graphem::Matrix;
using graphem::Vector;

/// Wishart-like SPD matrix: A A^T / m + 0.1 I with A p x m Gaussian.
inline Matrix random_spd(Index p, std::mt19937_64& rng, Index m = 0) {
  if (m == 0) m = p + 3;
  std::normal_distribution<double> z;
  Matrix a(p, m);
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < p; ++i) a(i, j) = z(rng);
  Matrix s = a * a.transpose() / static_cast<double>(m);
  s.diagonal().array() += 0.1;
  return s;
}

/// Random Erdos-Renyi graph.
inline Graph random_graph(Index p, double prob, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(prob);
  Graph g(p);
  for (Index i = 0; i < p; ++i)
    for (Index j = i + 1; j < p; ++j)
      if (coin(rng)) g.add_edge(i, j);
  return g;
}

/// A decomposable graph built by adding vertices one at a time, each joined
/// to a complete subset of the earlier vertices. `parents[v]` is that subset,
/// so the insertion order is a perfect elimination order read backwards.
struct Decomposable {
  Graph graph;
  std::vector<IndexList> parents;
};

inline Decomposable random_decomposable(Index p, std::mt19937_64& rng) {
  Decomposable d{Graph(p), std::vector<IndexList>(static_cast<std::size_t>(p))};
  std::vector<IndexList> cliques;
  std::bernoulli_distribution keep(0.7);
  for (Index v = 0; v < p; ++v) {
    IndexList parents;
    if (!cliques.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, cliques.size() - 1);
      for (Index u : cliques[pick(rng)])
        if (keep(rng)) parents.push_back(u);
    }
    for (Index u : parents) d.graph.add_edge(u, v);
    IndexList clique = parents;
    clique.push_back(v);
    cliques.push_back(clique);
    d.parents[static_cast<std::size_t>(v)] = parents;
  }
  return d;
}

/// Maximum likelihood precision on a decomposable graph from the clique
/// marginals: the density factors into p(x_v | x_parents(v)), so
/// Omega = sum_v ([S_{K_v}^{-1}]^0 - [S_{F_v}^{-1}]^0), K_v = F_v + {v}.
inline Matrix decomposable_mle_precision(const Matrix& s, const Decomposable& d) {
  const Index p = s.rows();
  Matrix omega = Matrix::Zero(p, p);
  auto add = [&](const IndexList& set, double sign) {
    if (set.empty()) return;
    const auto k = static_cast<Index>(set.size());
    Matrix sub(k, k);
    for (Index a = 0; a < k; ++a)
      for (Index b = 0; b < k; ++b) sub(a, b) = s(set[static_cast<std::size_t>(a)], set[static_cast<std::size_t>(b)]);
    const Matrix inv = sub.inverse();
    for (Index a = 0; a < k; ++a)
      for (Index b = 0; b < k; ++b)
        omega(set[static_cast<std::size_t>(a)], set[static_cast<std::size_t>(b)]) += sign * inv(a, b);
  };
  for (Index v = 0; v < p; ++v) {
    IndexList k = d.parents[static_cast<std::size_t>(v)];
    add(k, -1.0);
    k.push_back(v);
    add(k, 1.0);
  }
  return omega;
}

/// Plain EM for a multivariate normal with missing entries (NaN), one row at
/// a time with explicit inverses.
struct TextbookEm {
  Vector mu;
  Matrix sigma;
  Matrix completed;
};

inline TextbookEm textbook_em(const Matrix& x, int iters) {
  const Index n = x.rows(), p = x.cols();
  TextbookEm out;
  out.completed = x;
  for (Index j = 0; j < p; ++j) {
    double sum = 0.0;
    int cnt = 0;
    for (Index i = 0; i < n; ++i)
      if (std::isfinite(x(i, j))) {
        sum += x(i, j);
        ++cnt;
      }
    for (Index i = 0; i < n; ++i)
      if (!std::isfinite(x(i, j))) out.completed(i, j) = sum / cnt;
  }
  out.mu = out.completed.colwise().mean().transpose();
  Matrix c = out.completed.rowwise() - out.mu.transpose();
  out.sigma = c.transpose() * c / static_cast<double>(n);

  for (int it = 0; it < iters; ++it) {
    Matrix extra = Matrix::Zero(p, p);
    Matrix filled = x;
    for (Index i = 0; i < n; ++i) {
      std::vector<Index> o, m;
      for (Index j = 0; j < p; ++j) (std::isfinite(x(i, j)) ? o : m).push_back(j);
      if (m.empty()) continue;
      const auto no = static_cast<Index>(o.size()), nm = static_cast<Index>(m.size());
      Matrix soo(no, no), smo(nm, no), smm(nm, nm);
      Vector xo(no);
      for (Index a = 0; a < no; ++a) {
        xo(a) = x(i, o[a]) - out.mu(o[a]);
        for (Index b = 0; b < no; ++b) soo(a, b) = out.sigma(o[a], o[b]);
      }
      for (Index a = 0; a < nm; ++a) {
        for (Index b = 0; b < no; ++b) smo(a, b) = out.sigma(m[a], o[b]);
        for (Index b = 0; b < nm; ++b) smm(a, b) = out.sigma(m[a], m[b]);
      }
      const Matrix reg = no ? Matrix(smo * soo.inverse()) : Matrix::Zero(nm, 0);
      const Vector xm = no ? Vector(reg * xo) : Vector::Zero(nm);
      const Matrix cm = no ? Matrix(smm - reg * smo.transpose()) : smm;
      for (Index a = 0; a < nm; ++a) {
        filled(i, m[a]) = out.mu(m[a]) + xm(a);
        for (Index b = 0; b < nm; ++b) extra(m[a], m[b]) += cm(a, b);
      }
    }
    out.completed = filled;
    out.mu = filled.colwise().mean().transpose();
    Matrix cc = filled.rowwise() - out.mu.transpose();
    out.sigma = (cc.transpose() * cc + extra) / static_cast<double>(n);
  }
  return out;
}

/// True when every step of `trace` is non-decreasing within relative slack.
inline bool non_decreasing(const std::vector<double>& trace, double slack = 1e-8) {
  for (std::size_t i = 1; i < trace.size(); ++i)
    if (trace[i] < trace[i - 1] - slack * std::abs(trace[i - 1])) return false;
  return true;
}

}  // namespace oracle
