#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "graphem/error.hpp"
#include "graphem/linalg.hpp"

namespace graphem {

/// Undirected simple graph over p vertices, stored as sorted adjacency lists.
class Graph {
 public:
  using Edge = std::pair<Index, Index>;

  Graph() = default;
  explicit Graph(Index p) : adj_(static_cast<std::size_t>(p)) {}

  Graph(Index p, const std::vector<Edge>& edges) : Graph(p) {
    for (const auto& [i, j] : edges) add_edge(i, j);
  }

  static Graph complete(Index p) {
    Graph g(p);
    for (Index i = 0; i < p; ++i) {
      auto& a = g.adj_[static_cast<std::size_t>(i)];
      for (Index j = 0; j < p; ++j)
        if (j != i) a.push_back(j);
    }
    return g;
  }

  Index size() const noexcept { return static_cast<Index>(adj_.size()); }

  /// Inserts edge {i, j}; inserting an existing edge is a no-op.
  void add_edge(Index i, Index j) {
    check_vertex(i);
    check_vertex(j);
    if (i == j) throw ArgumentError("graph: self-loop at vertex " + std::to_string(i));
    insert_sorted(adj_[static_cast<std::size_t>(i)], j);
    insert_sorted(adj_[static_cast<std::size_t>(j)], i);
  }

  bool has_edge(Index i, Index j) const {
    if (i < 0 || j < 0 || i >= size() || j >= size()) return false;
    const auto& a = adj_[static_cast<std::size_t>(i)];
    return std::binary_search(a.begin(), a.end(), j);
  }

  const IndexList& neighbors(Index i) const { return adj_[static_cast<std::size_t>(i)]; }
  Index degree(Index i) const { return static_cast<Index>(neighbors(i).size()); }

  Index edge_count() const {
    Index twice = 0;
    for (const auto& a : adj_) twice += static_cast<Index>(a.size());
    return twice / 2;
  }

  /// Edges as (i, j) with i < j, in lexicographic order.
  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (Index i = 0; i < size(); ++i)
      for (Index j : neighbors(i))
        if (j > i) out.emplace_back(i, j);
    return out;
  }

  bool is_subgraph_of(const Graph& other) const {
    if (other.size() != size()) return false;
    for (const auto& [i, j] : edges())
      if (!other.has_edge(i, j)) return false;
    return true;
  }

  friend bool operator==(const Graph& a, const Graph& b) { return a.adj_ == b.adj_; }

 private:
  void check_vertex(Index v) const {
    if (v < 0 || v >= size())
      throw ArgumentError("graph: vertex " + std::to_string(v) + " out of range [0, " + std::to_string(size()) + ")");
  }

  static void insert_sorted(IndexList& a, Index v) {
    auto it = std::lower_bound(a.begin(), a.end(), v);
    if (it == a.end() || *it != v) a.insert(it, v);
  }

  std::vector<IndexList> adj_;
};

}  // namespace graphem
