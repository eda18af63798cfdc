#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "graphem/data.hpp"
#include "graphem/error.hpp"
#include "graphem/geodesy.hpp"
#include "graphem/graph.hpp"

namespace graphem {

/// Structural variants of the joint temperature/proxy neighbourhood graph.
///
///   variant   TT             TP              PP
///   neigh     radius         radius          radius
///   ind_pp    radius         radius          none
///   car_tp    radius         nearest T only  none
///   car_tt    grid neighbors radius          none
///   car_tt_tp grid neighbors nearest T only  none
enum class GraphVariant { neigh, ind_pp, car_tp, car_tt, car_tt_tp };

inline const char* to_string(GraphVariant v) {
  switch (v) {
    case GraphVariant::neigh: return "neigh";
    case GraphVariant::ind_pp: return "ind_pp";
    case GraphVariant::car_tp: return "car_tp";
    case GraphVariant::car_tt: return "car_tt";
    case GraphVariant::car_tt_tp: return "car_tt_tp";
  }
  return "?";
}

inline GraphVariant parse_variant(const std::string& s) {
  for (auto v : {GraphVariant::neigh, GraphVariant::ind_pp, GraphVariant::car_tp, GraphVariant::car_tt,
                 GraphVariant::car_tt_tp})
    if (s == to_string(v)) return v;
  throw ArgumentError("unknown graph variant '" + s + "' (expected neigh, ind_pp, car_tp, car_tt or car_tt_tp)");
}

struct NeighborhoodSpec {
  double radius_km = 800.0;
  GraphVariant variant = GraphVariant::neigh;
  double earth_radius_km = kEarthRadiusKm;

  void validate() const {
    if (!(radius_km > 0.0)) throw ArgumentError("neighborhood radius must be positive");
    if (!(earth_radius_km > 0.0)) throw ArgumentError("earth radius must be positive");
  }
};

namespace detail {

inline double column_distance(const FieldGeometry& g, Index a, Index b, double earth_radius_km) {
  const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
  return great_circle_distance({g.lat[ua], g.lon[ua]}, {g.lat[ub], g.lon[ub]}, earth_radius_km);
}

/// Longitude separation in degrees, folded into [0, 180].
inline double lon_separation(double a, double b) {
  double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

inline double infer_spacing(const FieldGeometry& g, const IndexList& cols) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t x = 0; x < cols.size(); ++x) {
    for (std::size_t y = x + 1; y < cols.size(); ++y) {
      const auto a = static_cast<std::size_t>(cols[x]), b = static_cast<std::size_t>(cols[y]);
      const double dlat = std::abs(g.lat[a] - g.lat[b]);
      const double dlon = lon_separation(g.lon[a], g.lon[b]);
      if (dlat > 1e-6) best = std::min(best, dlat);
      if (dlon > 1e-6) best = std::min(best, dlon);
    }
  }
  if (!std::isfinite(best)) throw ValidationError("cannot infer grid spacing from fewer than two distinct points");
  return best;
}

}  // namespace detail

/// Rook adjacency between temperature columns on a regular lat/lon grid: each
/// point is joined to the points one grid step north, south, east and west.
/// East-west steps wrap across the dateline when the longitudes do.
inline Graph immediate_grid_neighbors(const FieldGeometry& geom, double spacing_deg) {
  if (!(spacing_deg > 0.0)) throw ArgumentError("grid spacing must be positive");
  constexpr double eps = 1e-6;
  const auto t = geom.temperature_indices();
  Graph g(geom.size());
  if (t.empty()) return g;

  auto on_grid = [&](double offset) {
    const double steps = offset / spacing_deg;
    return std::abs(steps - std::round(steps)) * spacing_deg <= eps;
  };
  const auto first = static_cast<std::size_t>(t.front());
  for (Index j : t) {
    const auto u = static_cast<std::size_t>(j);
    if (!on_grid(geom.lat[u] - geom.lat[first]) || !on_grid(geom.lon[u] - geom.lon[first]))
      throw ValidationError("column " + geom.names[u] + " is not on the declared grid");
  }

  for (std::size_t x = 0; x < t.size(); ++x) {
    for (std::size_t y = x + 1; y < t.size(); ++y) {
      const auto a = static_cast<std::size_t>(t[x]), b = static_cast<std::size_t>(t[y]);
      const double dlat = std::abs(geom.lat[a] - geom.lat[b]);
      const double dlon = detail::lon_separation(geom.lon[a], geom.lon[b]);
      const bool ns = dlon <= eps && std::abs(dlat - spacing_deg) <= eps;
      const bool ew = dlat <= eps && std::abs(dlon - spacing_deg) <= eps;
      if (ns || ew) g.add_edge(t[x], t[y]);
    }
  }
  return g;
}

/// Joint temperature/proxy graph for the given radius and variant. Pairs at
/// distance <= radius are connected.
inline Graph neighborhood_graph(const FieldGeometry& geom, const NeighborhoodSpec& spec) {
  spec.validate();
  const auto t = geom.temperature_indices();
  const auto pr = geom.proxy_indices();
  const auto v = spec.variant;
  Graph g(geom.size());

  auto within = [&](Index a, Index b) {
    return detail::column_distance(geom, a, b, spec.earth_radius_km) <= spec.radius_km;
  };
  auto connect_by_radius = [&](const IndexList& from, const IndexList& to, bool same_set) {
    for (std::size_t x = 0; x < from.size(); ++x)
      for (std::size_t y = same_set ? x + 1 : 0; y < to.size(); ++y)
        if (within(from[x], to[y])) g.add_edge(from[x], to[y]);
  };

  if (v == GraphVariant::car_tt || v == GraphVariant::car_tt_tp) {
    const double spacing = geom.grid_spacing ? *geom.grid_spacing : detail::infer_spacing(geom, t);
    for (const auto& [a, b] : immediate_grid_neighbors(geom, spacing).edges()) g.add_edge(a, b);
  } else {
    connect_by_radius(t, t, true);
  }

  if (v == GraphVariant::car_tp || v == GraphVariant::car_tt_tp) {
    if (!pr.empty() && t.empty()) throw ValidationError("proxy columns have no temperature column to attach to");
    for (Index q : pr) {
      Index best = t.front();
      double best_d = std::numeric_limits<double>::infinity();
      for (Index c : t) {
        const double d = detail::column_distance(geom, q, c, spec.earth_radius_km);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      g.add_edge(q, best);
    }
  } else {
    connect_by_radius(t, pr, false);
  }

  if (v == GraphVariant::neigh) connect_by_radius(pr, pr, true);
  return g;
}

}  // namespace graphem
