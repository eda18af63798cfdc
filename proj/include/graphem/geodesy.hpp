#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

#include "graphem/error.hpp"

namespace graphem {

inline constexpr double kEarthRadiusKm = 6371.0;

struct LatLon {
  double lat = 0.0;  // degrees
  double lon = 0.0;  // degrees
};

/// Haversine distance on a sphere of the given radius, in the radius' units.
inline double great_circle_distance(LatLon a, LatLon b, double earth_radius_km = kEarthRadiusKm) {
  if (!(std::abs(a.lat) <= 90.0) || !(std::abs(b.lat) <= 90.0))
    throw ArgumentError("great_circle_distance: latitude outside [-90, 90]");
  constexpr double deg = std::numbers::pi / 180.0;
  const double phi1 = a.lat * deg, phi2 = b.lat * deg;
  const double dphi = phi2 - phi1;
  const double dlambda = (b.lon - a.lon) * deg;
  const double s1 = std::sin(0.5 * dphi), s2 = std::sin(0.5 * dlambda);
  const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  return 2.0 * earth_radius_km * std::asin(std::sqrt(std::clamp(h, 0.0, 1.0)));
}

}  // namespace graphem
