#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

namespace transpdt {

inline constexpr double kEarthRadiusMeters = 6371000.0;

struct LatLon {
  double lat = 0.0;
  double lon = 0.0;
  bool operator==(const LatLon&) const = default;
};

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

// Great-circle distance in meters.
inline double haversine_m(LatLon a, LatLon b) {
  const double dlat = deg2rad(b.lat - a.lat);
  const double dlon = deg2rad(b.lon - a.lon);
  const double s = std::sin(dlat / 2.0);
  const double t = std::sin(dlon / 2.0);
  const double h = s * s + std::cos(deg2rad(a.lat)) * std::cos(deg2rad(b.lat)) * t * t;
  return 2.0 * kEarthRadiusMeters * std::asin(std::min(1.0, std::sqrt(h)));
}

// Point displaced by (north, east) meters; small-offset approximation.
inline LatLon offset_m(LatLon origin, double north_m, double east_m) {
  const double dlat = north_m / kEarthRadiusMeters;
  const double dlon = east_m / (kEarthRadiusMeters * std::cos(deg2rad(origin.lat)));
  return {origin.lat + dlat * 180.0 / std::numbers::pi, origin.lon + dlon * 180.0 / std::numbers::pi};
}

}  // namespace transpdt
