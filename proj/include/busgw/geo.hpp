#pragma once

// Spherical-earth geometry for bus tracking: distances, motion along a route
// polyline, and stop proximity detection with a hysteresis band.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace busgw::geo {

inline constexpr double kEarthRadiusM = 6'371'000.0;

class GeoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LatLon {
  double lat = 0.0;
  double lon = 0.0;
  bool operator==(const LatLon&) const = default;
};

inline bool in_bounds(LatLon p) noexcept {
  return std::isfinite(p.lat) && std::isfinite(p.lon) && p.lat >= -90.0 && p.lat <= 90.0 && p.lon >= -180.0 &&
         p.lon <= 180.0;
}

struct GpsFix {
  double latitude = 0.0;
  double longitude = 0.0;
  std::int64_t timestamp_ms = 0;  // unix milliseconds

  LatLon position() const noexcept { return {latitude, longitude}; }
  bool valid() const noexcept { return in_bounds(position()) && timestamp_ms >= 0; }
  bool operator==(const GpsFix&) const = default;
};

inline double deg2rad(double deg) noexcept { return deg * std::numbers::pi / 180.0; }

inline double haversine_m(LatLon a, LatLon b) noexcept {
  const double dlat = deg2rad(b.lat - a.lat);
  const double dlon = deg2rad(b.lon - a.lon);
  const double s_lat = std::sin(dlat / 2.0);
  const double s_lon = std::sin(dlon / 2.0);
  double h = s_lat * s_lat + std::cos(deg2rad(a.lat)) * std::cos(deg2rad(b.lat)) * s_lon * s_lon;
  h = std::min(1.0, std::max(0.0, h));
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(h));
}

// A polyline with cached segment lengths. When `loop` is set an implicit
// closing segment joins the last waypoint back to the first.
class Route {
 public:
  Route(std::string route_id, std::vector<LatLon> waypoints, bool loop)
      : id_(std::move(route_id)), waypoints_(std::move(waypoints)), loop_(loop) {
    if (waypoints_.size() < 2) throw GeoError("route '" + id_ + "' needs at least two waypoints");
    for (std::size_t i = 0; i < waypoints_.size(); ++i) {
      if (!in_bounds(waypoints_[i])) throw GeoError("route '" + id_ + "' waypoint " + std::to_string(i) + " out of bounds");
      if (i > 0 && waypoints_[i] == waypoints_[i - 1]) {
        throw GeoError("route '" + id_ + "' repeats waypoint " + std::to_string(i));
      }
    }
    if (loop_ && waypoints_.front() == waypoints_.back()) {
      throw GeoError("looped route '" + id_ + "' must not repeat its first waypoint at the end");
    }
    const std::size_t n = segment_count();
    lengths_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) lengths_.push_back(haversine_m(start_of(i), end_of(i)));
  }

  const std::string& id() const noexcept { return id_; }
  const std::vector<LatLon>& waypoints() const noexcept { return waypoints_; }
  bool loop() const noexcept { return loop_; }
  std::size_t segment_count() const noexcept { return loop_ ? waypoints_.size() : waypoints_.size() - 1; }
  double segment_length(std::size_t i) const { return lengths_.at(i); }
  LatLon start_of(std::size_t seg) const { return waypoints_.at(seg); }
  LatLon end_of(std::size_t seg) const { return waypoints_.at((seg + 1) % waypoints_.size()); }

  double total_length() const noexcept {
    double sum = 0.0;
    for (double l : lengths_) sum += l;
    return sum;
  }

 private:
  std::string id_;
  std::vector<LatLon> waypoints_;
  bool loop_;
  std::vector<double> lengths_;
};

struct RoutePosition {
  std::size_t segment = 0;
  double fraction = 0.0;  // in [0, 1]
  bool operator==(const RoutePosition&) const = default;
};

inline LatLon point_at(const Route& route, RoutePosition pos) {
  const LatLon a = route.start_of(pos.segment);
  const LatLon b = route.end_of(pos.segment);
  return {a.lat + (b.lat - a.lat) * pos.fraction, a.lon + (b.lon - a.lon) * pos.fraction};
}

// Arc length from the first waypoint to `pos`.
inline double distance_along(const Route& route, RoutePosition pos) {
  double d = 0.0;
  for (std::size_t i = 0; i < pos.segment; ++i) d += route.segment_length(i);
  return d + pos.fraction * route.segment_length(pos.segment);
}

struct Advance {
  RoutePosition position;
  GpsFix fix;
};

inline Advance advance_along_route(const Route& route, RoutePosition pos, double speed_mps, double dt_s,
                                   std::int64_t timestamp_ms) {
  if (pos.segment >= route.segment_count()) {
    throw GeoError("segment index " + std::to_string(pos.segment) + " out of range for route '" + route.id() + "'");
  }
  if (!(pos.fraction >= 0.0 && pos.fraction <= 1.0)) throw GeoError("route fraction outside [0, 1]");
  if (speed_mps < 0.0 || dt_s < 0.0) throw GeoError("speed and dt must be non-negative");

  double remaining = speed_mps * dt_s;
  const std::size_t last = route.segment_count() - 1;
  // Whole laps are skipped up front so very long steps stay O(segments).
  if (route.loop() && remaining > route.total_length()) remaining = std::fmod(remaining, route.total_length());
  while (remaining > 0.0) {
    const double len = route.segment_length(pos.segment);
    const double left = (1.0 - pos.fraction) * len;
    if (remaining < left) {
      pos.fraction += remaining / len;
      break;
    }
    remaining -= left;
    if (pos.segment == last) {
      if (!route.loop()) {
        pos.fraction = 1.0;
        break;
      }
      pos.segment = 0;
    } else {
      ++pos.segment;
    }
    pos.fraction = 0.0;
  }
  const LatLon p = point_at(route, pos);
  return {pos, GpsFix{p.lat, p.lon, timestamp_ms}};
}

struct Stop {
  std::string stop_id;
  LatLon position;
  double radius_m = 100.0;

  void validate() const {
    if (!in_bounds(position)) throw GeoError("stop '" + stop_id + "' position out of bounds");
    if (!(radius_m > 0.0 && radius_m <= 10'000.0)) throw GeoError("stop '" + stop_id + "' radius must be in (0, 10000]");
  }
};

enum class ProximityKind { Entered, Exited };

inline constexpr const char* to_string(ProximityKind k) noexcept {
  return k == ProximityKind::Entered ? "Entered" : "Exited";
}

struct ProximityEvent {
  std::string bus_id;
  std::string stop_id;
  ProximityKind kind = ProximityKind::Entered;
  double distance_m = 0.0;
  std::int64_t timestamp_ms = 0;
  bool operator==(const ProximityEvent&) const = default;
};

inline constexpr double kDefaultHysteresis = 0.1;

struct ProximityStep {
  bool inside = false;
  std::optional<ProximityEvent> event;
};

// Enter at distance <= radius, leave only beyond radius * (1 + hysteresis).
inline ProximityStep proximity_step(bool inside, const GpsFix& bus, std::string_view bus_id, const Stop& stop,
                                    double hysteresis = kDefaultHysteresis) {
  if (!(hysteresis >= 0.0 && hysteresis < 1.0)) throw GeoError("hysteresis must be in [0, 1)");
  const double d = haversine_m(bus.position(), stop.position);
  if (!inside && d <= stop.radius_m) {
    return {true, ProximityEvent{std::string(bus_id), stop.stop_id, ProximityKind::Entered, d, bus.timestamp_ms}};
  }
  if (inside && d > stop.radius_m * (1.0 + hysteresis)) {
    return {false, ProximityEvent{std::string(bus_id), stop.stop_id, ProximityKind::Exited, d, bus.timestamp_ms}};
  }
  return {inside, std::nullopt};
}

// ---------------------------------------------------------------------------
// Files: {route_id, loop, waypoints: [[lat, lon], ...]} and
// {stop_id, lat, lon, radius_m}. A route file may also hold an array of routes.

inline Route route_from_json(const nlohmann::json& j) {
  std::vector<LatLon> pts;
  for (const auto& w : j.at("waypoints")) {
    if (!w.is_array() || w.size() != 2) throw GeoError("waypoint must be [lat, lon]");
    pts.push_back({w[0].get<double>(), w[1].get<double>()});
  }
  return Route(j.at("route_id").get<std::string>(), std::move(pts), j.value("loop", false));
}

inline nlohmann::json to_json(const Route& r) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : r.waypoints()) pts.push_back({p.lat, p.lon});
  return {{"route_id", r.id()}, {"loop", r.loop()}, {"waypoints", pts}};
}

inline Stop stop_from_json(const nlohmann::json& j) {
  Stop s{j.at("stop_id").get<std::string>(), {j.at("lat").get<double>(), j.at("lon").get<double>()},
         j.at("radius_m").get<double>()};
  s.validate();
  return s;
}

inline nlohmann::json to_json(const Stop& s) {
  return {{"stop_id", s.stop_id}, {"lat", s.position.lat}, {"lon", s.position.lon}, {"radius_m", s.radius_m}};
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw GeoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw GeoError(path + ": " + e.what());
  }
}

inline std::vector<Route> load_routes(const std::string& path) {
  const auto j = read_json_file(path);
  std::vector<Route> routes;
  try {
    if (j.is_array()) {
      for (const auto& r : j) routes.push_back(route_from_json(r));
    } else {
      routes.push_back(route_from_json(j));
    }
  } catch (const nlohmann::json::exception& e) {
    throw GeoError(path + ": " + e.what());
  }
  if (routes.empty()) throw GeoError(path + ": no routes");
  return routes;
}

inline Stop load_stop(const std::string& path) {
  try {
    return stop_from_json(read_json_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw GeoError(path + ": " + e.what());
  }
}

}  // namespace busgw::geo
