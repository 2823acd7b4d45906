#pragma once

// Bus telemetry payload: a flat JSON object whose serialized length can be
// padded to an exact byte count.

#include <cstdint>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "busgw/geo.hpp"
#include "busgw/wire.hpp"

namespace busgw::telemetry {

struct TelemetryPayload {
  std::string bus_id;
  std::uint64_t seq = 0;
  double lat = 0.0;
  double lon = 0.0;
  double ts_ms = 0.0;  // publisher monotonic clock, microsecond resolution
  std::string pad;
  bool operator==(const TelemetryPayload&) const = default;
};

namespace detail {

inline std::string number(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline std::string serialize(const TelemetryPayload& p, std::size_t pad_len) {
  std::string s;
  s.reserve(96 + p.bus_id.size() + pad_len);
  s += "{\"bus_id\":";
  s += nlohmann::json(p.bus_id).dump();
  s += ",\"seq\":";
  s += std::to_string(p.seq);
  s += ",\"lat\":";
  s += number(p.lat, 7);
  s += ",\"lon\":";
  s += number(p.lon, 7);
  s += ",\"ts_ms\":";
  s += number(p.ts_ms, 3);
  s += ",\"pad\":\"";
  s.append(pad_len, 'x');
  s += "\"}";
  return s;
}

}  // namespace detail

// Serialized length is max(target_size, length with an empty pad).
inline std::string build_payload(const geo::GpsFix& fix, std::string_view bus_id, std::uint64_t seq,
                                 std::size_t target_size, double ts_ms) {
  // Truncated, not rounded, so the stamp never lies in the future.
  const double stamp = std::floor(ts_ms * 1000.0) / 1000.0;
  TelemetryPayload p{std::string(bus_id), seq, fix.latitude, fix.longitude, stamp, {}};
  const std::size_t base = detail::serialize(p, 0).size();
  return detail::serialize(p, target_size > base ? target_size - base : 0);
}

inline wire::Bytes to_bytes(std::string_view s) { return wire::Bytes(s.begin(), s.end()); }

inline std::optional<TelemetryPayload> parse_payload(std::string_view text) {
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  try {
    TelemetryPayload p;
    p.bus_id = j.at("bus_id").get<std::string>();
    p.seq = j.at("seq").get<std::uint64_t>();
    p.lat = j.at("lat").get<double>();
    p.lon = j.at("lon").get<double>();
    p.ts_ms = j.at("ts_ms").get<double>();
    p.pad = j.value("pad", std::string{});
    if (!geo::in_bounds({p.lat, p.lon}) || p.bus_id.empty()) return std::nullopt;
    return p;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

inline std::optional<TelemetryPayload> parse_payload(const wire::Bytes& bytes) {
  return parse_payload(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace busgw::telemetry
