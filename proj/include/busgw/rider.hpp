#pragma once

// Rider client: follows bus lines, watches one stop, and turns proximity
// crossings into notification records (one per output channel).

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "busgw/geo.hpp"
#include "busgw/net.hpp"
#include "busgw/telemetry.hpp"
#include "busgw/wire.hpp"

namespace busgw::rider {

enum class Channel { Audible, Mechanical };

inline constexpr const char* to_string(Channel c) noexcept { return c == Channel::Audible ? "Audible" : "Mechanical"; }

struct NotificationEvent {
  geo::ProximityEvent proximity;
  Channel channel = Channel::Audible;
  bool operator==(const NotificationEvent&) const = default;
};

struct RiderConfig {
  net::Endpoint broker{"127.0.0.1", 1883};
  std::vector<std::string> line_filters{"city/bus/#"};
  geo::Stop stop;
  wire::QosLevel qos = wire::QosLevel::AtLeastOnce;
  double hysteresis = geo::kDefaultHysteresis;

  void validate() const {
    if (line_filters.empty()) throw std::invalid_argument("rider needs at least one topic filter");
    for (const auto& f : line_filters) {
      if (!wire::is_valid_topic_filter(f)) throw std::invalid_argument("invalid topic filter '" + f + "'");
    }
    stop.validate();
    if (!(hysteresis >= 0.0 && hysteresis < 1.0)) throw std::invalid_argument("hysteresis must be in [0, 1)");
  }
};

struct TrackedBus {
  bool inside = false;
  double distance_m = 0.0;
  std::int64_t last_ts_ms = 0;
  std::string topic;
};

class RiderCore {
 public:
  RiderCore(geo::Stop stop, double hysteresis) : stop_(std::move(stop)), hysteresis_(hysteresis) { stop_.validate(); }

  std::vector<NotificationEvent> on_telemetry(std::string_view topic, std::span<const std::uint8_t> payload) {
    const auto parsed =
        telemetry::parse_payload(std::string_view(reinterpret_cast<const char*>(payload.data()), payload.size()));
    if (!parsed) {
      ++malformed_;
      return {};
    }
    const geo::GpsFix fix{parsed->lat, parsed->lon, static_cast<std::int64_t>(std::floor(parsed->ts_ms))};
    TrackedBus& bus = buses_[parsed->bus_id];
    const auto step = geo::proximity_step(bus.inside, fix, parsed->bus_id, stop_, hysteresis_);
    bus.inside = step.inside;
    bus.distance_m = geo::haversine_m(fix.position(), stop_.position);
    bus.last_ts_ms = fix.timestamp_ms;
    bus.topic = std::string(topic);
    if (!step.event) return {};
    return {NotificationEvent{*step.event, Channel::Audible}, NotificationEvent{*step.event, Channel::Mechanical}};
  }

  // "bus-3 412.7 m from stop-1" for every bus seen so far.
  std::vector<std::string> distance_lines() const {
    std::vector<std::string> lines;
    for (const auto& [id, bus] : buses_) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.1f", bus.distance_m);
      lines.push_back(id + " " + buf + " m from " + stop_.stop_id + (bus.inside ? " (at stop)" : ""));
    }
    return lines;
  }

  std::uint64_t malformed() const noexcept { return malformed_; }
  const std::map<std::string, TrackedBus>& buses() const noexcept { return buses_; }
  const geo::Stop& stop() const noexcept { return stop_; }

 private:
  geo::Stop stop_;
  double hysteresis_;
  std::map<std::string, TrackedBus> buses_;
  std::uint64_t malformed_ = 0;
};

inline std::string format_distance(double m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", m);
  return buf;
}

// One JSON object per line: {ts_ms, bus_id, stop_id, kind, channel, distance_m}.
inline std::string to_json_line(const NotificationEvent& e) {
  std::string s = "{\"ts_ms\":" + std::to_string(e.proximity.timestamp_ms);
  s += ",\"bus_id\":" + nlohmann::json(e.proximity.bus_id).dump();
  s += ",\"stop_id\":" + nlohmann::json(e.proximity.stop_id).dump();
  s += ",\"kind\":\"" + std::string(geo::to_string(e.proximity.kind)) + "\"";
  s += ",\"channel\":\"" + std::string(to_string(e.channel)) + "\"";
  s += ",\"distance_m\":" + format_distance(e.proximity.distance_m) + "}";
  return s;
}

inline std::optional<NotificationEvent> parse_json_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  try {
    NotificationEvent e;
    e.proximity.timestamp_ms = j.at("ts_ms").get<std::int64_t>();
    e.proximity.bus_id = j.at("bus_id").get<std::string>();
    e.proximity.stop_id = j.at("stop_id").get<std::string>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind != "Entered" && kind != "Exited") return std::nullopt;
    e.proximity.kind = kind == "Entered" ? geo::ProximityKind::Entered : geo::ProximityKind::Exited;
    const auto channel = j.at("channel").get<std::string>();
    if (channel != "Audible" && channel != "Mechanical") return std::nullopt;
    e.channel = channel == "Audible" ? Channel::Audible : Channel::Mechanical;
    e.proximity.distance_m = j.at("distance_m").get<double>();
    return e;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

inline void emit_event(const NotificationEvent& e, std::ostream& jsonl, std::ostream* console = nullptr) {
  jsonl << to_json_line(e) << '\n';
  jsonl.flush();
  if (console != nullptr) {
    *console << "[" << e.proximity.timestamp_ms << "] " << e.proximity.bus_id << ' '
             << (e.proximity.kind == geo::ProximityKind::Entered ? "approaching" : "leaving") << ' '
             << e.proximity.stop_id << " at " << format_distance(e.proximity.distance_m) << " m ("
             << (e.channel == Channel::Audible ? "audible" : "mechanical") << ")\n";
  }
}

struct RiderSinks {
  std::ostream* events = nullptr;   // JSON lines
  std::ostream* console = nullptr;  // human-readable mirror and distance lines
  std::ostream* record = nullptr;   // raw telemetry capture for replay
};

// Recorded telemetry: one {"topic": ..., "payload": "..."} object per line.
inline void record_message(std::ostream& out, std::string_view topic, std::span<const std::uint8_t> payload) {
  nlohmann::json j{{"topic", topic}, {"payload", std::string(payload.begin(), payload.end())}};
  out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
}

// Replays a recorded stream through `core`; returns the number of events emitted.
inline std::size_t replay(RiderCore& core, std::istream& recorded, const RiderSinks& sinks) {
  std::size_t emitted = 0;
  std::string line;
  while (std::getline(recorded, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    std::string topic, payload;
    if (!j.is_discarded() && j.is_object() && j.contains("topic") && j.contains("payload") && j["topic"].is_string() &&
        j["payload"].is_string()) {
      topic = j["topic"].get<std::string>();
      payload = j["payload"].get<std::string>();
    } else {
      payload = line;
    }
    const auto bytes = std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(payload.data()), payload.size());
    for (const auto& e : core.on_telemetry(topic, bytes)) {
      if (sinks.events != nullptr) emit_event(e, *sinks.events, sinks.console);
      ++emitted;
    }
  }
  return emitted;
}

struct RiderRunOptions {
  std::string client_id = "rider";
  std::chrono::milliseconds status_interval{5000};
  bool handle_signals = true;
  const std::atomic<bool>* stop = nullptr;  // polled every 100 ms when set
};

// Subscribes and processes telemetry until interrupted. Reconnects with
// exponential backoff when the broker goes away.
inline void run_rider(const RiderConfig& config, RiderCore& core, const RiderSinks& sinks,
                      const RiderRunOptions& options = {}) {
  config.validate();
  net::asio::io_context ioc;
  const auto endpoint = config.broker.resolve();
  bool running = true;
  auto backoff = std::chrono::milliseconds(100);
  net::asio::steady_timer reconnect_timer(ioc), status_timer(ioc), stop_timer(ioc);
  std::shared_ptr<net::MqttConnection> conn;

  auto shutdown = [&] {
    running = false;
    reconnect_timer.cancel();
    status_timer.cancel();
    stop_timer.cancel();
    if (conn) conn->disconnect();
  };

  net::MqttConnection::Handlers h;
  h.on_connack = [&](std::uint8_t rc) {
    if (rc != wire::kConnackAccepted) {
      if (sinks.console) *sinks.console << "broker refused connection (code " << int(rc) << ")\n";
      return;
    }
    backoff = std::chrono::milliseconds(100);
    std::vector<wire::Subscription> subs;
    for (const auto& f : config.line_filters) subs.push_back({f, config.qos});
    conn->subscribe(std::move(subs));
  };
  h.on_message = [&](client::MessageReceived& m) {
    if (sinks.record) record_message(*sinks.record, m.topic, m.payload);
    for (const auto& e : core.on_telemetry(m.topic, m.payload)) {
      if (sinks.events) emit_event(e, *sinks.events, sinks.console);
    }
  };
  h.on_close = [&](const std::string& why) {
    if (!running) return;
    if (sinks.console) *sinks.console << "connection lost (" << why << "), retrying in " << backoff.count() << " ms\n";
    reconnect_timer.expires_after(backoff);
    backoff = std::min(backoff * 2, std::chrono::milliseconds(10000));
    reconnect_timer.async_wait([&](boost::system::error_code ec) {
      if (!ec && running) conn->start(endpoint);
    });
  };
  conn = net::MqttConnection::create(ioc, client::ClientOptions{options.client_id, 60, true}, std::move(h));
  conn->start(endpoint);

  std::function<void()> status;
  status = [&] {
    status_timer.expires_after(options.status_interval);
    status_timer.async_wait([&](boost::system::error_code ec) {
      if (ec || !running) return;
      if (sinks.console) {
        for (const auto& line : core.distance_lines()) *sinks.console << line << '\n';
        sinks.console->flush();
      }
      status();
    });
  };
  status();

  std::function<void()> poll_stop;
  poll_stop = [&] {
    if (options.stop == nullptr) return;
    stop_timer.expires_after(std::chrono::milliseconds(100));
    stop_timer.async_wait([&](boost::system::error_code ec) {
      if (ec) return;
      if (options.stop->load()) {
        shutdown();
        return;
      }
      poll_stop();
    });
  };
  poll_stop();

  net::asio::signal_set signals(ioc);
  if (options.handle_signals) {
    signals.add(SIGINT);
    signals.add(SIGTERM);
    signals.async_wait([&](boost::system::error_code ec, int) {
      if (!ec) shutdown();
    });
  }
  // The signal wait would keep run() alive after shutdown.
  net::asio::steady_timer signal_reaper(ioc);
  std::function<void()> reap;
  reap = [&] {
    signal_reaper.expires_after(std::chrono::milliseconds(200));
    signal_reaper.async_wait([&](boost::system::error_code ec) {
      if (ec) return;
      if (!running && (!conn || conn->closed())) {
        boost::system::error_code ignore;
        signals.cancel(ignore);
        return;
      }
      reap();
    });
  };
  reap();
  ioc.run();
}

}  // namespace busgw::rider
