#pragma once

// Simulated bus fleet. FleetSimulator is the deterministic model (virtual
// clock, bus motion, publication schedule); run_fleet drives it in real time
// over one MQTT session per bus.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "busgw/geo.hpp"
#include "busgw/net.hpp"
#include "busgw/telemetry.hpp"
#include "busgw/wire.hpp"

namespace busgw::fleet {

using wire::QosLevel;

class FleetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A small loop through downtown Recife, used when no routes file is given.
inline geo::Route default_route() {
  return geo::Route("centro",
                    {{-8.063169, -34.871139},
                     {-8.061020, -34.873450},
                     {-8.057960, -34.874560},
                     {-8.055330, -34.872100},
                     {-8.056870, -34.868610},
                     {-8.060740, -34.867390}},
                    true);
}

struct FleetConfig {
  std::size_t bus_count = 1;
  std::vector<geo::Route> routes{default_route()};
  std::uint32_t publish_interval_ms = 5000;
  QosLevel qos = QosLevel::AtMostOnce;
  std::size_t payload_pad_bytes = 0;  // target serialized payload size; 0 = unpadded
  double speed_mps = 8.0;
  net::Endpoint broker{"127.0.0.1", 1883};
  double time_scale = 1.0;
  std::int64_t epoch_ms = 0;  // unix time of virtual t = 0 for fix timestamps

  void validate() const {
    if (bus_count < 1) throw FleetError("bus_count must be >= 1");
    if (publish_interval_ms < 10) throw FleetError("publish_interval_ms must be >= 10");
    if (!(time_scale >= 1.0)) throw FleetError("time_scale must be >= 1");
    if (!(speed_mps >= 0.0)) throw FleetError("speed_mps must be >= 0");
    if (routes.empty()) throw FleetError("at least one route is required");
    for (const auto& r : routes) {
      if (r.id().empty() || r.id().find_first_of("/+#") != std::string::npos) {
        throw FleetError("route id '" + r.id() + "' cannot be used as a topic level");
      }
    }
  }

  double wall_interval_ms() const noexcept { return publish_interval_ms / time_scale; }
};

inline std::string bus_name(std::size_t index) { return "bus-" + std::to_string(index + 1); }

inline std::string telemetry_topic(std::string_view route_id, std::string_view bus_id) {
  return "city/bus/" + std::string(route_id) + "/" + std::string(bus_id) + "/telemetry";
}

struct Publication {
  std::size_t bus = 0;
  std::string bus_id;
  std::string topic;
  geo::GpsFix fix;
  std::uint64_t seq = 0;
  std::int64_t virtual_ms = 0;
};

// Buses are assigned to routes round-robin and spread evenly along them.
// Bus i first publishes at i * interval / N so the load is not bursty.
class FleetSimulator {
 public:
  explicit FleetSimulator(FleetConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t n = config_.bus_count;
    const std::size_t nr = config_.routes.size();
    buses_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Bus b;
      b.id = bus_name(i);
      b.route = i % nr;
      const geo::Route& route = config_.routes[b.route];
      b.topic = telemetry_topic(route.id(), b.id);
      const std::size_t on_route = (n - b.route + nr - 1) / nr;
      const std::size_t rank = i / nr;
      const double start = route.total_length() * static_cast<double>(rank) / static_cast<double>(on_route);
      b.position = geo::advance_along_route(route, {}, 1.0, start, 0).position;
      b.next_due_ms = static_cast<std::int64_t>(i) * config_.publish_interval_ms / static_cast<std::int64_t>(n);
      due_.emplace(b.next_due_ms, i);
      buses_.push_back(std::move(b));
    }
  }

  // Publications due at or before `virtual_ms`, in time order (ties by bus).
  std::vector<Publication> advance_to(std::int64_t virtual_ms) {
    std::vector<Publication> out;
    while (!due_.empty() && due_.top().first <= virtual_ms) {
      const std::size_t i = due_.top().second;
      due_.pop();
      out.push_back(step(i));
      due_.emplace(buses_[i].next_due_ms, i);
    }
    return out;
  }

  std::int64_t next_due_ms() const { return due_.top().first; }

  const FleetConfig& config() const noexcept { return config_; }
  std::size_t bus_count() const noexcept { return buses_.size(); }
  const std::string& bus_id(std::size_t i) const { return buses_.at(i).id; }
  const std::string& topic(std::size_t i) const { return buses_.at(i).topic; }

 private:
  struct Bus {
    std::string id;
    std::string topic;
    std::size_t route = 0;
    geo::RoutePosition position;
    std::uint64_t seq = 0;
    std::int64_t next_due_ms = 0;
    bool moved = false;
  };

  Publication step(std::size_t i) {
    Bus& b = buses_[i];
    const geo::Route& route = config_.routes[b.route];
    const double dt = b.moved ? config_.publish_interval_ms / 1000.0 : 0.0;
    b.moved = true;
    const auto adv = geo::advance_along_route(route, b.position, config_.speed_mps, dt, config_.epoch_ms + b.next_due_ms);
    b.position = adv.position;
    Publication p{i, b.id, b.topic, adv.fix, ++b.seq, b.next_due_ms};
    b.next_due_ms += config_.publish_interval_ms;
    return p;
  }

  using Due = std::pair<std::int64_t, std::size_t>;

  FleetConfig config_;
  std::vector<Bus> buses_;
  std::priority_queue<Due, std::vector<Due>, std::greater<>> due_;
};

// ---------------------------------------------------------------------------
// Real-time run

struct BusStats {
  std::string bus_id;
  std::uint64_t published = 0;
  std::uint64_t acked = 0;
  std::uint64_t errors = 0;
};

struct FleetRunStats {
  std::vector<BusStats> buses;
  std::uint64_t acked_qos1 = 0;
  std::uint64_t acked_qos2 = 0;
  std::uint64_t errors = 0;

  std::uint64_t published() const {
    std::uint64_t n = 0;
    for (const auto& b : buses) n += b.published;
    return n;
  }
};

struct FleetHooks {
  // Called right before a publication goes out; `ts_ms` is the stamp placed in the payload.
  std::function<void(const Publication&, double ts_ms)> on_publish;
  // Stops the run early when it returns true (polled at every publication tick).
  std::function<bool()> should_stop;
};

inline double monotonic_ms() {
  using namespace std::chrono;
  return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

inline void write_stats_csv(const FleetRunStats& stats, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FleetError("cannot write " + path);
  out << "bus_id,published,acked,errors\n";
  for (const auto& b : stats.buses) out << b.bus_id << ',' << b.published << ',' << b.acked << ',' << b.errors << '\n';
}

// Runs the fleet for `duration_s` wall seconds, then waits (up to
// `drain_s`) for outstanding QoS 1/2 flows before disconnecting.
inline FleetRunStats run_fleet(const FleetConfig& config, double duration_s, FleetHooks hooks = {},
                               double drain_s = 5.0) {
  if (!(duration_s > 0.0)) throw FleetError("duration must be positive");
  FleetSimulator sim(config);
  net::asio::io_context ioc;
  const auto endpoint = config.broker.resolve();
  const std::size_t n = sim.bus_count();

  FleetRunStats stats;
  stats.buses.resize(n);
  std::vector<std::shared_ptr<net::MqttConnection>> conns(n);
  std::vector<std::unique_ptr<net::asio::steady_timer>> reconnect_timers(n);
  std::vector<std::chrono::milliseconds> backoff(n, std::chrono::milliseconds(100));
  std::string fatal;
  bool running = true;
  std::size_t connacks = 0;

  std::function<void(std::size_t)> reconnect;
  for (std::size_t i = 0; i < n; ++i) {
    stats.buses[i].bus_id = sim.bus_id(i);
    reconnect_timers[i] = std::make_unique<net::asio::steady_timer>(ioc);
    net::MqttConnection::Handlers h;
    h.on_connack = [&, i](std::uint8_t rc) {
      if (rc != wire::kConnackAccepted) {
        fatal = sim.bus_id(i) + ": CONNACK return code " + std::to_string(rc);
        ioc.stop();
        return;
      }
      ++connacks;
      backoff[i] = std::chrono::milliseconds(100);
    };
    h.on_complete = [&, i](const client::PublishCompleted& c) {
      ++stats.buses[i].acked;
      (c.qos == QosLevel::AtLeastOnce ? stats.acked_qos1 : stats.acked_qos2) += 1;
    };
    h.on_close = [&, i](const std::string& why) {
      if (conns[i]->refused() && connacks == 0) {
        fatal = "connection refused by " + config.broker.str();
        ioc.stop();
        return;
      }
      if (!running) return;
      ++stats.buses[i].errors;
      ++stats.errors;
      stats.buses[i].errors += conns[i]->session().inflight();
      reconnect(i);
      (void)why;
    };
    conns[i] = net::MqttConnection::create(ioc, client::ClientOptions{sim.bus_id(i), 60, true}, std::move(h));
  }
  reconnect = [&](std::size_t i) {
    reconnect_timers[i]->expires_after(backoff[i]);
    backoff[i] = std::min(backoff[i] * 2, std::chrono::milliseconds(5000));
    reconnect_timers[i]->async_wait([&, i](boost::system::error_code ec) {
      if (!ec && running) conns[i]->start(endpoint);
    });
  };
  for (auto& c : conns) c->start(endpoint);

  // One timer drives every bus off the shared virtual clock.
  const auto start = std::chrono::steady_clock::now();
  const auto end = start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                               std::chrono::duration<double>(duration_s));
  net::asio::steady_timer ticker(ioc);
  std::function<void()> schedule;
  auto to_wall = [&](std::int64_t virtual_ms) {
    return start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                       std::chrono::duration<double, std::milli>(virtual_ms / config.time_scale));
  };
  auto finish = [&] {
    running = false;
    ticker.cancel();
    auto deadline = std::make_shared<net::asio::steady_timer>(ioc);
    const auto give_up = std::chrono::steady_clock::now() +
                         std::chrono::duration_cast<std::chrono::steady_clock::duration>(std::chrono::duration<double>(drain_s));
    auto poll = std::make_shared<std::function<void()>>();
    *poll = [&, deadline, give_up, poll] {
      std::size_t outstanding = 0;
      for (auto& c : conns) {
        if (!c->closed()) outstanding += c->session().inflight();
      }
      if (outstanding == 0 || std::chrono::steady_clock::now() >= give_up) {
        for (std::size_t i = 0; i < n; ++i) {
          reconnect_timers[i]->cancel();
          conns[i]->disconnect();
        }
        net::asio::post(ioc, [poll] { *poll = nullptr; });
        return;
      }
      deadline->expires_after(std::chrono::milliseconds(10));
      deadline->async_wait([poll](boost::system::error_code ec) {
        if (!ec && *poll) (*poll)();
      });
    };
    (*poll)();
  };
  schedule = [&] {
    const std::int64_t due = sim.next_due_ms();
    const auto when = to_wall(due);
    if (when >= end || (hooks.should_stop && hooks.should_stop())) {
      finish();
      return;
    }
    ticker.expires_at(when);
    ticker.async_wait([&, due](boost::system::error_code ec) {
      if (ec) return;
      for (auto& pub : sim.advance_to(due)) {
        const double ts = monotonic_ms();
        if (hooks.on_publish) hooks.on_publish(pub, ts);
        const std::string payload =
            telemetry::build_payload(pub.fix, pub.bus_id, pub.seq, config.payload_pad_bytes, ts);
        conns[pub.bus]->publish(pub.topic, telemetry::to_bytes(payload), config.qos);
        ++stats.buses[pub.bus].published;
      }
      schedule();
    });
  };
  schedule();
  ioc.run();
  if (!fatal.empty()) throw FleetError(fatal);
  return stats;
}

}  // namespace busgw::fleet
