#pragma once

// Client side of the protocol, without I/O: tracks outbound QoS flows and
// inbound exactly-once state, and turns received packets into events.

#include <chrono>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "busgw/wire.hpp"

namespace busgw::client {

using Clock = std::chrono::steady_clock;
using TimePoint = Clock::time_point;
using wire::QosLevel;

struct ClientOptions {
  std::string client_id;
  std::uint16_t keepalive_seconds = 60;
  bool clean_session = true;
};

struct Connacked {
  std::uint8_t return_code = 0;
};
struct MessageReceived {
  std::string topic;
  wire::Bytes payload;
  QosLevel qos = QosLevel::AtMostOnce;
};
struct PublishCompleted {
  std::uint16_t packet_id = 0;
  QosLevel qos = QosLevel::AtLeastOnce;
};
struct Subacked {
  std::uint16_t packet_id = 0;
  std::vector<std::uint8_t> return_codes;
};
struct Unsubacked {
  std::uint16_t packet_id = 0;
};
struct Pong {};
struct ProtocolViolation {
  std::string reason;
};

using Event = std::variant<Connacked, MessageReceived, PublishCompleted, Subacked, Unsubacked, Pong, ProtocolViolation>;

class ClientSession {
 public:
  explicit ClientSession(ClientOptions options) : options_(std::move(options)) {}

  wire::Connect connect_packet() const {
    wire::Connect c;
    c.client_id = options_.client_id;
    c.keepalive_seconds = options_.keepalive_seconds;
    c.clean_session = options_.clean_session;
    return c;
  }

  // Builds the PUBLISH for an application message and starts tracking it.
  wire::Publish publish(std::string topic, wire::Bytes payload, QosLevel qos, TimePoint now = {}) {
    wire::Publish p;
    p.topic = std::move(topic);
    p.qos = qos;
    p.payload = std::move(payload);
    if (qos != QosLevel::AtMostOnce) {
      const std::uint16_t id = allocate_id();
      p.packet_id = id;
      outbound_.emplace(id, Outbound{qos == QosLevel::AtLeastOnce ? Stage::AwaitPuback : Stage::AwaitPubrec, p, now});
    }
    return p;
  }

  wire::Subscribe subscribe(std::vector<wire::Subscription> subs) {
    return wire::Subscribe{allocate_id(), std::move(subs)};
  }

  wire::Unsubscribe unsubscribe(std::vector<std::string> filters) {
    return wire::Unsubscribe{allocate_id(), std::move(filters)};
  }

  // Feeds one inbound packet; replies to send go to `replies`.
  std::vector<Event> handle(const wire::Packet& packet, std::vector<wire::Packet>& replies) {
    std::vector<Event> events;
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, wire::Connack>) {
            events.push_back(Connacked{p.return_code});
          } else if constexpr (std::is_same_v<T, wire::Publish>) {
            on_publish(p, replies, events);
          } else if constexpr (std::is_same_v<T, wire::Pubrel>) {
            inbound_qos2_.erase(p.packet_id);
            replies.push_back(wire::Pubcomp{p.packet_id});
          } else if constexpr (std::is_same_v<T, wire::Puback>) {
            auto it = outbound_.find(p.packet_id);
            if (it != outbound_.end() && it->second.stage == Stage::AwaitPuback) {
              outbound_.erase(it);
              events.push_back(PublishCompleted{p.packet_id, QosLevel::AtLeastOnce});
            }
          } else if constexpr (std::is_same_v<T, wire::Pubrec>) {
            auto it = outbound_.find(p.packet_id);
            if (it != outbound_.end() && it->second.stage != Stage::AwaitPuback) {
              it->second.stage = Stage::AwaitPubcomp;
              replies.push_back(wire::Pubrel{p.packet_id});
            }
          } else if constexpr (std::is_same_v<T, wire::Pubcomp>) {
            auto it = outbound_.find(p.packet_id);
            if (it != outbound_.end() && it->second.stage == Stage::AwaitPubcomp) {
              outbound_.erase(it);
              events.push_back(PublishCompleted{p.packet_id, QosLevel::ExactlyOnce});
            }
          } else if constexpr (std::is_same_v<T, wire::Suback>) {
            events.push_back(Subacked{p.packet_id, p.return_codes});
          } else if constexpr (std::is_same_v<T, wire::Unsuback>) {
            events.push_back(Unsubacked{p.packet_id});
          } else if constexpr (std::is_same_v<T, wire::Pingresp>) {
            events.push_back(Pong{});
          } else {
            events.push_back(
                ProtocolViolation{std::string("unexpected ") + wire::to_string(wire::packet_type(packet))});
          }
        },
        packet);
    return events;
  }

  // Re-sends unacknowledged flows older than `timeout` (DUP set on PUBLISH).
  std::vector<wire::Packet> retransmit(TimePoint now, std::chrono::milliseconds timeout) {
    std::vector<wire::Packet> out;
    for (auto& [id, o] : outbound_) {
      if (now - o.last_sent < timeout) continue;
      o.last_sent = now;
      if (o.stage == Stage::AwaitPubcomp) {
        out.push_back(wire::Pubrel{id});
      } else {
        wire::Publish again = o.publish;
        again.dup = true;
        out.push_back(std::move(again));
      }
    }
    return out;
  }

  // After a reconnect with a clean session nothing in flight survives.
  void reset() {
    outbound_.clear();
    inbound_qos2_.clear();
  }

  std::size_t inflight() const noexcept { return outbound_.size(); }
  // Inbound QoS 2 ids still waiting for PUBREL.
  std::size_t pending_releases() const noexcept { return inbound_qos2_.size(); }
  bool is_inflight(std::uint16_t id) const { return outbound_.contains(id); }
  const ClientOptions& options() const noexcept { return options_; }

 private:
  enum class Stage { AwaitPuback, AwaitPubrec, AwaitPubcomp };
  struct Outbound {
    Stage stage;
    wire::Publish publish;
    TimePoint last_sent;
  };

  void on_publish(const wire::Publish& p, std::vector<wire::Packet>& replies, std::vector<Event>& events) {
    switch (p.qos) {
      case QosLevel::AtMostOnce:
        events.push_back(MessageReceived{p.topic, p.payload, p.qos});
        break;
      case QosLevel::AtLeastOnce:
        events.push_back(MessageReceived{p.topic, p.payload, p.qos});
        replies.push_back(wire::Puback{*p.packet_id});
        break;
      case QosLevel::ExactlyOnce:
        if (inbound_qos2_.insert(*p.packet_id).second) events.push_back(MessageReceived{p.topic, p.payload, p.qos});
        replies.push_back(wire::Pubrec{*p.packet_id});
        break;
    }
  }

  // Never hands out an id still in flight.
  std::uint16_t allocate_id() {
    while (true) {
      const std::uint16_t id = next_id_;
      next_id_ = id == 0xFFFF ? 1 : static_cast<std::uint16_t>(id + 1);
      if (!outbound_.contains(id)) return id;
    }
  }

  ClientOptions options_;
  std::map<std::uint16_t, Outbound> outbound_;
  std::set<std::uint16_t> inbound_qos2_;
  std::uint16_t next_id_ = 1;
};

}  // namespace busgw::client
