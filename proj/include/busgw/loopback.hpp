#pragma once

// In-process, single-threaded network between client sessions and the broker
// core. Every packet is encoded to bytes, recorded, and decoded on the other
// side, so the wire codec is on the path. Time only moves via advance().

#include <chrono>
#include <cstdint>
#include <deque>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "busgw/broker.hpp"
#include "busgw/client.hpp"
#include "busgw/wire.hpp"

namespace busgw::loopback {

using Handle = broker::ConnectionId;

enum class Direction { ToBroker, ToClient };

struct Frame {
  Handle conn = 0;
  Direction dir = Direction::ToBroker;
  wire::Bytes bytes;
};

class Loopback {
 public:
  explicit Loopback(broker::BrokerConfig config = {}, broker::TimePoint start = broker::TimePoint{})
      : broker_(std::move(config)), now_(start) {}

  Handle open(client::ClientOptions options) {
    const Handle h = next_++;
    clients_.emplace(h, Client{client::ClientSession(std::move(options)), {}});
    broker_.on_open(h, now_);
    send(h, clients_.at(h).session.connect_packet());
    pump();
    return h;
  }

  std::optional<std::uint16_t> publish(Handle h, std::string topic, wire::Bytes payload, wire::QosLevel qos) {
    auto p = client(h).session.publish(std::move(topic), std::move(payload), qos, now_);
    auto id = p.packet_id;
    send(h, p);
    return id;
  }

  void subscribe(Handle h, std::vector<wire::Subscription> subs) { send(h, client(h).session.subscribe(std::move(subs))); }

  // Client-to-broker packet outside the session's bookkeeping.
  void send_raw(Handle h, const wire::Packet& p) { send(h, p); }

  void disconnect(Handle h) {
    send(h, wire::Disconnect{});
    pump();
  }

  // When disabled, the client swallows inbound packets without replying.
  void set_auto_reply(Handle h, bool on) { client(h).auto_reply = on; }

  void pump() {
    while (!queue_.empty()) {
      Frame f = std::move(queue_.front());
      queue_.pop_front();
      capture_.push_back(f);
      if (f.dir == Direction::ToBroker) {
        deliver_to_broker(f);
      } else {
        deliver_to_client(f);
      }
    }
  }

  // Moves the clock, runs broker housekeeping and client retransmission.
  void advance(std::chrono::milliseconds d, std::chrono::milliseconds client_retransmit = std::chrono::seconds(5)) {
    now_ += d;
    execute(broker_.tick(now_));
    for (auto& [h, c] : clients_) {
      if (!c.open || !c.auto_reply) continue;
      for (const auto& p : c.session.retransmit(now_, client_retransmit)) send(h, p);
    }
    pump();
  }

  std::vector<client::Event> take_events(Handle h) { return std::exchange(client(h).events, {}); }

  std::vector<client::MessageReceived> take_messages(Handle h) {
    std::vector<client::MessageReceived> out;
    auto& events = client(h).events;
    std::vector<client::Event> rest;
    for (auto& e : events) {
      if (auto* m = std::get_if<client::MessageReceived>(&e)) {
        out.push_back(std::move(*m));
      } else {
        rest.push_back(std::move(e));
      }
    }
    events = std::move(rest);
    return out;
  }

  bool is_open(Handle h) const { return clients_.at(h).open; }
  const client::ClientSession& session(Handle h) const { return clients_.at(h).session; }
  const std::vector<Frame>& capture() const noexcept { return capture_; }
  void clear_capture() { capture_.clear(); }
  broker::Broker& broker() noexcept { return broker_; }
  broker::TimePoint now() const noexcept { return now_; }

 private:
  struct Client {
    client::ClientSession session;
    std::vector<client::Event> events;
    bool open = true;
    bool auto_reply = true;
  };

  Client& client(Handle h) {
    auto it = clients_.find(h);
    if (it == clients_.end()) throw std::out_of_range("unknown loopback handle");
    return it->second;
  }

  void send(Handle h, const wire::Packet& p) {
    if (!client(h).open) return;
    queue_.push_back({h, Direction::ToBroker, wire::encode_packet(p)});
  }

  void execute(const broker::Actions& actions) {
    for (const auto& a : actions) {
      auto it = clients_.find(a.connection);
      if (it == clients_.end() || !it->second.open) continue;
      if (a.kind == broker::Action::Kind::Send) {
        queue_.push_back({a.connection, Direction::ToClient, wire::encode_packet(a.packet)});
      } else {
        // Close after flushing what is already queued for this connection.
        queue_.push_back({a.connection, Direction::ToClient, {}});
      }
    }
  }

  void deliver_to_broker(const Frame& f) {
    Client& c = client(f.conn);
    if (!c.open) return;
    const auto r = wire::decode_packet(f.bytes);
    if (!r.ok() || r.consumed != f.bytes.size()) {
      c.open = false;
      broker_.on_close(f.conn);
      return;
    }
    execute(broker_.handle(f.conn, r.packet, now_));
  }

  void deliver_to_client(const Frame& f) {
    Client& c = client(f.conn);
    if (!c.open) return;
    if (f.bytes.empty()) {  // close marker
      c.open = false;
      broker_.on_close(f.conn);
      return;
    }
    const auto r = wire::decode_packet(f.bytes);
    if (!r.ok()) throw std::logic_error("broker emitted an undecodable frame: " + r.error);
    std::vector<wire::Packet> replies;
    auto events = c.session.handle(r.packet, replies);
    for (auto& e : events) c.events.push_back(std::move(e));
    if (c.auto_reply) {
      for (const auto& p : replies) send(f.conn, p);
    }
  }

  broker::Broker broker_;
  broker::TimePoint now_;
  std::map<Handle, Client> clients_;
  std::deque<Frame> queue_;
  std::vector<Frame> capture_;
  Handle next_ = 1;
};

}  // namespace busgw::loopback
