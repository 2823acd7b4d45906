#pragma once

// Gateway broker core.
//
// The broker is a transport-free state machine: the network layer feeds it
// decoded packets tagged with a connection id and executes the returned
// actions (send a packet, close a connection). Every call is synchronous and
// deterministic for a given sequence of inputs and timestamps, which is what
// the single-threaded mode and the integration tests rely on.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "busgw/topic.hpp"
#include "busgw/wire.hpp"

namespace busgw::broker {

using Clock = std::chrono::steady_clock;
using TimePoint = Clock::time_point;
using ConnectionId = std::uint64_t;
using wire::QosLevel;

struct BrokerConfig {
  std::size_t max_inflight = 64;
  std::chrono::milliseconds retransmit_timeout{5000};
  unsigned max_retries = 3;
  std::size_t max_queued = 1000;
  std::chrono::milliseconds connect_timeout{10000};
  QosLevel maximum_qos = QosLevel::ExactlyOnce;
  std::function<void(std::string_view)> log;
};

struct Message {
  std::string topic;
  std::shared_ptr<const wire::Bytes> payload;
  QosLevel qos = QosLevel::AtMostOnce;
};

enum class InflightStage { AwaitPuback, AwaitPubrec, AwaitPubcomp };

struct InflightMessage {
  std::uint16_t packet_id = 0;
  InflightStage stage = InflightStage::AwaitPuback;
  Message message;
  TimePoint last_sent{};
  unsigned send_count = 1;
};

struct Session {
  topic::SubscriberId id = 0;
  std::string client_id;
  bool clean_session = true;
  ConnectionId connection = 0;
  std::uint16_t keepalive_seconds = 0;
  std::vector<wire::Subscription> subscriptions;
  std::map<std::uint16_t, InflightMessage> inflight_outbound;
  std::set<std::uint16_t> qos2_inbound;
  std::deque<Message> queued;  // waiting for the in-flight window or a writable transport
  std::optional<TimePoint> keepalive_deadline;
  TimePoint connected_at{};
  std::uint16_t next_packet_id = 1;
  bool writable = true;
};

struct Action {
  enum class Kind { Send, Close };
  Kind kind = Kind::Send;
  ConnectionId connection = 0;
  wire::Packet packet;
  std::string reason;

  static Action send(ConnectionId c, wire::Packet p) { return {Kind::Send, c, std::move(p), {}}; }
  static Action close(ConnectionId c, std::string why) { return {Kind::Close, c, wire::Disconnect{}, std::move(why)}; }
};

using Actions = std::vector<Action>;

struct MetricsSnapshot {
  std::uint64_t messages_in = 0;
  std::uint64_t messages_out = 0;
  std::uint64_t bytes_in = 0;
  std::uint64_t bytes_out = 0;
  std::uint64_t active_sessions = 0;
  std::array<std::uint64_t, 3> messages_in_by_qos{};
  std::array<std::uint64_t, 3> messages_out_by_qos{};
  std::uint64_t dropped_qos0 = 0;
  std::uint64_t dropped_after_retries = 0;
  std::uint64_t retransmits = 0;
};

// Counters updated from any thread.
class BrokerMetrics {
 public:
  void add_bytes_in(std::uint64_t n) noexcept { bytes_in_.fetch_add(n, std::memory_order_relaxed); }
  void add_bytes_out(std::uint64_t n) noexcept { bytes_out_.fetch_add(n, std::memory_order_relaxed); }
  void message_in(QosLevel q) noexcept {
    messages_in_.fetch_add(1, std::memory_order_relaxed);
    in_by_qos_[wire::to_int(q)].fetch_add(1, std::memory_order_relaxed);
  }
  void message_out(QosLevel q) noexcept {
    messages_out_.fetch_add(1, std::memory_order_relaxed);
    out_by_qos_[wire::to_int(q)].fetch_add(1, std::memory_order_relaxed);
  }
  void session_opened() noexcept { active_sessions_.fetch_add(1, std::memory_order_relaxed); }
  void session_closed() noexcept { active_sessions_.fetch_sub(1, std::memory_order_relaxed); }
  void dropped_qos0() noexcept { dropped_qos0_.fetch_add(1, std::memory_order_relaxed); }
  void dropped_after_retries() noexcept { dropped_retries_.fetch_add(1, std::memory_order_relaxed); }
  void retransmit() noexcept { retransmits_.fetch_add(1, std::memory_order_relaxed); }

  MetricsSnapshot snapshot() const noexcept {
    MetricsSnapshot s;
    s.messages_in = messages_in_.load(std::memory_order_relaxed);
    s.messages_out = messages_out_.load(std::memory_order_relaxed);
    s.bytes_in = bytes_in_.load(std::memory_order_relaxed);
    s.bytes_out = bytes_out_.load(std::memory_order_relaxed);
    s.active_sessions = active_sessions_.load(std::memory_order_relaxed);
    for (std::size_t i = 0; i < 3; ++i) {
      s.messages_in_by_qos[i] = in_by_qos_[i].load(std::memory_order_relaxed);
      s.messages_out_by_qos[i] = out_by_qos_[i].load(std::memory_order_relaxed);
    }
    s.dropped_qos0 = dropped_qos0_.load(std::memory_order_relaxed);
    s.dropped_after_retries = dropped_retries_.load(std::memory_order_relaxed);
    s.retransmits = retransmits_.load(std::memory_order_relaxed);
    return s;
  }

 private:
  std::atomic<std::uint64_t> messages_in_{0}, messages_out_{0}, bytes_in_{0}, bytes_out_{0};
  std::atomic<std::uint64_t> active_sessions_{0};
  std::array<std::atomic<std::uint64_t>, 3> in_by_qos_{}, out_by_qos_{};
  std::atomic<std::uint64_t> dropped_qos0_{0}, dropped_retries_{0}, retransmits_{0};
};

class Broker {
 public:
  explicit Broker(BrokerConfig config = {}) : config_(std::move(config)) {}

  Broker(const Broker&) = delete;
  Broker& operator=(const Broker&) = delete;

  // Registers a freshly accepted transport connection; CONNECT must follow.
  void on_open(ConnectionId conn, TimePoint now) { connections_.try_emplace(conn, ConnState{std::nullopt, now}); }

  // Transport went away (EOF, error, or after a Close action was executed).
  void on_close(ConnectionId conn) {
    auto it = connections_.find(conn);
    if (it == connections_.end()) return;
    if (it->second.session) teardown(*it->second.session);
    connections_.erase(conn);
  }

  // Entry point for every decoded inbound packet.
  Actions handle(ConnectionId conn, const wire::Packet& packet, TimePoint now) {
    Actions out;
    auto it = connections_.find(conn);
    if (it == connections_.end()) it = connections_.emplace(conn, ConnState{std::nullopt, now}).first;

    if (!it->second.session) {
      if (const auto* c = std::get_if<wire::Connect>(&packet)) return handle_connect(conn, *c, now);
      close(conn, "packet before CONNECT", out);
      return out;
    }
    Session& s = sessions_.at(*it->second.session);
    refresh_keepalive(s, now);

    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, wire::Publish>) {
            out = publish_inbound(s, p, now);
          } else if constexpr (std::is_same_v<T, wire::Puback> || std::is_same_v<T, wire::Pubrec> ||
                               std::is_same_v<T, wire::Pubrel> || std::is_same_v<T, wire::Pubcomp>) {
            out = handle_ack(s, packet, now);
          } else if constexpr (std::is_same_v<T, wire::Subscribe>) {
            out = subscribe(s, p);
          } else if constexpr (std::is_same_v<T, wire::Unsubscribe>) {
            out = unsubscribe(s, p);
          } else if constexpr (std::is_same_v<T, wire::Pingreq>) {
            out.push_back(Action::send(conn, wire::Pingresp{}));
          } else if constexpr (std::is_same_v<T, wire::Disconnect>) {
            close(conn, "client disconnect", out);
          } else if constexpr (std::is_same_v<T, wire::Connect>) {
            close(conn, "second CONNECT on one connection", out);
          } else {
            close(conn, std::string("unexpected ") + wire::to_string(wire::packet_type(packet)) + " from client",
                  out);
          }
        },
        packet);
    return out;
  }

  Actions handle_connect(ConnectionId conn, const wire::Connect& c, TimePoint now) {
    Actions out;
    connections_.try_emplace(conn, ConnState{std::nullopt, now});
    if (c.protocol_name != "MQTT" || c.protocol_level != wire::kProtocolLevel311) {
      out.push_back(Action::send(conn, wire::Connack{false, wire::kConnackBadProtocol}));
      close(conn, "unsupported protocol level " + std::to_string(c.protocol_level), out);
      return out;
    }
    if (c.client_id.empty() && !c.clean_session) {
      out.push_back(Action::send(conn, wire::Connack{false, wire::kConnackIdentifierRejected}));
      close(conn, "empty client id with clean_session=0", out);
      return out;
    }
    std::string client_id = c.client_id.empty() ? "auto-" + std::to_string(next_session_id_) : c.client_id;
    if (!c.clean_session) log("client '" + client_id + "' requested a persistent session; treating it as clean");

    if (auto prev = by_client_.find(client_id); prev != by_client_.end()) {
      const ConnectionId old_conn = sessions_.at(prev->second).connection;
      log("session takeover for '" + client_id + "'");
      close(old_conn, "session taken over", out);
    }

    const topic::SubscriberId id = next_session_id_++;
    Session& s = sessions_[id];
    s.id = id;
    s.client_id = client_id;
    s.clean_session = true;
    s.connection = conn;
    s.keepalive_seconds = c.keepalive_seconds;
    s.connected_at = now;
    refresh_keepalive(s, now);
    by_client_[client_id] = id;
    connections_[conn].session = id;
    metrics_.session_opened();
    out.push_back(Action::send(conn, wire::Connack{false, wire::kConnackAccepted}));
    return out;
  }

  Actions subscribe(Session& s, const wire::Subscribe& pkt) {
    Actions out;
    if (pkt.subscriptions.empty()) {
      close(s.connection, "SUBSCRIBE without topic filters", out);
      return out;
    }
    wire::Suback ack{pkt.packet_id, {}};
    for (const auto& sub : pkt.subscriptions) {
      const QosLevel granted = wire::min_qos(sub.qos, config_.maximum_qos);
      if (!tree_.subscribe(sub.filter, s.id, granted)) {
        ack.return_codes.push_back(wire::kSubackFailure);
        continue;
      }
      auto existing = std::find_if(s.subscriptions.begin(), s.subscriptions.end(),
                                   [&](const wire::Subscription& x) { return x.filter == sub.filter; });
      if (existing != s.subscriptions.end()) {
        existing->qos = granted;
      } else {
        s.subscriptions.push_back({sub.filter, granted});
      }
      ack.return_codes.push_back(static_cast<std::uint8_t>(wire::to_int(granted)));
    }
    out.push_back(Action::send(s.connection, std::move(ack)));
    return out;
  }

  Actions unsubscribe(Session& s, const wire::Unsubscribe& pkt) {
    Actions out;
    for (const auto& f : pkt.filters) {
      tree_.unsubscribe(f, s.id);
      std::erase_if(s.subscriptions, [&](const wire::Subscription& x) { return x.filter == f; });
    }
    out.push_back(Action::send(s.connection, wire::Unsuback{pkt.packet_id}));
    return out;
  }

  Actions publish_inbound(Session& s, const wire::Publish& pkt, TimePoint now) {
    Actions out;
    if (pkt.qos != QosLevel::AtMostOnce && !pkt.packet_id) {
      close(s.connection, "QoS > 0 PUBLISH without packet id", out);
      return out;
    }
    if (!wire::is_valid_topic_name(pkt.topic)) {
      close(s.connection, "invalid PUBLISH topic", out);
      return out;
    }
    metrics_.message_in(pkt.qos);
    const ConnectionId publisher = s.connection;
    switch (pkt.qos) {
      case QosLevel::AtMostOnce:
        route(pkt, now, out);
        break;
      case QosLevel::AtLeastOnce:
        route(pkt, now, out);
        out.push_back(Action::send(publisher, wire::Puback{*pkt.packet_id}));
        break;
      case QosLevel::ExactlyOnce:
        if (s.qos2_inbound.insert(*pkt.packet_id).second) route(pkt, now, out);
        out.push_back(Action::send(publisher, wire::Pubrec{*pkt.packet_id}));
        break;
    }
    return out;
  }

  // Releases an inbound QoS 2 id. Always answers, even for ids never seen.
  Actions qos2_release(Session& s, const wire::Pubrel& pkt) {
    s.qos2_inbound.erase(pkt.packet_id);
    return {Action::send(s.connection, wire::Pubcomp{pkt.packet_id})};
  }

  // Acknowledgements for the outbound in-flight window (and PUBREL, which
  // belongs to the inbound QoS 2 flow).
  Actions handle_ack(Session& s, const wire::Packet& pkt, TimePoint now) {
    Actions out;
    if (const auto* rel = std::get_if<wire::Pubrel>(&pkt)) return qos2_release(s, *rel);

    auto ignore = [&](std::uint16_t id) {
      log(std::string("ignoring ") + wire::to_string(wire::packet_type(pkt)) + " for unknown packet id " +
          std::to_string(id) + " from '" + s.client_id + "'");
    };
    if (const auto* a = std::get_if<wire::Puback>(&pkt)) {
      auto it = s.inflight_outbound.find(a->packet_id);
      if (it == s.inflight_outbound.end() || it->second.stage != InflightStage::AwaitPuback) {
        ignore(a->packet_id);
        return out;
      }
      s.inflight_outbound.erase(it);
      drain(s, now, out);
    } else if (const auto* r = std::get_if<wire::Pubrec>(&pkt)) {
      auto it = s.inflight_outbound.find(r->packet_id);
      if (it == s.inflight_outbound.end() || it->second.stage == InflightStage::AwaitPuback) {
        ignore(r->packet_id);
        return out;
      }
      if (it->second.stage == InflightStage::AwaitPubrec) {
        it->second.stage = InflightStage::AwaitPubcomp;
        it->second.last_sent = now;
        it->second.send_count = 1;
      }
      out.push_back(Action::send(s.connection, wire::Pubrel{r->packet_id}));
    } else if (const auto* c = std::get_if<wire::Pubcomp>(&pkt)) {
      auto it = s.inflight_outbound.find(c->packet_id);
      if (it == s.inflight_outbound.end() || it->second.stage != InflightStage::AwaitPubcomp) {
        ignore(c->packet_id);
        return out;
      }
      s.inflight_outbound.erase(it);
      drain(s, now, out);
    }
    return out;
  }

  // Periodic housekeeping: connect and keepalive timeouts, retransmission.
  Actions tick(TimePoint now) {
    Actions out;
    std::vector<ConnectionId> stale;
    for (const auto& [conn, state] : connections_) {
      if (!state.session && now - state.opened >= config_.connect_timeout) stale.push_back(conn);
    }
    for (auto conn : stale) close(conn, "no CONNECT within timeout", out);

    std::vector<ConnectionId> expired;
    for (const auto& [id, s] : sessions_) {
      if (s.keepalive_deadline && now > *s.keepalive_deadline) expired.push_back(s.connection);
    }
    for (auto conn : expired) close(conn, "keepalive timeout", out);

    for (auto& [id, s] : sessions_) {
      bool freed = false;
      for (auto it = s.inflight_outbound.begin(); it != s.inflight_outbound.end();) {
        InflightMessage& m = it->second;
        if (now - m.last_sent < config_.retransmit_timeout) {
          ++it;
          continue;
        }
        if (m.send_count > config_.max_retries) {
          log("dropping packet id " + std::to_string(m.packet_id) + " to '" + s.client_id + "' after " +
              std::to_string(m.send_count) + " sends");
          metrics_.dropped_after_retries();
          it = s.inflight_outbound.erase(it);
          freed = true;
          continue;
        }
        ++m.send_count;
        m.last_sent = now;
        metrics_.retransmit();
        if (m.stage == InflightStage::AwaitPubcomp) {
          out.push_back(Action::send(s.connection, wire::Pubrel{m.packet_id}));
        } else {
          out.push_back(Action::send(s.connection, to_publish(m.message, m.packet_id, true)));
        }
        ++it;
      }
      if (freed) drain(s, now, out);
    }
    return out;
  }

  // Transport back-pressure: while a connection is not writable, deliveries
  // accumulate in the session queue.
  Actions set_writable(ConnectionId conn, bool writable, TimePoint now) {
    Actions out;
    Session* s = session_for(conn);
    if (s == nullptr) return out;
    s->writable = writable;
    if (writable) drain(*s, now, out);
    return out;
  }

  const Session* find_session(std::string_view client_id) const {
    auto it = by_client_.find(std::string(client_id));
    return it == by_client_.end() ? nullptr : &sessions_.at(it->second);
  }

  Session* session_for(ConnectionId conn) {
    auto it = connections_.find(conn);
    if (it == connections_.end() || !it->second.session) return nullptr;
    return &sessions_.at(*it->second.session);
  }

  std::size_t session_count() const noexcept { return sessions_.size(); }
  std::size_t connection_count() const noexcept { return connections_.size(); }
  const topic::TopicTree& tree() const noexcept { return tree_; }
  BrokerMetrics& metrics() noexcept { return metrics_; }
  const BrokerMetrics& metrics() const noexcept { return metrics_; }
  const BrokerConfig& config() const noexcept { return config_; }

 private:
  struct ConnState {
    std::optional<topic::SubscriberId> session;
    TimePoint opened{};
  };

  void log(const std::string& line) const {
    if (config_.log) config_.log(line);
  }

  void refresh_keepalive(Session& s, TimePoint now) const {
    if (s.keepalive_seconds == 0) {
      s.keepalive_deadline.reset();
      return;
    }
    s.keepalive_deadline = now + std::chrono::milliseconds(std::uint64_t{s.keepalive_seconds} * 1500);
  }

  // Emits a Close action and forgets everything tied to the connection, so
  // later events for it are ignored.
  void close(ConnectionId conn, std::string why, Actions& out) {
    out.push_back(Action::close(conn, std::move(why)));
    on_close(conn);
  }

  void teardown(topic::SubscriberId id) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) return;
    for (const auto& sub : it->second.subscriptions) tree_.unsubscribe(sub.filter, id);
    if (auto c = by_client_.find(it->second.client_id); c != by_client_.end() && c->second == id) by_client_.erase(c);
    if (auto conn = connections_.find(it->second.connection); conn != connections_.end()) conn->second.session.reset();
    sessions_.erase(it);
    metrics_.session_closed();
  }

  void route(const wire::Publish& pkt, TimePoint now, Actions& out) {
    const auto matches = tree_.match(pkt.topic);
    if (matches.empty()) return;
    auto payload = std::make_shared<const wire::Bytes>(pkt.payload);
    // Deterministic fan-out order regardless of hash layout.
    std::vector<std::pair<topic::SubscriberId, QosLevel>> ordered(matches.begin(), matches.end());
    std::sort(ordered.begin(), ordered.end());
    for (const auto& [id, granted] : ordered) {
      auto it = sessions_.find(id);
      if (it == sessions_.end()) continue;
      deliver(it->second, Message{pkt.topic, payload, wire::min_qos(pkt.qos, granted)}, now, out);
    }
  }

  void deliver(Session& s, Message msg, TimePoint now, Actions& out) {
    s.queued.push_back(std::move(msg));
    if (s.queued.size() > config_.max_queued) {
      auto victim = std::find_if(s.queued.begin(), s.queued.end(),
                                 [](const Message& m) { return m.qos == QosLevel::AtMostOnce; });
      if (victim != s.queued.end()) {
        s.queued.erase(victim);
        metrics_.dropped_qos0();
      }
    }
    drain(s, now, out);
  }

  void drain(Session& s, TimePoint now, Actions& out) {
    while (s.writable && !s.queued.empty()) {
      Message& front = s.queued.front();
      const QosLevel qos = front.qos;
      if (qos == QosLevel::AtMostOnce) {
        out.push_back(Action::send(s.connection, to_publish(front, std::nullopt, false)));
      } else {
        if (s.inflight_outbound.size() >= config_.max_inflight) return;
        const std::uint16_t id = allocate_id(s);
        const auto stage = qos == QosLevel::AtLeastOnce ? InflightStage::AwaitPuback : InflightStage::AwaitPubrec;
        out.push_back(Action::send(s.connection, to_publish(front, id, false)));
        s.inflight_outbound.emplace(id, InflightMessage{id, stage, std::move(front), now, 1});
      }
      metrics_.message_out(qos);
      s.queued.pop_front();
    }
  }

  static std::uint16_t allocate_id(Session& s) {
    while (true) {
      const std::uint16_t id = s.next_packet_id;
      s.next_packet_id = id == 0xFFFF ? 1 : static_cast<std::uint16_t>(id + 1);
      if (!s.inflight_outbound.contains(id)) return id;
    }
  }

  static wire::Publish to_publish(const Message& m, std::optional<std::uint16_t> id, bool dup) {
    wire::Publish p;
    p.topic = m.topic;
    p.qos = m.qos;
    p.dup = dup;
    p.packet_id = id;
    if (m.payload) p.payload = *m.payload;
    return p;
  }

  BrokerConfig config_;
  BrokerMetrics metrics_;
  topic::TopicTree tree_;
  std::unordered_map<ConnectionId, ConnState> connections_;
  std::unordered_map<topic::SubscriberId, Session> sessions_;
  std::unordered_map<std::string, topic::SubscriberId> by_client_;
  topic::SubscriberId next_session_id_ = 1;
};

}  // namespace busgw::broker
