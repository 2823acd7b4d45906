#pragma once

// TCP transport for the broker core and for client sessions (Boost.Asio).

#include <chrono>
#include <cstdint>
#include <ctime>
#include <deque>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <boost/asio.hpp>

#include "busgw/broker.hpp"
#include "busgw/client.hpp"
#include "busgw/wire.hpp"

namespace busgw::net {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 1883;

  // "host:port", or a bare port.
  static Endpoint parse(std::string_view text) {
    Endpoint ep;
    const auto colon = text.rfind(':');
    std::string_view port = text;
    if (colon != std::string_view::npos) {
      ep.host = std::string(text.substr(0, colon));
      port = text.substr(colon + 1);
    }
    if (ep.host.empty()) ep.host = "0.0.0.0";
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(std::string(port), &used);
      if (used != port.size() || v > 65535) throw std::invalid_argument("range");
      ep.port = static_cast<std::uint16_t>(v);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad endpoint '" + std::string(text) + "', expected addr:port");
    }
    return ep;
  }

  std::string str() const { return host + ":" + std::to_string(port); }

  tcp::endpoint resolve() const { return {asio::ip::make_address(host), port}; }
};

// Splits a byte stream into packets.
class FrameReader {
 public:
  explicit FrameReader(wire::DecodeLimits limits = {}) : limits_(limits) {}

  // Calls on_packet for each complete packet; returns false on a malformed
  // frame (error() says why) after which the stream is unusable.
  template <typename F>
  bool feed(std::span<const std::uint8_t> data, F&& on_packet) {
    buf_.insert(buf_.end(), data.begin(), data.end());
    std::size_t pos = 0;
    bool ok = true;
    while (pos < buf_.size()) {
      auto r = wire::decode_packet(std::span<const std::uint8_t>(buf_).subspan(pos), limits_);
      if (r.status == wire::DecodeStatus::NeedMore) break;
      if (r.status == wire::DecodeStatus::Malformed) {
        error_ = r.error;
        ok = false;
        break;
      }
      pos += r.consumed;
      if (!on_packet(std::move(r.packet), r.consumed)) break;
    }
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos));
    return ok;
  }

  const std::string& error() const noexcept { return error_; }

 private:
  wire::DecodeLimits limits_;
  wire::Bytes buf_;
  std::string error_;
};

// ---------------------------------------------------------------------------
// Server

struct ServerOptions {
  Endpoint listen{"0.0.0.0", 1883};
  broker::BrokerConfig broker;
  bool deterministic = false;  // one thread, no strands
  unsigned threads = 0;        // 0: hardware concurrency (ignored when deterministic)
  std::string metrics_csv;
  std::chrono::milliseconds tick_interval{1000};
  std::size_t high_watermark = 1u << 20;  // bytes queued on a socket before the core stops feeding it
  wire::DecodeLimits limits;
};

inline constexpr const char* kMetricsCsvHeader = "unix_ts,messages_in,messages_out,bytes_in,bytes_out,active_sessions";

class BrokerServer {
 public:
  explicit BrokerServer(ServerOptions options)
      : options_(std::move(options)), core_(options_.broker), acceptor_(ioc_), tick_timer_(ioc_) {
    const tcp::endpoint ep = options_.listen.resolve();
    acceptor_.open(ep.protocol());
    acceptor_.set_option(asio::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen(asio::socket_base::max_listen_connections);
    if (!options_.metrics_csv.empty()) {
      const bool fresh = !std::ifstream(options_.metrics_csv).good() ||
                         std::ifstream(options_.metrics_csv, std::ios::ate).tellg() == 0;
      metrics_out_.open(options_.metrics_csv, std::ios::app);
      if (!metrics_out_) throw std::runtime_error("cannot open metrics csv " + options_.metrics_csv);
      if (fresh) metrics_out_ << kMetricsCsvHeader << '\n' << std::flush;
    }
  }

  BrokerServer(const BrokerServer&) = delete;
  BrokerServer& operator=(const BrokerServer&) = delete;

  std::uint16_t port() const { return acceptor_.local_endpoint().port(); }

  // Blocks until stop().
  void run() {
    accept();
    schedule_tick();
    unsigned n = options_.deterministic ? 1 : options_.threads;
    if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
    std::vector<std::thread> extra;
    for (unsigned i = 1; i < n; ++i) extra.emplace_back([this] { ioc_.run(); });
    ioc_.run();
    for (auto& t : extra) t.join();
  }

  void stop() {
    asio::post(ioc_, [this] {
      boost::system::error_code ec;
      acceptor_.close(ec);
      tick_timer_.cancel();
      write_metrics_row();
      std::vector<std::shared_ptr<Conn>> all;
      {
        std::lock_guard lock(mutex_);
        for (auto& [_, c] : conns_) all.push_back(c);
      }
      for (auto& c : all) asio::post(c->exec, [c] { c->shutdown(); });
      asio::post(ioc_, [this] { ioc_.stop(); });
    });
  }

  broker::MetricsSnapshot metrics() const { return core_.metrics().snapshot(); }

  // Runs `f` with exclusive access to the broker core.
  template <typename F>
  auto with_core(F&& f) {
    std::lock_guard lock(mutex_);
    return f(core_);
  }

 private:
  struct Conn : std::enable_shared_from_this<Conn> {
    Conn(BrokerServer& s, broker::ConnectionId i, tcp::socket sock, asio::any_io_executor e)
        : server(s), id(i), socket(std::move(sock)), exec(std::move(e)), reader(s.options_.limits) {}

    BrokerServer& server;
    broker::ConnectionId id;
    tcp::socket socket;
    asio::any_io_executor exec;
    FrameReader reader;
    std::array<std::uint8_t, 16 * 1024> rbuf{};
    std::deque<wire::Bytes> wqueue;
    std::size_t pending = 0;
    bool writing = false;
    bool congested = false;
    bool closing = false;
    bool closed = false;

    void start() { read(); }

    void read() {
      socket.async_read_some(asio::buffer(rbuf), asio::bind_executor(exec, [self = shared_from_this()](
                                                                              boost::system::error_code ec, std::size_t n) {
                               self->on_read(ec, n);
                             }));
    }

    void on_read(boost::system::error_code ec, std::size_t n) {
      if (ec || closing) {
        finish();
        return;
      }
      server.core_.metrics().add_bytes_in(n);
      const bool ok = reader.feed(std::span<const std::uint8_t>(rbuf.data(), n), [&](wire::Packet p, std::size_t) {
        server.handle(id, p);
        return !closing;
      });
      if (!ok && !closing) {
        server.close_from_io(id, "malformed packet: " + reader.error());
        return;
      }
      if (!closing) read();
    }

    void enqueue(wire::Bytes bytes) {
      if (closed || closing) return;
      pending += bytes.size();
      wqueue.push_back(std::move(bytes));
      if (!congested && pending > server.options_.high_watermark) {
        congested = true;
        server.set_writable(id, false);
      }
      if (!writing) write();
    }

    void write() {
      if (wqueue.empty()) {
        writing = false;
        if (closing) shutdown();
        return;
      }
      writing = true;
      // Coalesce queued frames into one write.
      if (wqueue.size() > 1) {
        wire::Bytes joined;
        for (auto& b : wqueue) joined.insert(joined.end(), b.begin(), b.end());
        wqueue.clear();
        wqueue.push_back(std::move(joined));
      }
      asio::async_write(socket, asio::buffer(wqueue.front()),
                        asio::bind_executor(exec, [self = shared_from_this()](boost::system::error_code ec, std::size_t n) {
                          self->on_write(ec, n);
                        }));
    }

    void on_write(boost::system::error_code ec, std::size_t n) {
      if (ec) {
        writing = false;
        wqueue.clear();
        shutdown();
        return;
      }
      server.core_.metrics().add_bytes_out(n);
      pending -= wqueue.front().size();
      wqueue.pop_front();
      if (congested && pending < server.options_.high_watermark / 2) {
        congested = false;
        server.set_writable(id, true);
      }
      write();
    }

    void close_after_flush() {
      closing = true;
      if (!writing) shutdown();
    }

    void shutdown() {
      if (closed) return;
      closed = true;
      boost::system::error_code ec;
      socket.shutdown(tcp::socket::shutdown_both, ec);
      socket.close(ec);
      finish();
    }

    void finish() {
      if (!closed) {
        closed = true;
        boost::system::error_code ec;
        socket.close(ec);
      }
      server.forget(id);
    }
  };

  void accept() {
    acceptor_.async_accept([this](boost::system::error_code ec, tcp::socket socket) {
      if (ec) {
        if (ec == asio::error::operation_aborted) return;
      } else {
        boost::system::error_code ignore;
        socket.set_option(tcp::no_delay(true), ignore);
        asio::any_io_executor exec = options_.deterministic ? asio::any_io_executor(ioc_.get_executor())
                                                            : asio::any_io_executor(asio::make_strand(ioc_));
        std::shared_ptr<Conn> conn;
        {
          std::lock_guard lock(mutex_);
          const broker::ConnectionId id = next_conn_++;
          conn = std::make_shared<Conn>(*this, id, std::move(socket), exec);
          conns_.emplace(id, conn);
          core_.on_open(id, broker::Clock::now());
        }
        asio::dispatch(conn->exec, [conn] { conn->start(); });
      }
      if (acceptor_.is_open()) accept();
    });
  }

  void handle(broker::ConnectionId id, const wire::Packet& p) {
    std::lock_guard lock(mutex_);
    execute(core_.handle(id, p, broker::Clock::now()));
  }

  void set_writable(broker::ConnectionId id, bool writable) {
    std::lock_guard lock(mutex_);
    execute(core_.set_writable(id, writable, broker::Clock::now()));
  }

  void close_from_io(broker::ConnectionId id, const std::string& why) {
    if (options_.broker.log) options_.broker.log("closing connection " + std::to_string(id) + ": " + why);
    std::lock_guard lock(mutex_);
    core_.on_close(id);
    if (auto it = conns_.find(id); it != conns_.end()) {
      auto c = it->second;
      asio::post(c->exec, [c] { c->close_after_flush(); });
    }
  }

  void forget(broker::ConnectionId id) {
    std::lock_guard lock(mutex_);
    core_.on_close(id);
    conns_.erase(id);
  }

  // Caller holds mutex_. Posting (never dispatching inline) under the lock
  // keeps per-connection output in the order the core produced it.
  void execute(broker::Actions actions) {
    for (auto& a : actions) {
      auto it = conns_.find(a.connection);
      if (it == conns_.end()) continue;
      auto c = it->second;
      if (a.kind == broker::Action::Kind::Send) {
        wire::Bytes bytes = wire::encode_packet(a.packet);
        asio::post(c->exec, [c, b = std::move(bytes)]() mutable { c->enqueue(std::move(b)); });
      } else {
        if (options_.broker.log && a.reason != "client disconnect") {
          options_.broker.log("closing connection " + std::to_string(a.connection) + ": " + a.reason);
        }
        asio::post(c->exec, [c] { c->close_after_flush(); });
      }
    }
  }

  void schedule_tick() {
    tick_timer_.expires_after(options_.tick_interval);
    tick_timer_.async_wait([this](boost::system::error_code ec) {
      if (ec) return;
      {
        std::lock_guard lock(mutex_);
        execute(core_.tick(broker::Clock::now()));
      }
      write_metrics_row();
      schedule_tick();
    });
  }

  void write_metrics_row() {
    if (!metrics_out_.is_open()) return;
    const auto m = core_.metrics().snapshot();
    metrics_out_ << std::time(nullptr) << ',' << m.messages_in << ',' << m.messages_out << ',' << m.bytes_in << ','
                 << m.bytes_out << ',' << m.active_sessions << '\n'
                 << std::flush;
  }

  ServerOptions options_;
  broker::Broker core_;
  asio::io_context ioc_;
  tcp::acceptor acceptor_;
  asio::steady_timer tick_timer_;
  std::mutex mutex_;
  std::unordered_map<broker::ConnectionId, std::shared_ptr<Conn>> conns_;
  broker::ConnectionId next_conn_ = 1;
  std::ofstream metrics_out_;
};

// ---------------------------------------------------------------------------
// Client connection. Not thread-safe: every call must run on the thread
// driving the io_context.

class MqttConnection : public std::enable_shared_from_this<MqttConnection> {
 public:
  struct Handlers {
    std::function<void(std::uint8_t)> on_connack;
    std::function<void(client::MessageReceived&)> on_message;
    std::function<void(const client::PublishCompleted&)> on_complete;
    std::function<void(const client::Subacked&)> on_suback;
    std::function<void(const std::string&)> on_close;
  };

  static std::shared_ptr<MqttConnection> create(asio::io_context& ioc, client::ClientOptions options,
                                                Handlers handlers) {
    return std::shared_ptr<MqttConnection>(new MqttConnection(ioc, std::move(options), std::move(handlers)));
  }

  // Connects and sends CONNECT; packets queued before the socket is up are
  // flushed right after it.
  void start(const tcp::endpoint& ep) {
    closed_ = false;
    connected_ = false;
    socket_ = tcp::socket(ioc_);
    reader_ = FrameReader{};
    session_.reset();
    wqueue_.push_front(wire::encode_packet(session_.connect_packet()));
    socket_.async_connect(ep, [self = shared_from_this()](boost::system::error_code ec) {
      if (ec) {
        self->fail(ec.message(), ec == asio::error::connection_refused);
        return;
      }
      boost::system::error_code ignore;
      self->socket_.set_option(tcp::no_delay(true), ignore);
      self->socket_up_ = true;
      self->read();
      self->write();
      self->schedule_timer();
    });
  }

  std::optional<std::uint16_t> publish(std::string topic, wire::Bytes payload, wire::QosLevel qos) {
    wire::Publish p = session_.publish(std::move(topic), std::move(payload), qos, client::Clock::now());
    auto id = p.packet_id;
    send(p);
    return id;
  }

  void subscribe(std::vector<wire::Subscription> subs) { send(session_.subscribe(std::move(subs))); }

  // Sends DISCONNECT and closes once the queue drains.
  void disconnect() {
    if (closed_) return;
    send(wire::Disconnect{});
    closing_ = true;
    if (!writing_ && socket_up_) close("disconnect");
  }

  void abort() { close("aborted"); }

  bool connected() const noexcept { return connected_; }
  bool closed() const noexcept { return closed_; }
  bool refused() const noexcept { return refused_; }
  const client::ClientSession& session() const noexcept { return session_; }

  // Optional hook seeing every inbound packet, e.g. for counting.
  std::function<void(const wire::Packet&)> inbound_tap;

 private:
  MqttConnection(asio::io_context& ioc, client::ClientOptions options, Handlers handlers)
      : ioc_(ioc), socket_(ioc), timer_(ioc), session_(std::move(options)), handlers_(std::move(handlers)) {}

  void send(const wire::Packet& p) {
    if (closed_) return;
    wqueue_.push_back(wire::encode_packet(p));
    if (socket_up_ && !writing_) write();
  }

  void read() {
    socket_.async_read_some(asio::buffer(rbuf_), [self = shared_from_this()](boost::system::error_code ec, std::size_t n) {
      if (ec) {
        self->close(ec == asio::error::eof ? "broker closed the connection" : ec.message());
        return;
      }
      std::vector<wire::Packet> replies;
      const bool ok = self->reader_.feed(std::span<const std::uint8_t>(self->rbuf_.data(), n), [&](wire::Packet p, std::size_t) {
        if (self->inbound_tap) self->inbound_tap(p);
        for (auto& ev : self->session_.handle(p, replies)) self->dispatch(ev);
        return !self->closed_;
      });
      for (const auto& r : replies) self->send(r);
      if (!ok) {
        self->close("malformed packet from broker: " + self->reader_.error());
        return;
      }
      if (!self->closed_) self->read();
    });
  }

  void dispatch(client::Event& ev) {
    if (auto* c = std::get_if<client::Connacked>(&ev)) {
      connected_ = c->return_code == wire::kConnackAccepted;
      if (handlers_.on_connack) handlers_.on_connack(c->return_code);
    } else if (auto* m = std::get_if<client::MessageReceived>(&ev)) {
      if (handlers_.on_message) handlers_.on_message(*m);
    } else if (auto* d = std::get_if<client::PublishCompleted>(&ev)) {
      if (handlers_.on_complete) handlers_.on_complete(*d);
    } else if (auto* s = std::get_if<client::Subacked>(&ev)) {
      if (handlers_.on_suback) handlers_.on_suback(*s);
    } else if (auto* v = std::get_if<client::ProtocolViolation>(&ev)) {
      close(v->reason);
    }
  }

  void write() {
    if (wqueue_.empty()) {
      writing_ = false;
      if (closing_) close("disconnect");
      return;
    }
    writing_ = true;
    if (wqueue_.size() > 1) {
      wire::Bytes joined;
      for (auto& b : wqueue_) joined.insert(joined.end(), b.begin(), b.end());
      wqueue_.clear();
      wqueue_.push_back(std::move(joined));
    }
    asio::async_write(socket_, asio::buffer(wqueue_.front()),
                      [self = shared_from_this()](boost::system::error_code ec, std::size_t) {
                        if (ec) {
                          self->writing_ = false;
                          self->close(ec.message());
                          return;
                        }
                        self->wqueue_.pop_front();
                        self->write();
                      });
  }

  void schedule_timer() {
    timer_.expires_after(std::chrono::seconds(1));
    timer_.async_wait([self = shared_from_this()](boost::system::error_code ec) {
      if (ec || self->closed_) return;
      const auto now = client::Clock::now();
      for (const auto& p : self->session_.retransmit(now, std::chrono::seconds(5))) self->send(p);
      const auto keepalive = self->session_.options().keepalive_seconds;
      if (keepalive > 0 && now - self->last_ping_ >= std::chrono::seconds(keepalive) / 2) {
        self->last_ping_ = now;
        self->send(wire::Pingreq{});
      }
      self->schedule_timer();
    });
  }

  void fail(const std::string& why, bool refused) {
    refused_ = refused;
    close(why);
  }

  void close(const std::string& why) {
    if (closed_) return;
    closed_ = true;
    connected_ = false;
    socket_up_ = false;
    closing_ = false;
    wqueue_.clear();
    boost::system::error_code ec;
    socket_.shutdown(tcp::socket::shutdown_both, ec);
    socket_.close(ec);
    timer_.cancel();
    if (handlers_.on_close) handlers_.on_close(why);
  }

  asio::io_context& ioc_;
  tcp::socket socket_;
  asio::steady_timer timer_;
  client::ClientSession session_;
  Handlers handlers_;
  FrameReader reader_;
  std::array<std::uint8_t, 16 * 1024> rbuf_{};
  std::deque<wire::Bytes> wqueue_;
  client::TimePoint last_ping_ = client::Clock::now();
  bool writing_ = false;
  bool socket_up_ = false;
  bool connected_ = false;
  bool closing_ = false;
  bool closed_ = false;
  bool refused_ = false;
};

}  // namespace busgw::net
