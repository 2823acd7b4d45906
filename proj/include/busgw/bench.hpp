#pragma once

// Experiment runner: sweeps one fleet parameter, measures end-to-end latency
// at a subscriber and broker CPU per repetition, then aggregates.

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "busgw/cpu.hpp"
#include "busgw/fleet.hpp"
#include "busgw/net.hpp"
#include "busgw/stats.hpp"
#include "busgw/telemetry.hpp"

extern char** environ;

namespace busgw::bench {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

class BenchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SweepVariable { PayloadSize, BusCount, Qos };

inline const char* to_string(SweepVariable v) noexcept {
  switch (v) {
    case SweepVariable::PayloadSize: return "PayloadSize";
    case SweepVariable::BusCount: return "BusCount";
    case SweepVariable::Qos: return "Qos";
  }
  return "?";
}

inline SweepVariable sweep_variable_from(std::string_view s) {
  if (s == "PayloadSize") return SweepVariable::PayloadSize;
  if (s == "BusCount") return SweepVariable::BusCount;
  if (s == "Qos") return SweepVariable::Qos;
  throw BenchError("unknown sweep variable '" + std::string(s) + "'");
}

// Short column name used in correlation pairs.
inline const char* axis_name(SweepVariable v) noexcept {
  switch (v) {
    case SweepVariable::PayloadSize: return "payload_bytes";
    case SweepVariable::BusCount: return "bus_count";
    case SweepVariable::Qos: return "qos";
  }
  return "?";
}

struct ExperimentSpec {
  std::string name;
  SweepVariable sweep_variable = SweepVariable::PayloadSize;
  std::vector<std::int64_t> sweep_points;
  fleet::FleetConfig fixed;
  std::size_t repetitions = 10;
  double warmup_s = 5.0;
  double measure_s = 10.0;
  double cpu_interval_s = 1.0;
  double drain_s = 5.0;

  void validate() const {
    if (name.empty()) throw BenchError("experiment needs a name");
    if (sweep_points.empty()) throw BenchError(name + ": sweep_points is empty");
    for (std::size_t i = 1; i < sweep_points.size(); ++i) {
      if (sweep_points[i] <= sweep_points[i - 1]) throw BenchError(name + ": sweep_points must be strictly increasing");
    }
    for (auto v : sweep_points) {
      if (sweep_variable == SweepVariable::Qos && (v < 0 || v > 2)) throw BenchError(name + ": QoS points must be 0, 1 or 2");
      if (sweep_variable == SweepVariable::BusCount && v < 1) throw BenchError(name + ": bus counts must be >= 1");
      if (sweep_variable == SweepVariable::PayloadSize && v < 0) throw BenchError(name + ": payload sizes must be >= 0");
    }
    if (repetitions < 2) throw BenchError(name + ": repetitions must be >= 2");
    if (!(warmup_s >= 0.0)) throw BenchError(name + ": warmup_s must be >= 0");
    if (!(cpu_interval_s > 0.0)) throw BenchError(name + ": cpu_interval_s must be positive");
    if (!(measure_s >= cpu_interval_s)) throw BenchError(name + ": measure_s must cover at least one cpu interval");
    if (!(drain_s >= 0.0)) throw BenchError(name + ": drain_s must be >= 0");
    for (auto v : sweep_points) at(v).validate();
  }

  // The fleet configuration for one sweep point.
  fleet::FleetConfig at(std::int64_t value) const {
    fleet::FleetConfig c = fixed;
    switch (sweep_variable) {
      case SweepVariable::PayloadSize: c.payload_pad_bytes = static_cast<std::size_t>(value); break;
      case SweepVariable::BusCount: c.bus_count = static_cast<std::size_t>(value); break;
      case SweepVariable::Qos: c.qos = *wire::qos_from_int(static_cast<int>(value)); break;
    }
    return c;
  }
};

inline json to_json(const ExperimentSpec& s) {
  json routes = json::array();
  for (const auto& r : s.fixed.routes) routes.push_back(geo::to_json(r));
  return json{{"name", s.name},
              {"sweep_variable", to_string(s.sweep_variable)},
              {"sweep_points", s.sweep_points},
              {"repetitions", s.repetitions},
              {"warmup_s", s.warmup_s},
              {"measure_s", s.measure_s},
              {"cpu_interval_s", s.cpu_interval_s},
              {"drain_s", s.drain_s},
              {"fixed",
               {{"bus_count", s.fixed.bus_count},
                {"publish_interval_ms", s.fixed.publish_interval_ms},
                {"qos", wire::to_int(s.fixed.qos)},
                {"payload_bytes", s.fixed.payload_pad_bytes},
                {"speed_mps", s.fixed.speed_mps},
                {"time_scale", s.fixed.time_scale},
                {"routes", routes}}}};
}

inline ExperimentSpec spec_from_json(const json& j) {
  try {
    ExperimentSpec s;
    s.name = j.at("name").get<std::string>();
    s.sweep_variable = sweep_variable_from(j.at("sweep_variable").get<std::string>());
    s.sweep_points = j.at("sweep_points").get<std::vector<std::int64_t>>();
    s.repetitions = j.value("repetitions", s.repetitions);
    s.warmup_s = j.value("warmup_s", s.warmup_s);
    s.measure_s = j.value("measure_s", s.measure_s);
    s.cpu_interval_s = j.value("cpu_interval_s", s.cpu_interval_s);
    s.drain_s = j.value("drain_s", s.drain_s);
    if (j.contains("fixed")) {
      const json& f = j.at("fixed");
      s.fixed.bus_count = f.value("bus_count", s.fixed.bus_count);
      s.fixed.publish_interval_ms = f.value("publish_interval_ms", s.fixed.publish_interval_ms);
      const auto qos = wire::qos_from_int(f.value("qos", 0));
      if (!qos) throw BenchError("bad experiment spec: fixed.qos must be 0, 1 or 2");
      s.fixed.qos = *qos;
      s.fixed.payload_pad_bytes = f.value("payload_bytes", s.fixed.payload_pad_bytes);
      s.fixed.speed_mps = f.value("speed_mps", s.fixed.speed_mps);
      s.fixed.time_scale = f.value("time_scale", s.fixed.time_scale);
      if (f.contains("routes") && !f.at("routes").empty()) {
        s.fixed.routes.clear();
        for (const auto& r : f.at("routes")) s.fixed.routes.push_back(geo::route_from_json(r));
      }
    }
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw BenchError(std::string("bad experiment spec: ") + e.what());
  } catch (const geo::GeoError& e) {
    throw BenchError(std::string("bad experiment spec: ") + e.what());
  }
}

// Shipped presets. Rates are time-scaled so each run fits a desk machine.
inline std::optional<ExperimentSpec> preset(std::string_view name) {
  ExperimentSpec s;
  s.name = std::string(name);
  s.repetitions = 10;
  s.warmup_s = 1.0;
  s.measure_s = 3.0;
  s.cpu_interval_s = 0.5;
  s.drain_s = 5.0;
  s.fixed.publish_interval_ms = 5000;
  if (name == "paper-q1-size") {
    s.sweep_variable = SweepVariable::PayloadSize;
    s.sweep_points = {64, 512, 4096, 16384};
    s.fixed.bus_count = 100;
    s.fixed.time_scale = 25;
  } else if (name == "paper-q2-fleet") {
    s.sweep_variable = SweepVariable::BusCount;
    s.sweep_points = {50, 100, 200, 400};
    s.fixed.time_scale = 10;
  } else if (name == "paper-q3-qos-1000" || name == "paper-q3-qos-100") {
    s.sweep_variable = SweepVariable::Qos;
    s.sweep_points = {0, 2};
    s.fixed.bus_count = name == "paper-q3-qos-1000" ? 1000 : 100;
    s.fixed.time_scale = 5;
  } else {
    return std::nullopt;
  }
  return s;
}

inline std::vector<std::string> preset_names() {
  return {"paper-q1-size", "paper-q2-fleet", "paper-q3-qos-1000", "paper-q3-qos-100"};
}

// A preset name or a path to a JSON spec.
inline ExperimentSpec load_spec(const std::string& name_or_path) {
  if (auto p = preset(name_or_path)) return *p;
  std::ifstream in(name_or_path);
  if (!in) throw BenchError("no preset or readable spec file named '" + name_or_path + "'");
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw BenchError(name_or_path + ": not valid JSON");
  return spec_from_json(j);
}

// ---------------------------------------------------------------------------
// Brokers under test

class BrokerInstance {
 public:
  virtual ~BrokerInstance() = default;
  virtual net::Endpoint endpoint() const = 0;
  virtual const cpu::CpuTarget& cpu_target() const = 0;
  // Set once the broker has died on its own.
  virtual std::optional<std::string> failure() = 0;
  virtual void stop() = 0;
};

using BrokerLauncher = std::function<std::unique_ptr<BrokerInstance>()>;

// Runs `<path> --listen 127.0.0.1:0 --deterministic` and reads the port from
// its "listening on host:port" line.
class ChildBroker : public BrokerInstance {
 public:
  explicit ChildBroker(const std::string& path, std::vector<std::string> extra_args = {}) {
    int fds[2];
    if (pipe2(fds, O_CLOEXEC) != 0) throw BenchError("pipe: " + std::string(std::strerror(errno)));
    std::vector<std::string> args{path, "--listen", "127.0.0.1:0", "--deterministic"};
    for (auto& a : extra_args) args.push_back(std::move(a));
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_adddup2(&fa, fds[1], STDOUT_FILENO);
    const int rc = posix_spawn(&pid_, path.c_str(), &fa, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&fa);
    ::close(fds[1]);
    out_ = fds[0];
    if (rc != 0) {
      ::close(out_);
      throw BenchError("cannot start broker " + path + ": " + std::strerror(rc));
    }
    try {
      const std::string line = read_line(std::chrono::seconds(10));
      const auto at = line.find("listening on ");
      if (at == std::string::npos) throw BenchError("unexpected broker banner '" + line + "'");
      endpoint_ = net::Endpoint::parse(line.substr(at + 13));
      target_.emplace(cpu::CpuTarget::process(pid_));
    } catch (...) {
      stop();
      throw;
    }
  }

  ~ChildBroker() override { stop(); }

  net::Endpoint endpoint() const override { return endpoint_; }
  const cpu::CpuTarget& cpu_target() const override { return *target_; }

  std::optional<std::string> failure() override {
    if (!reaped_) {
      int status = 0;
      if (waitpid(pid_, &status, WNOHANG) == pid_) record_exit(status);
    }
    if (reaped_ && !stopping_) return exit_reason_;
    return std::nullopt;
  }

  void stop() override {
    if (pid_ <= 0) return;
    stopping_ = true;
    if (!reaped_) {
      ::kill(pid_, SIGTERM);
      int status = 0;
      for (int i = 0; i < 300 && !reaped_; ++i) {
        if (waitpid(pid_, &status, WNOHANG) == pid_) {
          record_exit(status);
          break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      if (!reaped_) {
        ::kill(pid_, SIGKILL);
        waitpid(pid_, &status, 0);
        reaped_ = true;
      }
    }
    if (out_ >= 0) ::close(out_);
    out_ = -1;
    pid_ = 0;
  }

  pid_t pid() const noexcept { return pid_; }

 private:
  std::string read_line(std::chrono::milliseconds timeout) {
    std::string line;
    const auto deadline = Clock::now() + timeout;
    while (true) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
      if (left <= 0) throw BenchError("broker did not report its port in time");
      pollfd p{out_, POLLIN, 0};
      if (::poll(&p, 1, static_cast<int>(left)) <= 0) continue;
      char c;
      const ssize_t n = ::read(out_, &c, 1);
      if (n <= 0) throw BenchError("broker exited before reporting its port");
      if (c == '\n') return line;
      line += c;
    }
  }

  void record_exit(int status) {
    reaped_ = true;
    if (WIFSIGNALED(status)) {
      exit_reason_ = "broker killed by signal " + std::to_string(WTERMSIG(status));
    } else {
      exit_reason_ = "broker exited with status " + std::to_string(WEXITSTATUS(status));
    }
  }

  pid_t pid_ = 0;
  int out_ = -1;
  bool reaped_ = false;
  bool stopping_ = false;
  std::string exit_reason_;
  net::Endpoint endpoint_;
  std::optional<cpu::CpuTarget> target_;
};

// Broker on a thread of this process; CPU is that thread's clock.
class InProcessBroker : public BrokerInstance {
 public:
  explicit InProcessBroker(broker::BrokerConfig config = {}) {
    net::ServerOptions o;
    o.listen = {"127.0.0.1", 0};
    o.broker = std::move(config);
    o.deterministic = true;
    server_ = std::make_unique<net::BrokerServer>(std::move(o));
    thread_ = std::thread([this] { server_->run(); });
    target_.emplace(cpu::CpuTarget::thread(thread_.native_handle()));
  }

  ~InProcessBroker() override { stop(); }

  net::Endpoint endpoint() const override { return {"127.0.0.1", server_->port()}; }
  const cpu::CpuTarget& cpu_target() const override { return *target_; }
  std::optional<std::string> failure() override { return std::nullopt; }

  void stop() override {
    if (!thread_.joinable()) return;
    server_->stop();
    thread_.join();
  }

 private:
  std::unique_ptr<net::BrokerServer> server_;
  std::thread thread_;
  std::optional<cpu::CpuTarget> target_;
};

// ---------------------------------------------------------------------------
// Measurement

struct LatencySample {
  double publish_ts_ms = 0.0;
  double deliver_ts_ms = 0.0;
  std::string bus_id;
  std::uint64_t seq = 0;

  double latency_ms() const noexcept { return deliver_ts_ms - publish_ts_ms; }
};

// Subscribes to every bus on its own io thread and timestamps arrivals on the
// same monotonic clock the publishers use.
class MeasuringSubscriber {
 public:
  MeasuringSubscriber(const net::Endpoint& broker, wire::QosLevel qos,
                      std::chrono::milliseconds ready_timeout = std::chrono::seconds(10)) {
    std::promise<void> ready;
    auto ready_future = ready.get_future();
    net::MqttConnection::Handlers h;
    h.on_connack = [this, qos](std::uint8_t rc) {
      if (rc != wire::kConnackAccepted) return;
      conn_->subscribe({{"city/bus/#", qos}});
    };
    h.on_suback = [&ready, this](const client::Subacked&) {
      if (!subscribed_.exchange(true)) ready.set_value();
    };
    h.on_message = [this](client::MessageReceived& m) { on_message(m); };
    h.on_close = [this](const std::string& why) {
      if (!stopping_) error_ = "measuring subscriber disconnected: " + why;
      closed_ = true;
    };
    conn_ = net::MqttConnection::create(ioc_, client::ClientOptions{"bench-subscriber", 60, true}, std::move(h));
    conn_->start(broker.resolve());
    thread_ = std::thread([this] { ioc_.run(); });
    if (ready_future.wait_for(ready_timeout) != std::future_status::ready) {
      stop();
      throw BenchError("measuring subscriber got no SUBACK" + (error_.empty() ? std::string() : ": " + error_));
    }
  }

  ~MeasuringSubscriber() { stop(); }

  std::uint64_t received() const noexcept { return received_.load(); }

  void stop() {
    if (!thread_.joinable()) return;
    stopping_ = true;
    net::asio::post(ioc_, [this] { conn_->disconnect(); });
    std::mutex m;
    std::condition_variable cv;
    bool done = false;
    std::thread guard([&] {
      std::unique_lock lock(m);
      if (!cv.wait_for(lock, std::chrono::seconds(3), [&] { return done; })) ioc_.stop();
    });
    thread_.join();
    ioc_.stop();
    {
      std::lock_guard lock(m);
      done = true;
    }
    cv.notify_one();
    guard.join();
  }

  // Valid after stop().
  std::vector<LatencySample>& samples() noexcept { return samples_; }
  std::uint64_t duplicates() const noexcept { return duplicates_; }
  std::uint64_t malformed() const noexcept { return malformed_; }
  std::uint64_t negative() const noexcept { return negative_; }
  const std::string& error() const noexcept { return error_; }

 private:
  void on_message(const client::MessageReceived& m) {
    const double now = fleet::monotonic_ms();
    const auto p = telemetry::parse_payload(m.payload);
    if (!p) {
      ++malformed_;
      return;
    }
    auto [it, fresh] = last_seq_.try_emplace(p->bus_id, p->seq);
    if (!fresh) {
      if (p->seq <= it->second) ++duplicates_;
      it->second = std::max(it->second, p->seq);
    }
    LatencySample s{p->ts_ms, now, p->bus_id, p->seq};
    if (s.latency_ms() < 0.0) ++negative_;
    samples_.push_back(std::move(s));
    received_.fetch_add(1);
  }

  net::asio::io_context ioc_;
  std::shared_ptr<net::MqttConnection> conn_;
  std::thread thread_;
  std::atomic<bool> subscribed_{false};
  std::atomic<bool> stopping_{false};
  std::atomic<bool> closed_{false};
  std::atomic<std::uint64_t> received_{0};
  std::vector<LatencySample> samples_;
  std::unordered_map<std::string, std::uint64_t> last_seq_;
  std::uint64_t duplicates_ = 0, malformed_ = 0, negative_ = 0;
  std::string error_;
};

// ---------------------------------------------------------------------------
// Report

inline constexpr double kSaturationThreshold = 0.9;

struct RepResult {
  std::size_t rep = 0;
  double mean_latency_ms = 0.0;
  double p95_latency_ms = 0.0;
  double mean_cpu = 0.0;             // cores busy
  double mean_cpu_normalized = 0.0;  // share of all cores
  double host_busy = 0.0;
  std::size_t cpu_samples = 0;
  std::uint64_t published = 0;
  std::uint64_t received = 0;
  std::uint64_t messages = 0;  // latency samples inside the measurement window
  std::uint64_t drops = 0;
  std::uint64_t duplicates = 0;
  bool operator==(const RepResult&) const = default;
};

struct PointResult {
  std::int64_t value = 0;
  bool failed = false;
  std::string error;
  std::vector<RepResult> reps;
  stats::Summary latency;  // pooled over repetitions
  stats::Interval latency_ci;
  stats::Interval cpu_ci;
  stats::Interval cpu_normalized_ci;
  double host_busy = 0.0;
  std::uint64_t messages = 0;
  std::uint64_t drops = 0;
  std::uint64_t duplicates = 0;
  bool saturated = false;
  bool operator==(const PointResult& o) const {
    return value == o.value && failed == o.failed && error == o.error && reps == o.reps &&
           latency.count == o.latency.count && latency.mean == o.latency.mean && latency.median == o.latency.median &&
           latency.p95 == o.latency.p95 && latency.p99 == o.latency.p99 && latency.max == o.latency.max &&
           latency_ci == o.latency_ci && cpu_ci == o.cpu_ci && cpu_normalized_ci == o.cpu_normalized_ci &&
           host_busy == o.host_busy && messages == o.messages && drops == o.drops && duplicates == o.duplicates &&
           saturated == o.saturated;
  }
};

struct Correlation {
  std::string pair;
  std::optional<double> r;  // empty when undefined
  std::size_t n = 0;
  bool operator==(const Correlation&) const = default;
};

// Mean CPU of point b against point a.
struct Comparison {
  std::string name;
  std::int64_t a = 0;
  std::int64_t b = 0;
  stats::Interval difference;  // mean(b) - mean(a), Welch
  double ratio = 0.0;          // mean(b) / mean(a)
  bool ci_overlap = false;
  bool operator==(const Comparison&) const = default;
};

struct ExperimentReport {
  std::string name;
  SweepVariable sweep_variable = SweepVariable::PayloadSize;
  std::size_t repetitions = 0;
  unsigned cores = 1;
  std::vector<PointResult> points;
  std::vector<Correlation> correlations;
  std::vector<Comparison> comparisons;

  bool any_failed() const {
    for (const auto& p : points) {
      if (p.failed) return true;
    }
    return false;
  }
  bool any_saturated() const {
    for (const auto& p : points) {
      if (p.saturated) return true;
    }
    return false;
  }
  const Correlation* correlation(std::string_view pair) const {
    for (const auto& c : correlations) {
      if (c.pair == pair) return &c;
    }
    return nullptr;
  }
  bool operator==(const ExperimentReport&) const = default;
};

inline json to_json(const stats::Interval& i) { return {{"mean", i.mean}, {"low", i.low}, {"high", i.high}}; }

inline stats::Interval interval_from_json(const json& j) {
  return {j.at("mean").get<double>(), j.at("low").get<double>(), j.at("high").get<double>()};
}

inline json to_json(const ExperimentReport& r) {
  json points = json::array();
  for (const auto& p : r.points) {
    json reps = json::array();
    for (const auto& x : p.reps) {
      reps.push_back({{"rep", x.rep},
                      {"mean_latency_ms", x.mean_latency_ms},
                      {"p95_latency_ms", x.p95_latency_ms},
                      {"mean_cpu", x.mean_cpu},
                      {"mean_cpu_normalized", x.mean_cpu_normalized},
                      {"host_busy", x.host_busy},
                      {"cpu_samples", x.cpu_samples},
                      {"published", x.published},
                      {"received", x.received},
                      {"messages", x.messages},
                      {"drops", x.drops},
                      {"duplicates", x.duplicates}});
    }
    points.push_back({{"value", p.value},
                      {"failed", p.failed},
                      {"error", p.error},
                      {"reps", reps},
                      {"latency_ms",
                       {{"count", p.latency.count},
                        {"mean", p.latency.mean},
                        {"median", p.latency.median},
                        {"p95", p.latency.p95},
                        {"p99", p.latency.p99},
                        {"max", p.latency.max}}},
                      {"latency_ci", to_json(p.latency_ci)},
                      {"cpu_ci", to_json(p.cpu_ci)},
                      {"cpu_normalized_ci", to_json(p.cpu_normalized_ci)},
                      {"host_busy", p.host_busy},
                      {"messages", p.messages},
                      {"drops", p.drops},
                      {"duplicates", p.duplicates},
                      {"saturated", p.saturated}});
  }
  json correlations = json::array();
  for (const auto& c : r.correlations) {
    correlations.push_back({{"pair", c.pair}, {"r", c.r ? json(*c.r) : json(nullptr)}, {"n", c.n}});
  }
  json comparisons = json::array();
  for (const auto& c : r.comparisons) {
    comparisons.push_back({{"name", c.name},
                           {"a", c.a},
                           {"b", c.b},
                           {"difference", to_json(c.difference)},
                           {"ratio", c.ratio},
                           {"ci_overlap", c.ci_overlap}});
  }
  return json{{"name", r.name},
              {"sweep_variable", to_string(r.sweep_variable)},
              {"repetitions", r.repetitions},
              {"cores", r.cores},
              {"points", points},
              {"correlations", correlations},
              {"comparisons", comparisons}};
}

inline ExperimentReport report_from_json(const json& j) {
  try {
    ExperimentReport r;
    r.name = j.at("name").get<std::string>();
    r.sweep_variable = sweep_variable_from(j.at("sweep_variable").get<std::string>());
    r.repetitions = j.at("repetitions").get<std::size_t>();
    r.cores = j.at("cores").get<unsigned>();
    for (const auto& jp : j.at("points")) {
      PointResult p;
      p.value = jp.at("value").get<std::int64_t>();
      p.failed = jp.at("failed").get<bool>();
      p.error = jp.at("error").get<std::string>();
      for (const auto& jr : jp.at("reps")) {
        RepResult x;
        x.rep = jr.at("rep").get<std::size_t>();
        x.mean_latency_ms = jr.at("mean_latency_ms").get<double>();
        x.p95_latency_ms = jr.at("p95_latency_ms").get<double>();
        x.mean_cpu = jr.at("mean_cpu").get<double>();
        x.mean_cpu_normalized = jr.at("mean_cpu_normalized").get<double>();
        x.host_busy = jr.at("host_busy").get<double>();
        x.cpu_samples = jr.at("cpu_samples").get<std::size_t>();
        x.published = jr.at("published").get<std::uint64_t>();
        x.received = jr.at("received").get<std::uint64_t>();
        x.messages = jr.at("messages").get<std::uint64_t>();
        x.drops = jr.at("drops").get<std::uint64_t>();
        x.duplicates = jr.at("duplicates").get<std::uint64_t>();
        p.reps.push_back(x);
      }
      const json& l = jp.at("latency_ms");
      p.latency.count = l.at("count").get<std::size_t>();
      p.latency.mean = l.at("mean").get<double>();
      p.latency.median = l.at("median").get<double>();
      p.latency.p95 = l.at("p95").get<double>();
      p.latency.p99 = l.at("p99").get<double>();
      p.latency.max = l.at("max").get<double>();
      p.latency_ci = interval_from_json(jp.at("latency_ci"));
      p.cpu_ci = interval_from_json(jp.at("cpu_ci"));
      p.cpu_normalized_ci = interval_from_json(jp.at("cpu_normalized_ci"));
      p.host_busy = jp.at("host_busy").get<double>();
      p.messages = jp.at("messages").get<std::uint64_t>();
      p.drops = jp.at("drops").get<std::uint64_t>();
      p.duplicates = jp.at("duplicates").get<std::uint64_t>();
      p.saturated = jp.at("saturated").get<bool>();
      r.points.push_back(std::move(p));
    }
    for (const auto& jc : j.at("correlations")) {
      Correlation c;
      c.pair = jc.at("pair").get<std::string>();
      if (!jc.at("r").is_null()) c.r = jc.at("r").get<double>();
      c.n = jc.at("n").get<std::size_t>();
      r.correlations.push_back(std::move(c));
    }
    for (const auto& jc : j.at("comparisons")) {
      Comparison c;
      c.name = jc.at("name").get<std::string>();
      c.a = jc.at("a").get<std::int64_t>();
      c.b = jc.at("b").get<std::int64_t>();
      c.difference = interval_from_json(jc.at("difference"));
      c.ratio = jc.at("ratio").get<double>();
      c.ci_overlap = jc.at("ci_overlap").get<bool>();
      r.comparisons.push_back(std::move(c));
    }
    return r;
  } catch (const json::exception& e) {
    throw BenchError(std::string("bad report: ") + e.what());
  }
}

namespace detail {

// Shortest roundtrip form, independent of the C locale.
inline std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BenchError("cannot open " + path.string() + " for writing");
  out << content;
  out.flush();
  if (!out) throw BenchError("write failed: " + path.string());
}

}  // namespace detail

inline constexpr const char* kPointsCsvHeader = "point,rep,mean_latency_ms,p95_latency_ms,mean_cpu,messages,drops";
inline constexpr const char* kCorrelationsCsvHeader = "pair,r,n";

inline std::string points_csv(const ExperimentReport& r) {
  std::string s = std::string(kPointsCsvHeader) + "\n";
  for (const auto& p : r.points) {
    for (const auto& x : p.reps) {
      s += std::to_string(p.value) + "," + std::to_string(x.rep) + "," + detail::num(x.mean_latency_ms) + "," +
           detail::num(x.p95_latency_ms) + "," + detail::num(x.mean_cpu) + "," + std::to_string(x.messages) + "," +
           std::to_string(x.drops) + "\n";
    }
  }
  return s;
}

inline std::string correlations_csv(const ExperimentReport& r) {
  std::string s = std::string(kCorrelationsCsvHeader) + "\n";
  for (const auto& c : r.correlations) {
    s += c.pair + "," + (c.r ? detail::num(*c.r) : std::string()) + "," + std::to_string(c.n) + "\n";
  }
  return s;
}

inline void write_report(const ExperimentReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw BenchError("cannot create " + dir.string() + ": " + ec.message());
  detail::write_file(dir / "report.json", to_json(r).dump(2) + "\n");
  detail::write_file(dir / "points.csv", points_csv(r));
  detail::write_file(dir / "correlations.csv", correlations_csv(r));
}

inline ExperimentReport read_report(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw BenchError("cannot read " + file.string());
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw BenchError(file.string() + ": not valid JSON");
  return report_from_json(j);
}

// ---------------------------------------------------------------------------
// Running

struct RunOptions {
  std::ostream* log = nullptr;
};

class RepFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One repetition against a fresh broker. Throws RepFailed when the broker
// dies or the measurement cannot be completed.
inline RepResult run_repetition(const ExperimentSpec& spec, fleet::FleetConfig config, BrokerInstance& broker,
                                std::size_t rep, std::vector<double>& pooled_latency) {
  config.broker = broker.endpoint();
  MeasuringSubscriber sub(config.broker, config.qos);

  const auto t0 = Clock::now();
  const auto to_clock = [](double s) {
    return std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(s));
  };
  const auto measure_start = t0 + to_clock(spec.warmup_s);
  const auto interval = to_clock(spec.cpu_interval_s);
  const auto n_intervals = static_cast<std::size_t>(std::floor(spec.measure_s / spec.cpu_interval_s + 1e-9));
  const auto measure_end = measure_start + interval * static_cast<Clock::rep>(n_intervals);
  const double window_lo = std::chrono::duration<double, std::milli>(measure_start.time_since_epoch()).count();
  const double window_hi = std::chrono::duration<double, std::milli>(measure_end.time_since_epoch()).count();

  std::vector<cpu::CpuSample> cpu_samples;
  std::optional<double> host_busy;
  std::string sampler_error;
  std::atomic<bool> abort{false};
  std::thread sampler([&] {
    try {
      std::optional<cpu::CpuReading> prev;
      cpu::HostCpu host;
      std::this_thread::sleep_until(measure_start);
      if (abort) return;
      cpu::sample_cpu(broker.cpu_target(), prev);
      host.sample();
      for (std::size_t k = 1; k <= n_intervals && !abort; ++k) {
        std::this_thread::sleep_until(measure_start + interval * static_cast<Clock::rep>(k));
        if (auto s = cpu::sample_cpu(broker.cpu_target(), prev)) cpu_samples.push_back(*s);
      }
      host_busy = host.sample();
    } catch (const cpu::ProcessGone& e) {
      sampler_error = e.what();
    }
  });

  std::uint64_t published_in_window = 0;
  fleet::FleetHooks hooks;
  hooks.on_publish = [&](const fleet::Publication&, double ts) {
    if (ts >= window_lo && ts < window_hi) ++published_in_window;
  };
  hooks.should_stop = [&] { return !sampler_error.empty(); };
  fleet::FleetRunStats run;
  try {
    run = fleet::run_fleet(config, spec.warmup_s + spec.measure_s, hooks, spec.drain_s);
  } catch (const std::exception& e) {
    abort = true;
    sampler.join();
    throw RepFailed(broker.failure().value_or(e.what()));
  }
  sampler.join();
  if (auto why = broker.failure()) throw RepFailed(*why);
  if (!sampler_error.empty()) throw RepFailed(sampler_error);

  // Let in-flight deliveries reach the subscriber.
  const std::uint64_t published = run.published();
  const auto give_up = Clock::now() + to_clock(spec.drain_s);
  std::uint64_t last = sub.received();
  auto last_progress = Clock::now();
  while (sub.received() < published && Clock::now() < give_up) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    if (sub.received() != last) {
      last = sub.received();
      last_progress = Clock::now();
    } else if (config.qos == wire::QosLevel::AtMostOnce && Clock::now() - last_progress > std::chrono::milliseconds(300)) {
      break;
    }
  }
  sub.stop();
  if (auto why = broker.failure()) throw RepFailed(*why);
  if (!sub.error().empty()) throw RepFailed(sub.error());
  if (sub.negative() > 0) throw RepFailed(std::to_string(sub.negative()) + " latency samples were negative");

  RepResult r;
  r.rep = rep;
  std::vector<double> window;
  for (const auto& s : sub.samples()) {
    if (s.publish_ts_ms >= window_lo && s.publish_ts_ms < window_hi) window.push_back(s.latency_ms());
  }
  if (window.empty()) throw RepFailed("no messages arrived from the measurement window");
  const auto summary = stats::summarize(window);
  r.mean_latency_ms = summary.mean;
  r.p95_latency_ms = summary.p95;
  r.messages = window.size();
  pooled_latency.insert(pooled_latency.end(), window.begin(), window.end());
  if (cpu_samples.empty()) throw RepFailed("no CPU samples in the measurement window");
  double busy = 0.0;
  for (const auto& s : cpu_samples) busy += s.cpu_fraction;
  r.mean_cpu = busy / static_cast<double>(cpu_samples.size());
  r.mean_cpu_normalized = r.mean_cpu / cpu::core_count();
  r.cpu_samples = cpu_samples.size();
  r.host_busy = host_busy.value_or(0.0);
  r.published = published;
  r.received = sub.received();
  r.duplicates = sub.duplicates();
  const std::uint64_t unique = r.received - std::min(r.received, r.duplicates);
  r.drops = published > unique ? published - unique : 0;
  (void)published_in_window;
  return r;
}

inline void aggregate(PointResult& p, std::vector<double> pooled) {
  p.latency = stats::summarize(std::move(pooled));
  p.messages = p.drops = p.duplicates = 0;
  std::vector<double> lat, cpu_raw, cpu_norm;
  double host = 0.0;
  for (const auto& r : p.reps) {
    lat.push_back(r.mean_latency_ms);
    cpu_raw.push_back(r.mean_cpu);
    cpu_norm.push_back(r.mean_cpu_normalized);
    host += r.host_busy;
    p.messages += r.messages;
    p.drops += r.drops;
    p.duplicates += r.duplicates;
  }
  if (p.reps.size() >= 2) {
    p.latency_ci = stats::mean_ci95(lat);
    p.cpu_ci = stats::mean_ci95(cpu_raw);
    p.cpu_normalized_ci = stats::mean_ci95(cpu_norm);
  } else if (p.reps.size() == 1) {
    p.latency_ci = {lat[0], lat[0], lat[0]};
    p.cpu_ci = {cpu_raw[0], cpu_raw[0], cpu_raw[0]};
    p.cpu_normalized_ci = {cpu_norm[0], cpu_norm[0], cpu_norm[0]};
  }
  if (!p.reps.empty()) p.host_busy = host / static_cast<double>(p.reps.size());
  p.saturated = p.host_busy >= kSaturationThreshold || p.cpu_ci.mean >= kSaturationThreshold;
}

// Pearson over (sweep value, per-point mean) for the points that completed.
inline void correlate(ExperimentReport& report) {
  report.correlations.clear();
  report.comparisons.clear();
  std::vector<const PointResult*> ok;
  for (const auto& p : report.points) {
    if (!p.failed && !p.reps.empty()) ok.push_back(&p);
  }
  if (report.sweep_variable != SweepVariable::Qos) {
    std::vector<double> xs, lat, cpu;
    for (const auto* p : ok) {
      xs.push_back(static_cast<double>(p->value));
      lat.push_back(p->latency_ci.mean);
      cpu.push_back(p->cpu_ci.mean);
    }
    const std::string axis = axis_name(report.sweep_variable);
    for (auto [name, ys] : {std::pair{"mean_latency_ms", &lat}, std::pair{"mean_cpu", &cpu}}) {
      Correlation c{axis + "~" + name, std::nullopt, xs.size()};
      try {
        c.r = stats::pearson(xs, *ys);
      } catch (const stats::StatsError&) {
      }
      report.correlations.push_back(std::move(c));
    }
  }
  if (report.sweep_variable == SweepVariable::Qos && ok.size() >= 2) {
    const PointResult& a = *ok.front();
    const PointResult& b = *ok.back();
    std::vector<double> ca, cb;
    for (const auto& r : a.reps) ca.push_back(r.mean_cpu);
    for (const auto& r : b.reps) cb.push_back(r.mean_cpu);
    if (ca.size() >= 2 && cb.size() >= 2) {
      Comparison c;
      c.name = "mean_cpu qos" + std::to_string(b.value) + " vs qos" + std::to_string(a.value);
      c.a = a.value;
      c.b = b.value;
      c.difference = stats::welch_diff_ci95(cb, ca);
      c.ratio = a.cpu_ci.mean > 0.0 ? b.cpu_ci.mean / a.cpu_ci.mean : 0.0;
      c.ci_overlap = a.cpu_ci.overlaps(b.cpu_ci);
      report.comparisons.push_back(std::move(c));
    }
  }
}

inline ExperimentReport run_experiment(const ExperimentSpec& spec, const BrokerLauncher& launch,
                                       const RunOptions& options = {}) {
  spec.validate();
  ExperimentReport report;
  report.name = spec.name;
  report.sweep_variable = spec.sweep_variable;
  report.repetitions = spec.repetitions;
  report.cores = cpu::core_count();
  for (const auto value : spec.sweep_points) {
    PointResult point;
    point.value = value;
    std::vector<double> pooled;
    for (std::size_t rep = 0; rep < spec.repetitions; ++rep) {
      try {
        auto broker = launch();
        RepResult r = run_repetition(spec, spec.at(value), *broker, rep, pooled);
        broker->stop();
        if (options.log) {
          *options.log << spec.name << " " << axis_name(spec.sweep_variable) << "=" << value << " rep " << rep
                       << ": latency " << detail::num(r.mean_latency_ms) << " ms, cpu " << detail::num(r.mean_cpu)
                       << ", host " << detail::num(r.host_busy) << ", " << r.messages << " msgs, " << r.drops
                       << " drops" << std::endl;
        }
        point.reps.push_back(r);
      } catch (const std::exception& e) {
        point.failed = true;
        point.error = "rep " + std::to_string(rep) + ": " + e.what();
        if (options.log) *options.log << spec.name << " point " << value << " failed: " << point.error << std::endl;
        break;
      }
    }
    aggregate(point, std::move(pooled));
    report.points.push_back(std::move(point));
  }
  correlate(report);
  return report;
}

}  // namespace busgw::bench
