// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,4,...] [--out DIR] [--broker PATH]

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "busgw/bench.hpp"
#include "busgw/rider.hpp"
#include "busgw/stats.hpp"
#include "busgw/wire.hpp"
#include "support/capture_proxy.hpp"
#include "support/exactly_once.hpp"
#include "support/gen.hpp"
#include "support/oracles.hpp"
#include "support/qos_capture.hpp"
#include "support/tcp_broker.hpp"

using namespace busgw;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kSizeLatencyMinR = 0.90;
constexpr double kFleetCpuMinR = 0.5;
constexpr double kFleetLatencyMaxAbsR = 0.4;
constexpr double kQosCpuMinRatio = 1.3;
constexpr std::size_t kExactlyOnceCases = 1000;
constexpr int kRoundtripPackets = 10000;
constexpr int kFuzzInputs = 1000000;
constexpr int kCaptureMessages = 50;
constexpr double kPearsonTolerance = 1e-9;
constexpr double kCiTolerance = 0.001;
constexpr int kSaturationRetries = 3;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

std::string fmt_r(const std::optional<double>& r) { return r ? fmt(*r) : std::string("undefined"); }

struct Context {
  std::string broker_path;
  std::string out_dir;
  std::map<std::string, bench::ExperimentReport> reports;

  const bench::ExperimentReport& run(const std::string& name, const std::function<void(bench::ExperimentSpec&)>& tweak = {},
                                     const std::string& tag = {}) {
    const std::string key = tag.empty() ? name : name + "-" + tag;
    if (auto it = reports.find(key); it != reports.end()) return it->second;
    auto spec = *bench::preset(name);
    if (tweak) tweak(spec);
    std::cerr << "running " << key << " (" << spec.sweep_points.size() << " points x " << spec.repetitions
              << " reps)\n";
    bench::RunOptions opts;
    opts.log = &std::cerr;
    const std::string path = broker_path;
    auto report = bench::run_experiment(spec, [path] { return std::make_unique<bench::ChildBroker>(path); }, opts);
    if (!out_dir.empty()) bench::write_report(report, fs::path(out_dir) / key);
    return reports.emplace(key, std::move(report)).first->second;
  }
};

std::optional<std::string> failures(const bench::ExperimentReport& r) {
  for (const auto& p : r.points) {
    if (p.failed) return "point " + std::to_string(p.value) + " failed: " + p.error;
  }
  return std::nullopt;
}

std::string means(const bench::ExperimentReport& r, bool cpu) {
  std::string s;
  for (const auto& p : r.points) {
    if (!s.empty()) s += ' ';
    s += std::to_string(p.value) + ":" + fmt(cpu ? p.cpu_ci.mean : p.latency_ci.mean);
  }
  return s;
}

Verdict correlation_at_least(const bench::ExperimentReport& r, const std::string& pair, double min_r, bool cpu) {
  if (auto f = failures(r)) return {false, *f};
  const auto* c = r.correlation(pair);
  if (c == nullptr || !c->r) return {false, pair + " undefined"};
  return {*c->r >= min_r, "r=" + fmt_r(c->r) + " (need >= " + fmt(min_r, 2) + "), means " + means(r, cpu)};
}

Verdict size_latency(Context& ctx) {
  return correlation_at_least(ctx.run("paper-q1-size"), "payload_bytes~mean_latency_ms", kSizeLatencyMinR, false);
}

Verdict fleet_cpu(Context& ctx) {
  return correlation_at_least(ctx.run("paper-q2-fleet"), "bus_count~mean_cpu", kFleetCpuMinR, true);
}

Verdict fleet_latency(Context& ctx) {
  const auto* r = &ctx.run("paper-q2-fleet");
  std::string note;
  double scale = r->points.empty() ? 1.0 : bench::preset("paper-q2-fleet")->fixed.time_scale;
  for (int attempt = 0; attempt < kSaturationRetries && r->any_saturated() && !failures(*r); ++attempt) {
    scale = std::max(1.0, scale / 2.0);
    note += " saturated, re-ran at time_scale " + fmt(scale, 1) + ";";
    r = &ctx.run("paper-q2-fleet", [scale](bench::ExperimentSpec& s) { s.fixed.time_scale = scale; },
                 "scale" + fmt(scale, 1));
  }
  if (auto f = failures(*r)) return {false, *f};
  const auto* c = r->correlation("bus_count~mean_latency_ms");
  if (c == nullptr || !c->r) return {false, "correlation undefined"};
  const bool saturated = r->any_saturated();
  return {!saturated && std::abs(*c->r) <= kFleetLatencyMaxAbsR,
          "r=" + fmt_r(c->r) + " (need |r| <= " + fmt(kFleetLatencyMaxAbsR, 2) + "), means " + means(*r, false) +
              note + (saturated ? " still saturated" : "")};
}

std::string comparison_text(const bench::Comparison& c, const bench::ExperimentReport& r) {
  return "cpu qos0=" + fmt(r.points.front().cpu_ci.mean) + " [" + fmt(r.points.front().cpu_ci.low) + ", " +
         fmt(r.points.front().cpu_ci.high) + "] qos2=" + fmt(r.points.back().cpu_ci.mean) + " [" +
         fmt(r.points.back().cpu_ci.low) + ", " + fmt(r.points.back().cpu_ci.high) + "] ratio=" + fmt(c.ratio, 2) +
         (c.ci_overlap ? " overlapping" : " disjoint");
}

Verdict qos_large(Context& ctx) {
  const auto& r = ctx.run("paper-q3-qos-1000");
  if (auto f = failures(r)) return {false, *f};
  if (r.comparisons.empty()) return {false, "no comparison"};
  const auto& c = r.comparisons.front();
  const bool higher = r.points.back().cpu_ci.mean > r.points.front().cpu_ci.mean;
  return {higher && !c.ci_overlap && c.ratio >= kQosCpuMinRatio,
          comparison_text(c, r) + " (need disjoint, ratio >= " + fmt(kQosCpuMinRatio, 1) + ")"};
}

Verdict qos_small(Context& ctx) {
  const auto& r = ctx.run("paper-q3-qos-100");
  if (auto f = failures(r)) return {false, *f};
  if (r.comparisons.empty()) return {false, "no comparison"};
  const auto& c = r.comparisons.front();
  return {c.ci_overlap || c.ratio < kQosCpuMinRatio,
          comparison_text(c, r) + " (need overlapping or ratio < " + fmt(kQosCpuMinRatio, 1) + ")"};
}

Verdict exactly_once(Context&) {
  std::size_t messages = 0, deliveries = 0;
  for (std::uint64_t seed = 1; seed <= kExactlyOnceCases; ++seed) {
    const auto r = exactly_once::run_case(seed);
    if (!r.ok) return {false, "seed " + std::to_string(seed) + ": " + r.detail};
    messages += r.messages;
    deliveries += r.deliveries;
  }
  bench::ExperimentSpec s;
  s.name = "qos2-tcp";
  s.sweep_variable = bench::SweepVariable::Qos;
  s.sweep_points = {0, 2};
  s.repetitions = 2;
  s.warmup_s = 0.5;
  s.measure_s = 2.0;
  s.cpu_interval_s = 0.5;
  s.fixed.bus_count = 50;
  s.fixed.publish_interval_ms = 100;
  const auto report = bench::run_experiment(s, [] { return std::make_unique<bench::InProcessBroker>(); });
  if (auto f = failures(report)) return {false, *f};
  std::uint64_t published = 0, received = 0;
  for (const auto& x : report.points.back().reps) {
    if (x.received != x.published || x.duplicates != 0) {
      return {false, "tcp qos2 rep " + std::to_string(x.rep) + ": published " + std::to_string(x.published) +
                         " received " + std::to_string(x.received) + " duplicates " + std::to_string(x.duplicates)};
    }
    published += x.published;
    received += x.received;
  }
  return {true, std::to_string(kExactlyOnceCases) + " cases, " + std::to_string(messages) + " messages, " +
                    std::to_string(deliveries) + " deliveries; tcp qos2 published=" + std::to_string(published) +
                    " received=" + std::to_string(received)};
}

Verdict codec(Context&) {
  gen::Rng rng(7);
  for (int i = 0; i < kRoundtripPackets; ++i) {
    const auto p = gen::packet(rng);
    const auto b = wire::encode_packet(p);
    const auto r = wire::decode_packet(b);
    if (!r.ok() || r.consumed != b.size() || !(r.packet == p)) return {false, "roundtrip failed at packet " + std::to_string(i)};
  }
  std::size_t decoded = 0;
  for (int i = 0; i < kFuzzInputs; ++i) {
    wire::Bytes b;
    if (i % 2 == 0) {
      b = gen::bytes(rng, 48);
    } else {
      b = wire::encode_packet(gen::packet(rng));
      b[gen::uniform(rng, 0, b.size() - 1)] ^= static_cast<std::uint8_t>(rng() | 1);
      if (gen::coin(rng, 0.3)) b.resize(gen::uniform(rng, 0, b.size()));
    }
    const auto r = wire::decode_packet(b);
    if (r.consumed > b.size()) return {false, "decoder over-consumed at input " + std::to_string(i)};
    decoded += r.ok();
  }
  return {true, std::to_string(kRoundtripPackets) + " roundtrips, " + std::to_string(kFuzzInputs) + " fuzz inputs (" +
                    std::to_string(decoded) + " decoded), no crash"};
}

Verdict amplification(Context&) {
  std::map<int, int> counts[2];
  const wire::QosLevel levels[2] = {wire::QosLevel::AtMostOnce, wire::QosLevel::ExactlyOnce};
  for (int k = 0; k < 2; ++k) {
    support::TcpBroker broker;
    capture::Proxy proxy(broker.server->port());
    support::publish_through(proxy.port(), levels[k], kCaptureMessages);
    counts[k] = support::publish_flow_counts(proxy.frames());
  }
  auto total = [](const std::map<int, int>& m) {
    int n = 0;
    for (auto [_, c] : m) n += c;
    return n;
  };
  const double per0 = static_cast<double>(total(counts[0])) / kCaptureMessages;
  const double per2 = static_cast<double>(total(counts[1])) / kCaptureMessages;
  const bool each = counts[1][3] == kCaptureMessages && counts[1][5] == kCaptureMessages &&
                    counts[1][6] == kCaptureMessages && counts[1][7] == kCaptureMessages;
  return {per0 == 1.0 && per2 == 4.0 && each, "packets per message: qos0=" + fmt(per0, 2) + " qos2=" + fmt(per2, 2)};
}

Verdict statistics(Context&) {
  gen::Rng rng(11);
  double worst = 0.0;
  for (int d = 0; d < 100; ++d) {
    const std::size_t n = gen::uniform(rng, 3, 12);
    std::vector<std::int64_t> xi(n), yi(n);
    std::vector<double> xs(n), ys(n);
    for (std::size_t i = 0; i < n; ++i) {
      xi[i] = static_cast<std::int64_t>(gen::uniform(rng, 0, 2000)) - 1000;
      yi[i] = static_cast<std::int64_t>(gen::uniform(rng, 0, 2000)) - 1000;
      xs[i] = static_cast<double>(xi[i]);
      ys[i] = static_cast<double>(yi[i]);
    }
    worst = std::max(worst, std::abs(stats::pearson(xs, ys) - oracle::pearson_exact(xi, yi)));
  }
  const std::vector<double> sample{1, 2, 3, 4, 5};
  const auto ci = stats::mean_ci95(sample);
  const double half = oracle::kT975Df4 * std::sqrt(2.5) / std::sqrt(5.0);
  const double err = std::max(std::abs(ci.low - (3.0 - half)), std::abs(ci.high - (3.0 + half)));
  return {worst <= kPearsonTolerance && err <= kCiTolerance,
          "pearson max error " + sci(worst) + " over 100 datasets; ci [" + fmt(ci.low) + ", " +
              fmt(ci.high) + "] error " + fmt(err, 4)};
}

// One rectangular loop near the equator with the stop on its first side.
Verdict end_to_end(Context&) {
  const geo::Route route("loop", {{0.0, 0.0}, {0.0, 0.01}, {0.005, 0.01}, {0.005, 0.0}}, true);
  const geo::Stop stop{"stop-a", {0.0, 0.005}, 100.0};
  support::TcpBroker broker;

  std::ostringstream live, recorded;
  rider::RiderSinks sinks;
  sinks.events = &live;
  sinks.record = &recorded;
  rider::RiderConfig rc;
  rc.broker = broker.endpoint();
  rc.stop = stop;
  rider::RiderCore core(stop, rc.hysteresis);
  std::atomic<bool> stop_rider{false};
  rider::RiderRunOptions ro;
  ro.handle_signals = false;
  ro.stop = &stop_rider;
  std::thread rider_thread([&] { rider::run_rider(rc, core, sinks, ro); });
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
  while (broker.server->metrics().active_sessions < 1 && std::chrono::steady_clock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  std::this_thread::sleep_for(std::chrono::milliseconds(300));

  fleet::FleetConfig fc;
  fc.routes = {route};
  fc.speed_mps = 20.0;
  fc.publish_interval_ms = 1000;
  fc.time_scale = 50.0;
  fc.qos = wire::QosLevel::AtLeastOnce;
  fc.broker = broker.endpoint();
  // Independent pass count: runs of consecutive fixes within the radius.
  int passes = 0;
  bool was_inside = false;
  fleet::FleetHooks hooks;
  hooks.on_publish = [&](const fleet::Publication& p, double) {
    const double d = std::hypot(p.fix.latitude - stop.position.lat, p.fix.longitude - stop.position.lon) *
                     oracle::equatorial_degree_m();
    const bool inside = d <= stop.radius_m;
    if (inside && !was_inside) ++passes;
    was_inside = inside;
  };
  fleet::run_fleet(fc, 9.0, hooks);
  std::this_thread::sleep_for(std::chrono::milliseconds(500));
  stop_rider = true;
  rider_thread.join();
  if (was_inside) return {false, "run ended inside the stop radius"};

  std::vector<rider::NotificationEvent> events;
  std::istringstream lines(live.str());
  for (std::string line; std::getline(lines, line);) {
    if (auto e = rider::parse_json_line(line)) events.push_back(*e);
  }
  bool shape = events.size() == static_cast<std::size_t>(4 * passes);
  for (std::size_t i = 0; shape && i < events.size(); ++i) {
    const auto kind = (i / 2) % 2 == 0 ? geo::ProximityKind::Entered : geo::ProximityKind::Exited;
    const auto channel = i % 2 == 0 ? rider::Channel::Audible : rider::Channel::Mechanical;
    shape = events[i].proximity.kind == kind && events[i].channel == channel;
  }

  std::string replays[2];
  for (auto& out : replays) {
    rider::RiderCore again(stop, rc.hysteresis);
    std::istringstream in(recorded.str());
    std::ostringstream o;
    rider::RiderSinks rs;
    rs.events = &o;
    rider::replay(again, in, rs);
    out = o.str();
  }
  const bool deterministic = replays[0] == replays[1] && replays[0] == live.str();
  return {passes >= 2 && shape && deterministic,
          std::to_string(passes) + " passes, " + std::to_string(events.size()) + " events" +
              (shape ? ", one Entered and one Exited pair per pass" : ", wrong event sequence") +
              (deterministic ? ", replays identical" : ", replays differ")};
}

struct Criterion {
  int id;
  const char* name;
  Verdict (*check)(Context&);
};

const Criterion kCriteria[] = {
    {1, "payload size vs latency correlation", size_latency},
    {2, "fleet size vs broker cpu correlation", fleet_cpu},
    {3, "fleet size vs latency weak correlation", fleet_latency},
    {4, "qos 2 cpu overhead at 1000 buses", qos_large},
    {5, "no qos cpu overhead at 100 buses", qos_small},
    {6, "exactly-once delivery", exactly_once},
    {7, "wire codec roundtrip and fuzz", codec},
    {8, "qos 2 wire amplification", amplification},
    {9, "statistics oracles", statistics},
    {10, "rider end-to-end scenario", end_to_end},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  Context ctx;
  ctx.broker_path = BROKER_PATH;
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  app.add_option("--out", ctx.out_dir, "Directory for benchmark reports");
  app.add_option("--broker", ctx.broker_path, "Broker executable");
  CLI11_PARSE(app, argc, argv);

  int failed = 0;
  for (const auto& c : kCriteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      v = c.check(ctx);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !v.pass;
    std::cout << "criterion " << std::setw(2) << c.id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << c.name << "  -- "
              << v.detail << " [" << fmt(secs, 1) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
