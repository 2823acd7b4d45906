#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "busgw/fleet.hpp"

int main(int argc, char** argv) {
  using namespace busgw;
  CLI::App app{"Simulated bus fleet publishing GPS telemetry"};
  fleet::FleetConfig c;
  int qos = 0;
  double duration_s = 60.0;
  std::string broker = "127.0.0.1:1883";
  std::string routes_file;
  std::string stats_csv;
  app.add_option("--buses", c.bus_count, "number of buses")->check(CLI::PositiveNumber);
  app.add_option("--qos", qos, "publish QoS")->check(CLI::Range(0, 2));
  app.add_option("--interval-ms", c.publish_interval_ms, "virtual ms between fixes per bus");
  app.add_option("--pad-bytes", c.payload_pad_bytes, "pad each payload to this many bytes");
  app.add_option("--duration-s", duration_s, "wall-clock run time")->check(CLI::PositiveNumber);
  app.add_option("--broker", broker, "broker addr:port");
  app.add_option("--routes", routes_file, "routes JSON file (default: built-in loop)");
  app.add_option("--time-scale", c.time_scale, "virtual seconds per wall second");
  app.add_option("--speed-mps", c.speed_mps, "bus speed");
  app.add_option("--stats-csv", stats_csv, "per-bus counters written at exit");
  CLI11_PARSE(app, argc, argv);
  std::signal(SIGPIPE, SIG_IGN);

  try {
    c.qos = *wire::qos_from_int(qos);
    c.broker = net::Endpoint::parse(broker);
    if (!routes_file.empty()) c.routes = geo::load_routes(routes_file);
    c.epoch_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                     std::chrono::system_clock::now().time_since_epoch())
                     .count();
    c.validate();
    const auto stats = fleet::run_fleet(c, duration_s);
    std::cout << "published " << stats.published() << ", acked qos1 " << stats.acked_qos1 << ", acked qos2 "
              << stats.acked_qos2 << ", errors " << stats.errors << '\n';
    if (!stats_csv.empty()) fleet::write_stats_csv(stats, stats_csv);
  } catch (const std::exception& e) {
    std::cerr << "fleetsim: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
