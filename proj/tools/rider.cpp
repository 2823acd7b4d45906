#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "busgw/rider.hpp"

int main(int argc, char** argv) {
  using namespace busgw;
  CLI::App app{"Rider client: notifies when a bus approaches or leaves a stop"};
  std::string broker = "127.0.0.1:1883";
  std::vector<std::string> filters;
  std::string stop_file, events_out, record_file, replay_file;
  int qos = 1;
  double hysteresis = geo::kDefaultHysteresis;
  bool quiet = false;
  app.add_option("--broker", broker, "broker addr:port");
  app.add_option("--filter", filters, "topic filter for the lines to follow (repeatable)");
  app.add_option("--stop", stop_file, "stop JSON file")->required();
  app.add_option("--qos", qos, "subscription QoS")->check(CLI::Range(0, 2));
  app.add_option("--events-out", events_out, "append notification events as JSON lines");
  app.add_option("--hysteresis", hysteresis, "exit radius margin as a fraction of the stop radius");
  app.add_option("--record", record_file, "also save raw telemetry for --replay");
  app.add_option("--replay", replay_file, "process recorded telemetry instead of connecting");
  app.add_flag("-q,--quiet", quiet, "no console output");
  CLI11_PARSE(app, argc, argv);
  std::signal(SIGPIPE, SIG_IGN);

  try {
    rider::RiderConfig config;
    config.broker = net::Endpoint::parse(broker);
    if (!filters.empty()) config.line_filters = filters;
    config.stop = geo::load_stop(stop_file);
    config.qos = *wire::qos_from_int(qos);
    config.hysteresis = hysteresis;
    config.validate();

    std::ofstream events, record;
    rider::RiderSinks sinks;
    sinks.console = quiet ? nullptr : &std::cout;
    if (!events_out.empty()) {
      events.open(events_out, std::ios::app);
      if (!events) throw std::runtime_error("cannot open " + events_out);
      sinks.events = &events;
    } else {
      sinks.events = &std::cout;
      sinks.console = nullptr;
    }
    if (!record_file.empty()) {
      record.open(record_file, std::ios::app);
      if (!record) throw std::runtime_error("cannot open " + record_file);
      sinks.record = &record;
    }

    rider::RiderCore core(config.stop, config.hysteresis);
    if (!replay_file.empty()) {
      std::ifstream in(replay_file);
      if (!in) throw std::runtime_error("cannot open " + replay_file);
      rider::replay(core, in, sinks);
    } else {
      rider::run_rider(config, core, sinks);
    }
    if (core.malformed() > 0 && !quiet) std::cerr << "ignored " << core.malformed() << " malformed payloads\n";
  } catch (const std::exception& e) {
    std::cerr << "rider: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
