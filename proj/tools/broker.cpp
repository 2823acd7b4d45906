#include <csignal>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "busgw/net.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MQTT 3.1.1 broker for bus telemetry"};
  std::string listen = "0.0.0.0:1883";
  std::size_t max_inflight = 64;
  double retransmit_s = 5.0;
  std::string metrics_csv;
  bool deterministic = false;
  bool verbose = false;
  unsigned threads = 0;
  app.add_option("--listen", listen, "addr:port to listen on (port 0 picks a free one)");
  app.add_option("--max-inflight", max_inflight, "unacknowledged QoS 1/2 messages per session")->check(CLI::PositiveNumber);
  app.add_option("--retransmit-timeout", retransmit_s, "seconds before an unacknowledged message is resent")
      ->check(CLI::PositiveNumber);
  app.add_option("--metrics-csv", metrics_csv, "append one metrics row per second to this file");
  app.add_flag("--deterministic", deterministic, "single-threaded mode");
  app.add_option("--threads", threads, "io threads (default: one per core)");
  app.add_flag("-v,--verbose", verbose, "log protocol anomalies to stderr");
  CLI11_PARSE(app, argc, argv);

  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::signal(SIGPIPE, SIG_IGN);

  busgw::net::ServerOptions o;
  try {
    o.listen = busgw::net::Endpoint::parse(listen);
  } catch (const std::exception& e) {
    std::cerr << "broker: " << e.what() << '\n';
    return 1;
  }
  o.broker.max_inflight = max_inflight;
  o.broker.retransmit_timeout = std::chrono::milliseconds(static_cast<long>(retransmit_s * 1000.0));
  if (verbose) o.broker.log = [](std::string_view line) { std::cerr << line << '\n'; };
  o.metrics_csv = metrics_csv;
  o.deterministic = deterministic;
  o.threads = threads;

  std::unique_ptr<busgw::net::BrokerServer> server;
  try {
    server = std::make_unique<busgw::net::BrokerServer>(o);
  } catch (const std::exception& e) {
    std::cerr << "broker: cannot listen on " << listen << ": " << e.what() << '\n';
    return 1;
  }
  std::cout << "listening on " << o.listen.host << ':' << server->port() << std::endl;

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server->stop();
  });
  server->run();
  // Wake the waiter if run() returned for another reason.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return 0;
}
