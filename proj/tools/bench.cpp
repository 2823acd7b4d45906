#include <csignal>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "busgw/bench.hpp"

namespace fs = std::filesystem;
using namespace busgw;

static void print_summary(const bench::ExperimentReport& r) {
  std::cout << "\n" << r.name << " (" << r.cores << " cores)\n";
  for (const auto& p : r.points) {
    std::cout << "  " << bench::axis_name(r.sweep_variable) << "=" << p.value;
    if (p.failed) {
      std::cout << "  FAILED: " << p.error << '\n';
      continue;
    }
    std::cout << "  latency " << p.latency_ci.mean << " ms [" << p.latency_ci.low << ", " << p.latency_ci.high
              << "]  p95 " << p.latency.p95 << "  cpu " << p.cpu_ci.mean << " [" << p.cpu_ci.low << ", "
              << p.cpu_ci.high << "]  msgs " << p.messages << "  drops " << p.drops
              << (p.saturated ? "  SATURATED" : "") << '\n';
  }
  for (const auto& c : r.correlations) {
    std::cout << "  r(" << c.pair << ") = ";
    if (c.r) {
      std::cout << *c.r;
    } else {
      std::cout << "undefined";
    }
    std::cout << "  n=" << c.n << '\n';
  }
  for (const auto& c : r.comparisons) {
    std::cout << "  " << c.name << ": diff " << c.difference.mean << " [" << c.difference.low << ", "
              << c.difference.high << "]  ratio " << c.ratio << (c.ci_overlap ? "  CIs overlap" : "  CIs disjoint")
              << '\n';
  }
}

int main(int argc, char** argv) {
  CLI::App app{"Latency and CPU experiments against the broker"};
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "run an experiment and write its report");
  std::string spec_arg, out_dir, broker_cmd;
  bool in_process = false;
  run->add_option("--spec", spec_arg, "preset name or spec JSON file")->required();
  run->add_option("--out", out_dir, "output directory")->required();
  auto* cmd_opt = run->add_option("--broker-cmd", broker_cmd, "broker executable (default: next to bench)");
  run->add_flag("--in-process", in_process, "run the broker on a thread of this process")->excludes(cmd_opt);
  auto* show = app.add_subcommand("presets", "print the shipped presets as JSON");
  CLI11_PARSE(app, argc, argv);
  std::signal(SIGPIPE, SIG_IGN);

  if (show->parsed()) {
    for (const auto& name : bench::preset_names()) std::cout << bench::to_json(*bench::preset(name)).dump(2) << '\n';
    return 0;
  }

  try {
    const auto spec = bench::load_spec(spec_arg);
    bench::BrokerLauncher launch;
    if (in_process) {
      launch = [] { return std::make_unique<bench::InProcessBroker>(); };
    } else {
      if (broker_cmd.empty()) broker_cmd = (fs::read_symlink("/proc/self/exe").parent_path() / "broker").string();
      if (!fs::exists(broker_cmd)) throw bench::BenchError("broker executable not found: " + broker_cmd);
      launch = [broker_cmd] { return std::make_unique<bench::ChildBroker>(broker_cmd); };
    }
    bench::RunOptions options;
    options.log = &std::cerr;
    const auto report = bench::run_experiment(spec, launch, options);
    bench::write_report(report, out_dir);
    print_summary(report);
    return report.any_failed() ? 2 : 0;
  } catch (const std::exception& e) {
    std::cerr << "bench: " << e.what() << '\n';
    return 1;
  }
}
