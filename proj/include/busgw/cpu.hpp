#pragma once

// CPU utilisation of a process or thread, as delta CPU time over delta wall
// time between two readings.

#include <pthread.h>
#include <sys/types.h>
#include <time.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>

namespace busgw::cpu {

class ProcessGone : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Something whose CPU clock can be read: another process, a thread of this
// process, or this process as a whole.
class CpuTarget {
 public:
  static CpuTarget process(pid_t pid) {
    clockid_t clock;
    if (const int rc = clock_getcpuclockid(pid, &clock); rc != 0) {
      throw ProcessGone("process " + std::to_string(pid) + ": " + std::strerror(rc));
    }
    return CpuTarget(clock, pid);
  }

  static CpuTarget thread(pthread_t t) {
    clockid_t clock;
    if (const int rc = pthread_getcpuclockid(t, &clock); rc != 0) {
      throw ProcessGone(std::string("thread: ") + std::strerror(rc));
    }
    return CpuTarget(clock, 0);
  }

  static CpuTarget self() { return CpuTarget(CLOCK_PROCESS_CPUTIME_ID, 0); }

  // Cumulative CPU time consumed so far.
  std::chrono::nanoseconds cpu_time() const {
    if (pid_ > 0 && zombie(pid_)) throw ProcessGone("process " + std::to_string(pid_) + " exited");
    timespec ts{};
    if (clock_gettime(clock_, &ts) != 0) {
      throw ProcessGone(pid_ > 0 ? "process " + std::to_string(pid_) + " exited" : "cpu clock unavailable");
    }
    return std::chrono::seconds(ts.tv_sec) + std::chrono::nanoseconds(ts.tv_nsec);
  }

  pid_t pid() const noexcept { return pid_; }

 private:
  CpuTarget(clockid_t clock, pid_t pid) : clock_(clock), pid_(pid) {}

  static bool zombie(pid_t pid) {
    std::ifstream stat("/proc/" + std::to_string(pid) + "/stat");
    if (!stat) return true;
    std::string line;
    std::getline(stat, line);
    const auto close = line.rfind(')');
    if (close == std::string::npos || close + 2 >= line.size()) return true;
    const char state = line[close + 2];
    return state == 'Z' || state == 'X';
  }

  clockid_t clock_;
  pid_t pid_;
};

struct CpuReading {
  std::chrono::nanoseconds cpu{};
  std::chrono::steady_clock::time_point wall{};
};

struct CpuSample {
  double wall_ts = 0.0;       // unix seconds at the end of the interval
  double cpu_fraction = 0.0;  // cores busy, in [0, core count]
  double interval_s = 0.0;
  std::chrono::steady_clock::time_point begin{}, end{};
};

inline unsigned core_count() noexcept { return std::max(1u, std::thread::hardware_concurrency()); }

// The first call only records a baseline. A zero-length interval yields no
// sample and keeps the previous baseline.
inline std::optional<CpuSample> sample_cpu(const CpuTarget& target, std::optional<CpuReading>& prev) {
  const CpuReading now{target.cpu_time(), std::chrono::steady_clock::now()};
  if (!prev) {
    prev = now;
    return std::nullopt;
  }
  const double wall = std::chrono::duration<double>(now.wall - prev->wall).count();
  if (wall <= 0.0) return std::nullopt;
  const double used = std::chrono::duration<double>(now.cpu - prev->cpu).count();
  CpuSample s;
  s.wall_ts = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
  s.cpu_fraction = std::max(0.0, used / wall);
  s.interval_s = wall;
  s.begin = prev->wall;
  s.end = now.wall;
  prev = now;
  return s;
}

// Whole-host busy fraction from /proc/stat, for saturation checks.
class HostCpu {
 public:
  // Returns busy fraction since the previous call (nullopt on the first).
  std::optional<double> sample() {
    std::ifstream in("/proc/stat");
    std::string label;
    unsigned long long v[8] = {};
    in >> label;
    for (auto& x : v) in >> x;
    if (!in || label != "cpu") return std::nullopt;
    const unsigned long long idle = v[3] + v[4];
    unsigned long long total = 0;
    for (auto x : v) total += x;
    std::optional<double> out;
    if (have_ && total > total_) {
      out = 1.0 - static_cast<double>(idle - idle_) / static_cast<double>(total - total_);
    }
    have_ = true;
    idle_ = idle;
    total_ = total;
    return out;
  }

 private:
  bool have_ = false;
  unsigned long long idle_ = 0, total_ = 0;
};

}  // namespace busgw::cpu
