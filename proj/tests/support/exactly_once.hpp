#pragma once

// Randomized duplication/reordering of QoS 2 publisher streams through the
// in-memory network, checking each subscriber sees every message once.

#include <algorithm>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "busgw/loopback.hpp"

namespace exactly_once {

using namespace busgw;

struct CaseResult {
  bool ok = true;
  std::string detail;
  std::size_t messages = 0;
  std::size_t deliveries = 0;
};

inline CaseResult run_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  auto chance = [&](double p) { return std::bernoulli_distribution(p)(rng); };

  broker::BrokerConfig config;
  config.max_inflight = pick(1, 8);
  loopback::Loopback net(config);
  const auto steady = net.open({"steady", 0, true});
  const auto flaky = net.open({"flaky", 0, true});
  net.subscribe(steady, {{"city/bus/#", wire::QosLevel::ExactlyOnce}});
  net.subscribe(flaky, {{"city/bus/+/+/telemetry", wire::QosLevel::ExactlyOnce}});
  const auto pub = net.open({"pub", 0, true});
  net.set_auto_reply(pub, false);
  net.pump();

  struct Op {
    std::size_t msg;
    bool release;
  };
  const std::size_t n = pick(1, 40);
  std::vector<std::uint16_t> ids;
  while (ids.size() < n) {
    const auto id = static_cast<std::uint16_t>(pick(1, 65535));
    if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
  }
  std::vector<std::vector<Op>> scripts(n);
  for (std::size_t m = 0; m < n; ++m) {
    const std::size_t publishes = 1 + (chance(0.5) ? pick(1, 3) : 0);
    const std::size_t releases = 1 + (chance(0.3) ? pick(1, 2) : 0);
    for (std::size_t i = 0; i < publishes; ++i) scripts[m].push_back({m, false});
    for (std::size_t i = 0; i < releases; ++i) scripts[m].push_back({m, true});
  }
  std::vector<std::size_t> cursor(n, 0);
  std::vector<std::size_t> sent_publishes(n, 0);
  std::size_t flaky_silent = 0;
  std::size_t remaining = 0;
  for (const auto& s : scripts) remaining += s.size();

  while (remaining > 0) {
    std::size_t m = pick(0, n - 1);
    while (cursor[m] == scripts[m].size()) m = (m + 1) % n;
    const Op op = scripts[m][cursor[m]++];
    --remaining;
    if (op.release) {
      net.send_raw(pub, wire::Pubrel{ids[m]});
    } else {
      wire::Publish p;
      p.topic = "city/bus/r" + std::to_string(m % 3) + "/bus-" + std::to_string(m % 5) + "/telemetry";
      p.qos = wire::QosLevel::ExactlyOnce;
      p.packet_id = ids[m];
      p.dup = sent_publishes[m]++ > 0;
      p.payload = wire::Bytes{'m', static_cast<std::uint8_t>(m)};
      net.send_raw(pub, p);
    }
    if (chance(0.5)) net.pump();
    if (chance(0.1)) {
      // The flaky subscriber stops acknowledging for at most two retransmit rounds.
      if (flaky_silent == 0 && chance(0.5)) {
        net.set_auto_reply(flaky, false);
        flaky_silent = pick(1, 2);
      }
      net.advance(std::chrono::seconds(6));
      if (flaky_silent > 0 && --flaky_silent == 0) {
        // One answered round before silence may start again, so no flow
        // exhausts its retries.
        net.set_auto_reply(flaky, true);
        net.advance(std::chrono::seconds(6));
      }
    }
  }
  net.set_auto_reply(flaky, true);
  net.pump();
  for (int i = 0; i < 4; ++i) net.advance(std::chrono::seconds(6));

  CaseResult r;
  r.messages = n;
  for (auto h : {steady, flaky}) {
    std::map<std::uint8_t, std::size_t> seen;
    for (const auto& msg : net.take_messages(h)) {
      ++r.deliveries;
      if (msg.payload.size() != 2) {
        r.ok = false;
        r.detail = "unexpected payload";
        continue;
      }
      ++seen[msg.payload[1]];
    }
    for (std::size_t m = 0; m < n; ++m) {
      const auto count = seen.count(static_cast<std::uint8_t>(m)) ? seen[static_cast<std::uint8_t>(m)] : 0;
      if (count != 1) {
        r.ok = false;
        r.detail = "seed " + std::to_string(seed) + ": message " + std::to_string(m) + " delivered " +
                   std::to_string(count) + " times to " + (h == steady ? "steady" : "flaky");
      }
    }
    if (seen.size() != n) r.ok = false;
    const auto* s = net.broker().session_for(h);
    if (s == nullptr || !s->inflight_outbound.empty() || !s->queued.empty()) {
      r.ok = false;
      if (r.detail.empty()) r.detail = "seed " + std::to_string(seed) + ": outbound state left behind";
    }
    if (net.session(h).inflight() != 0 || net.session(h).pending_releases() != 0) {
      r.ok = false;
      if (r.detail.empty()) r.detail = "seed " + std::to_string(seed) + ": subscriber state left behind";
    }
  }
  const auto* ps = net.broker().session_for(pub);
  if (ps == nullptr || !ps->qos2_inbound.empty()) {
    r.ok = false;
    if (r.detail.empty()) r.detail = "seed " + std::to_string(seed) + ": inbound ids not released";
  }
  return r;
}

}  // namespace exactly_once
