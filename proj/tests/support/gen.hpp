#pragma once

// Random generators for property tests.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "busgw/wire.hpp"

namespace gen {

using namespace busgw;
using Rng = std::mt19937_64;

inline std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline bool coin(Rng& rng, double p = 0.5) { return std::bernoulli_distribution(p)(rng); }

inline wire::Bytes bytes(Rng& rng, std::size_t max_len) {
  wire::Bytes b(uniform(rng, 0, max_len));
  for (auto& x : b) x = static_cast<std::uint8_t>(rng());
  return b;
}

// Printable ASCII plus some multi-byte UTF-8, never '+', '#' or U+0000.
inline std::string utf8_text(Rng& rng, std::size_t max_len, bool allow_slash) {
  static const std::vector<std::string> extra{"\xC3\xA9", "\xE2\x82\xAC", "\xF0\x9F\x9A\x8C", "\xE6\x97\xA5"};
  std::string s;
  const std::size_t n = uniform(rng, 0, max_len);
  while (s.size() < n) {
    if (coin(rng, 0.1)) {
      s += extra[uniform(rng, 0, extra.size() - 1)];
      continue;
    }
    char c = static_cast<char>(uniform(rng, 0x20, 0x7E));
    if (c == '+' || c == '#' || (!allow_slash && c == '/')) c = 'a';
    s += c;
  }
  return s;
}

inline std::string topic_name(Rng& rng) {
  std::string t = utf8_text(rng, 40, true);
  if (t.empty()) t = "t";
  return t;
}

inline std::string topic_filter(Rng& rng) {
  const std::size_t levels = uniform(rng, 1, 5);
  std::string f;
  for (std::size_t i = 0; i < levels; ++i) {
    if (i > 0) f += '/';
    const auto pick = uniform(rng, 0, 9);
    if (pick == 0) {
      f += '+';
    } else if (pick == 1 && i + 1 == levels) {
      f += '#';
    } else {
      f += utf8_text(rng, 8, false);
    }
  }
  if (f.empty()) f = "t";
  return f;
}

inline std::uint16_t packet_id(Rng& rng) { return static_cast<std::uint16_t>(uniform(rng, 1, 65535)); }

inline wire::QosLevel qos(Rng& rng) { return static_cast<wire::QosLevel>(uniform(rng, 0, 2)); }

// Any packet that satisfies the encoder's invariants.
inline wire::Packet packet(Rng& rng) {
  switch (uniform(rng, 1, 14)) {
    case 1: {
      wire::Connect c;
      c.client_id = utf8_text(rng, 23, true);
      c.keepalive_seconds = static_cast<std::uint16_t>(rng());
      c.clean_session = coin(rng);
      c.protocol_level = coin(rng, 0.9) ? 4 : static_cast<std::uint8_t>(rng());
      return c;
    }
    case 2: return wire::Connack{coin(rng), static_cast<std::uint8_t>(uniform(rng, 0, 5))};
    case 3: {
      wire::Publish p;
      p.topic = topic_name(rng);
      p.qos = qos(rng);
      p.retain = coin(rng);
      if (p.qos != wire::QosLevel::AtMostOnce) {
        p.packet_id = packet_id(rng);
        p.dup = coin(rng);
      }
      p.payload = bytes(rng, coin(rng, 0.05) ? 70000 : 64);
      return p;
    }
    case 4: return wire::Puback{packet_id(rng)};
    case 5: return wire::Pubrec{packet_id(rng)};
    case 6: return wire::Pubrel{packet_id(rng)};
    case 7: return wire::Pubcomp{packet_id(rng)};
    case 8: {
      wire::Subscribe s{packet_id(rng), {}};
      const auto n = uniform(rng, 1, 6);
      for (std::size_t i = 0; i < n; ++i) s.subscriptions.push_back({topic_filter(rng), qos(rng)});
      return s;
    }
    case 9: {
      wire::Suback s{packet_id(rng), {}};
      const auto n = uniform(rng, 1, 6);
      static const std::uint8_t codes[] = {0, 1, 2, 0x80};
      for (std::size_t i = 0; i < n; ++i) s.return_codes.push_back(codes[uniform(rng, 0, 3)]);
      return s;
    }
    case 10: {
      wire::Unsubscribe u{packet_id(rng), {}};
      const auto n = uniform(rng, 1, 6);
      for (std::size_t i = 0; i < n; ++i) u.filters.push_back(topic_filter(rng));
      return u;
    }
    case 11: return wire::Unsuback{packet_id(rng)};
    case 12: return wire::Pingreq{};
    case 13: return wire::Pingresp{};
    default: return wire::Disconnect{};
  }
}

}  // namespace gen
