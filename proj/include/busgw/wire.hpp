#pragma once

// MQTT 3.1.1 control packet codec.
//
// Only the subset of the protocol the gateway needs is modelled: no will
// messages, no username/password (parsed and discarded on CONNECT), no MQTT 5
// properties. Encoding throws WireError on packets that violate their
// invariants; decoding never throws and reports NeedMore / Malformed instead.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace busgw::wire {

using Bytes = std::vector<std::uint8_t>;

enum class QosLevel : std::uint8_t { AtMostOnce = 0, AtLeastOnce = 1, ExactlyOnce = 2 };

inline constexpr std::optional<QosLevel> qos_from_int(unsigned v) noexcept {
  if (v > 2) return std::nullopt;
  return static_cast<QosLevel>(v);
}

inline constexpr unsigned to_int(QosLevel q) noexcept { return static_cast<unsigned>(q); }

inline constexpr QosLevel min_qos(QosLevel a, QosLevel b) noexcept { return to_int(a) < to_int(b) ? a : b; }

enum class PacketType : std::uint8_t {
  Connect = 1,
  Connack = 2,
  Publish = 3,
  Puback = 4,
  Pubrec = 5,
  Pubrel = 6,
  Pubcomp = 7,
  Subscribe = 8,
  Suback = 9,
  Unsubscribe = 10,
  Unsuback = 11,
  Pingreq = 12,
  Pingresp = 13,
  Disconnect = 14,
};

inline constexpr const char* to_string(PacketType t) noexcept {
  switch (t) {
    case PacketType::Connect: return "CONNECT";
    case PacketType::Connack: return "CONNACK";
    case PacketType::Publish: return "PUBLISH";
    case PacketType::Puback: return "PUBACK";
    case PacketType::Pubrec: return "PUBREC";
    case PacketType::Pubrel: return "PUBREL";
    case PacketType::Pubcomp: return "PUBCOMP";
    case PacketType::Subscribe: return "SUBSCRIBE";
    case PacketType::Suback: return "SUBACK";
    case PacketType::Unsubscribe: return "UNSUBSCRIBE";
    case PacketType::Unsuback: return "UNSUBACK";
    case PacketType::Pingreq: return "PINGREQ";
    case PacketType::Pingresp: return "PINGRESP";
    case PacketType::Disconnect: return "DISCONNECT";
  }
  return "UNKNOWN";
}

inline constexpr std::uint32_t kMaxRemainingLength = 268'435'455;
inline constexpr std::uint8_t kProtocolLevel311 = 4;

// CONNACK return codes.
inline constexpr std::uint8_t kConnackAccepted = 0;
inline constexpr std::uint8_t kConnackBadProtocol = 1;
inline constexpr std::uint8_t kConnackIdentifierRejected = 2;
inline constexpr std::uint8_t kConnackServerUnavailable = 3;

inline constexpr std::uint8_t kSubackFailure = 0x80;

struct Connect {
  std::string protocol_name = "MQTT";
  std::uint8_t protocol_level = kProtocolLevel311;
  std::string client_id;
  std::uint16_t keepalive_seconds = 60;
  bool clean_session = true;
  bool operator==(const Connect&) const = default;
};

struct Connack {
  bool session_present = false;
  std::uint8_t return_code = kConnackAccepted;
  bool operator==(const Connack&) const = default;
};

struct Publish {
  std::string topic;
  QosLevel qos = QosLevel::AtMostOnce;
  bool dup = false;
  bool retain = false;
  std::optional<std::uint16_t> packet_id;  // present iff qos > 0
  Bytes payload;
  bool operator==(const Publish&) const = default;
};

struct Puback {
  std::uint16_t packet_id = 0;
  bool operator==(const Puback&) const = default;
};
struct Pubrec {
  std::uint16_t packet_id = 0;
  bool operator==(const Pubrec&) const = default;
};
struct Pubrel {
  std::uint16_t packet_id = 0;
  bool operator==(const Pubrel&) const = default;
};
struct Pubcomp {
  std::uint16_t packet_id = 0;
  bool operator==(const Pubcomp&) const = default;
};

struct Subscription {
  std::string filter;
  QosLevel qos = QosLevel::AtMostOnce;
  bool operator==(const Subscription&) const = default;
};

struct Subscribe {
  std::uint16_t packet_id = 0;
  std::vector<Subscription> subscriptions;
  bool operator==(const Subscribe&) const = default;
};

struct Suback {
  std::uint16_t packet_id = 0;
  std::vector<std::uint8_t> return_codes;
  bool operator==(const Suback&) const = default;
};

struct Unsubscribe {
  std::uint16_t packet_id = 0;
  std::vector<std::string> filters;
  bool operator==(const Unsubscribe&) const = default;
};

struct Unsuback {
  std::uint16_t packet_id = 0;
  bool operator==(const Unsuback&) const = default;
};

struct Pingreq {
  bool operator==(const Pingreq&) const = default;
};
struct Pingresp {
  bool operator==(const Pingresp&) const = default;
};
struct Disconnect {
  bool operator==(const Disconnect&) const = default;
};

// Alternative index + 1 equals the control packet type number.
using Packet = std::variant<Connect, Connack, Publish, Puback, Pubrec, Pubrel, Pubcomp, Subscribe, Suback,
                            Unsubscribe, Unsuback, Pingreq, Pingresp, Disconnect>;

inline PacketType packet_type(const Packet& p) noexcept { return static_cast<PacketType>(p.index() + 1); }

class WireError : public std::runtime_error {
 public:
  enum class Kind { ValueOutOfRange, InvalidPacket };
  WireError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// ---------------------------------------------------------------------------
// Strings and topics

// Well-formed UTF-8 without U+0000, surrogates or overlong forms.
inline bool is_valid_utf8(std::string_view s) noexcept {
  const auto* p = reinterpret_cast<const unsigned char*>(s.data());
  const std::size_t n = s.size();
  std::size_t i = 0;
  while (i < n) {
    const unsigned char c = p[i];
    if (c == 0) return false;
    if (c < 0x80) {
      ++i;
      continue;
    }
    std::size_t len;
    std::uint32_t cp;
    if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > n) return false;
    for (std::size_t k = 1; k < len; ++k) {
      if ((p[i + k] & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (p[i + k] & 0x3F);
    }
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000)) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += len;
  }
  return true;
}

inline bool is_valid_topic_name(std::string_view topic) noexcept {
  if (topic.empty() || topic.size() > 0xFFFF) return false;
  if (topic.find_first_of("+#") != std::string_view::npos) return false;
  return is_valid_utf8(topic);
}

// '#' only as the last level, '+' only as a whole level.
inline bool is_valid_topic_filter(std::string_view filter) noexcept {
  if (filter.empty() || filter.size() > 0xFFFF || !is_valid_utf8(filter)) return false;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = filter.find('/', start);
    const std::string_view level = filter.substr(start, end == std::string_view::npos ? filter.npos : end - start);
    if (level.find_first_of("+#") != std::string_view::npos) {
      if (level.size() != 1) return false;
      if (level == "#" && end != std::string_view::npos) return false;
    }
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Remaining length

inline Bytes encode_remaining_length(std::uint32_t n) {
  if (n > kMaxRemainingLength) {
    throw WireError(WireError::Kind::ValueOutOfRange, "remaining length " + std::to_string(n) + " exceeds 268435455");
  }
  Bytes out;
  do {
    std::uint8_t digit = n % 128;
    n /= 128;
    if (n > 0) digit |= 0x80;
    out.push_back(digit);
  } while (n > 0);
  return out;
}

enum class DecodeStatus { Ok, NeedMore, Malformed };

struct LengthDecode {
  DecodeStatus status = DecodeStatus::NeedMore;
  std::uint32_t value = 0;
  std::size_t consumed = 0;
};

inline LengthDecode decode_remaining_length(std::span<const std::uint8_t> bytes) noexcept {
  std::uint32_t value = 0;
  std::uint32_t multiplier = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    if (i >= bytes.size()) return {DecodeStatus::NeedMore, 0, 0};
    const std::uint8_t b = bytes[i];
    value += (b & 0x7Fu) * multiplier;
    if ((b & 0x80) == 0) return {DecodeStatus::Ok, value, i + 1};
    multiplier *= 128;
  }
  // A continuation bit on the fourth byte would require a fifth.
  return {DecodeStatus::Malformed, 0, 0};
}

// ---------------------------------------------------------------------------
// Encoding

namespace detail {

inline void put_u16(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

inline void put_string(Bytes& out, std::string_view s) {
  put_u16(out, static_cast<std::uint16_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

[[noreturn]] inline void invalid(const std::string& msg) { throw WireError(WireError::Kind::InvalidPacket, msg); }

inline void require_string(std::string_view s, const char* what) {
  if (s.size() > 0xFFFF) invalid(std::string(what) + " longer than 65535 bytes");
  if (!is_valid_utf8(s)) invalid(std::string(what) + " is not valid UTF-8");
}

inline void require_id(std::uint16_t id, const char* what) {
  if (id == 0) invalid(std::string(what) + " packet id must be non-zero");
}

struct BodyEncoder {
  Bytes& body;
  std::uint8_t& flags;

  void operator()(const Connect& c) const {
    require_string(c.protocol_name, "protocol name");
    require_string(c.client_id, "client id");
    put_string(body, c.protocol_name);
    body.push_back(c.protocol_level);
    body.push_back(c.clean_session ? 0x02 : 0x00);
    put_u16(body, c.keepalive_seconds);
    put_string(body, c.client_id);
  }
  void operator()(const Connack& c) const {
    if (c.return_code > 5) invalid("CONNACK return code out of range");
    body.push_back(c.session_present ? 0x01 : 0x00);
    body.push_back(c.return_code);
  }
  void operator()(const Publish& p) const {
    if (!is_valid_topic_name(p.topic)) invalid("PUBLISH topic '" + p.topic + "' is not a valid topic name");
    const bool has_qos = p.qos != QosLevel::AtMostOnce;
    if (has_qos != p.packet_id.has_value()) invalid("PUBLISH packet id must be present iff QoS > 0");
    if (p.packet_id) require_id(*p.packet_id, "PUBLISH");
    if (p.dup && !has_qos) invalid("PUBLISH DUP flag set on QoS 0 message");
    flags = static_cast<std::uint8_t>((p.dup ? 0x08 : 0) | (to_int(p.qos) << 1) | (p.retain ? 0x01 : 0));
    put_string(body, p.topic);
    if (p.packet_id) put_u16(body, *p.packet_id);
    body.insert(body.end(), p.payload.begin(), p.payload.end());
  }
  void operator()(const Puback& a) const { ack(a.packet_id, "PUBACK"); }
  void operator()(const Pubrec& a) const { ack(a.packet_id, "PUBREC"); }
  void operator()(const Pubrel& a) const {
    flags = 0x02;
    ack(a.packet_id, "PUBREL");
  }
  void operator()(const Pubcomp& a) const { ack(a.packet_id, "PUBCOMP"); }
  void operator()(const Subscribe& s) const {
    require_id(s.packet_id, "SUBSCRIBE");
    if (s.subscriptions.empty()) invalid("SUBSCRIBE without topic filters");
    flags = 0x02;
    put_u16(body, s.packet_id);
    for (const auto& sub : s.subscriptions) {
      if (sub.filter.empty()) invalid("empty topic filter");
      require_string(sub.filter, "topic filter");
      put_string(body, sub.filter);
      body.push_back(static_cast<std::uint8_t>(to_int(sub.qos)));
    }
  }
  void operator()(const Suback& s) const {
    require_id(s.packet_id, "SUBACK");
    if (s.return_codes.empty()) invalid("SUBACK without return codes");
    put_u16(body, s.packet_id);
    for (auto rc : s.return_codes) {
      if (rc > 2 && rc != kSubackFailure) invalid("SUBACK return code out of range");
      body.push_back(rc);
    }
  }
  void operator()(const Unsubscribe& u) const {
    require_id(u.packet_id, "UNSUBSCRIBE");
    if (u.filters.empty()) invalid("UNSUBSCRIBE without topic filters");
    flags = 0x02;
    put_u16(body, u.packet_id);
    for (const auto& f : u.filters) {
      if (f.empty()) invalid("empty topic filter");
      require_string(f, "topic filter");
      put_string(body, f);
    }
  }
  void operator()(const Unsuback& u) const { ack(u.packet_id, "UNSUBACK"); }
  void operator()(const Pingreq&) const {}
  void operator()(const Pingresp&) const {}
  void operator()(const Disconnect&) const {}

  void ack(std::uint16_t id, const char* what) const {
    require_id(id, what);
    put_u16(body, id);
  }
};

}  // namespace detail

// Appends the encoded packet to `out`.
inline void encode_packet(const Packet& p, Bytes& out) {
  Bytes body;
  std::uint8_t flags = 0;
  std::visit(detail::BodyEncoder{body, flags}, p);
  if (body.size() > kMaxRemainingLength) detail::invalid("packet body exceeds maximum remaining length");
  const Bytes len = encode_remaining_length(static_cast<std::uint32_t>(body.size()));
  out.reserve(out.size() + 1 + len.size() + body.size());
  out.push_back(static_cast<std::uint8_t>((static_cast<unsigned>(packet_type(p)) << 4) | flags));
  out.insert(out.end(), len.begin(), len.end());
  out.insert(out.end(), body.begin(), body.end());
}

inline Bytes encode_packet(const Packet& p) {
  Bytes out;
  encode_packet(p, out);
  return out;
}

// ---------------------------------------------------------------------------
// Decoding

struct DecodeLimits {
  std::uint32_t max_remaining_length = 1u << 20;
};

struct DecodeResult {
  DecodeStatus status = DecodeStatus::NeedMore;
  Packet packet;
  std::size_t consumed = 0;
  std::string error;

  bool ok() const noexcept { return status == DecodeStatus::Ok; }
};

namespace detail {

// Bounded reader over one packet body; every accessor fails instead of
// reading past the end.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> body) : body_(body) {}

  bool u8(std::uint8_t& v) {
    if (remaining() < 1) return false;
    v = body_[pos_++];
    return true;
  }
  bool u16(std::uint16_t& v) {
    if (remaining() < 2) return false;
    v = static_cast<std::uint16_t>((body_[pos_] << 8) | body_[pos_ + 1]);
    pos_ += 2;
    return true;
  }
  bool str(std::string& s) {
    std::uint16_t len = 0;
    if (!u16(len) || remaining() < len) return false;
    s.assign(reinterpret_cast<const char*>(body_.data() + pos_), len);
    pos_ += len;
    return is_valid_utf8(s);
  }
  bool binary(std::size_t n) {
    if (remaining() < n) return false;
    pos_ += n;
    return true;
  }
  std::span<const std::uint8_t> rest() {
    auto r = body_.subspan(pos_);
    pos_ = body_.size();
    return r;
  }
  std::size_t remaining() const noexcept { return body_.size() - pos_; }
  bool done() const noexcept { return pos_ == body_.size(); }

 private:
  std::span<const std::uint8_t> body_;
  std::size_t pos_ = 0;
};

inline bool ack_body(Reader& r, std::uint16_t& id) { return r.u16(id) && id != 0 && r.done(); }

inline std::optional<Packet> decode_body(PacketType type, std::uint8_t flags, std::span<const std::uint8_t> body,
                                         std::string& error) {
  Reader r(body);
  auto fail = [&](const char* why) -> std::optional<Packet> {
    error = why;
    return std::nullopt;
  };
  switch (type) {
    case PacketType::Connect: {
      Connect c;
      std::uint8_t connect_flags = 0;
      if (!r.str(c.protocol_name) || !r.u8(c.protocol_level) || !r.u8(connect_flags) ||
          !r.u16(c.keepalive_seconds)) {
        return fail("truncated CONNECT variable header");
      }
      if (connect_flags & 0x01) return fail("CONNECT reserved flag set");
      c.clean_session = (connect_flags & 0x02) != 0;
      const bool will = connect_flags & 0x04;
      const unsigned will_qos = (connect_flags >> 3) & 0x03;
      const bool will_retain = connect_flags & 0x20;
      const bool password = connect_flags & 0x40;
      const bool username = connect_flags & 0x80;
      if (!will && (will_qos != 0 || will_retain)) return fail("CONNECT will flags without will");
      if (will_qos > 2) return fail("CONNECT will QoS 3");
      if (password && !username) return fail("CONNECT password without username");
      if (!r.str(c.client_id)) return fail("bad CONNECT client id");
      // Will, username and password are accepted on the wire but unused.
      std::string skipped;
      if (will) {
        std::uint16_t len = 0;
        if (!r.str(skipped) || !r.u16(len) || !r.binary(len)) return fail("bad CONNECT will");
      }
      if (username && !r.str(skipped)) return fail("bad CONNECT username");
      if (password) {
        std::uint16_t len = 0;
        if (!r.u16(len) || !r.binary(len)) return fail("bad CONNECT password");
      }
      if (!r.done()) return fail("trailing bytes after CONNECT");
      return Packet{std::move(c)};
    }
    case PacketType::Connack: {
      Connack c;
      std::uint8_t ack_flags = 0;
      if (!r.u8(ack_flags) || !r.u8(c.return_code) || !r.done()) return fail("bad CONNACK length");
      if (ack_flags & 0xFE) return fail("CONNACK reserved flags set");
      if (c.return_code > 5) return fail("CONNACK return code out of range");
      c.session_present = ack_flags & 0x01;
      return Packet{c};
    }
    case PacketType::Publish: {
      Publish p;
      const unsigned qos = (flags >> 1) & 0x03;
      if (qos == 3) return fail("PUBLISH QoS 3");
      p.qos = static_cast<QosLevel>(qos);
      p.dup = flags & 0x08;
      p.retain = flags & 0x01;
      if (p.dup && qos == 0) return fail("PUBLISH DUP set on QoS 0");
      if (!r.str(p.topic)) return fail("bad PUBLISH topic");
      if (!is_valid_topic_name(p.topic)) return fail("invalid PUBLISH topic name");
      if (qos > 0) {
        std::uint16_t id = 0;
        if (!r.u16(id) || id == 0) return fail("bad PUBLISH packet id");
        p.packet_id = id;
      }
      auto payload = r.rest();
      p.payload.assign(payload.begin(), payload.end());
      return Packet{std::move(p)};
    }
    case PacketType::Puback: {
      Puback a;
      if (!ack_body(r, a.packet_id)) return fail("bad PUBACK");
      return Packet{a};
    }
    case PacketType::Pubrec: {
      Pubrec a;
      if (!ack_body(r, a.packet_id)) return fail("bad PUBREC");
      return Packet{a};
    }
    case PacketType::Pubrel: {
      Pubrel a;
      if (!ack_body(r, a.packet_id)) return fail("bad PUBREL");
      return Packet{a};
    }
    case PacketType::Pubcomp: {
      Pubcomp a;
      if (!ack_body(r, a.packet_id)) return fail("bad PUBCOMP");
      return Packet{a};
    }
    case PacketType::Subscribe: {
      Subscribe s;
      if (!r.u16(s.packet_id) || s.packet_id == 0) return fail("bad SUBSCRIBE packet id");
      while (!r.done()) {
        Subscription sub;
        std::uint8_t q = 0;
        if (!r.str(sub.filter) || sub.filter.empty() || !r.u8(q)) return fail("bad SUBSCRIBE topic filter");
        if (q > 2) return fail("SUBSCRIBE requested QoS out of range");
        sub.qos = static_cast<QosLevel>(q);
        s.subscriptions.push_back(std::move(sub));
      }
      if (s.subscriptions.empty()) return fail("SUBSCRIBE without topic filters");
      return Packet{std::move(s)};
    }
    case PacketType::Suback: {
      Suback s;
      if (!r.u16(s.packet_id) || s.packet_id == 0) return fail("bad SUBACK packet id");
      while (!r.done()) {
        std::uint8_t rc = 0;
        r.u8(rc);
        if (rc > 2 && rc != kSubackFailure) return fail("SUBACK return code out of range");
        s.return_codes.push_back(rc);
      }
      if (s.return_codes.empty()) return fail("SUBACK without return codes");
      return Packet{std::move(s)};
    }
    case PacketType::Unsubscribe: {
      Unsubscribe u;
      if (!r.u16(u.packet_id) || u.packet_id == 0) return fail("bad UNSUBSCRIBE packet id");
      while (!r.done()) {
        std::string f;
        if (!r.str(f) || f.empty()) return fail("bad UNSUBSCRIBE topic filter");
        u.filters.push_back(std::move(f));
      }
      if (u.filters.empty()) return fail("UNSUBSCRIBE without topic filters");
      return Packet{std::move(u)};
    }
    case PacketType::Unsuback: {
      Unsuback u;
      if (!ack_body(r, u.packet_id)) return fail("bad UNSUBACK");
      return Packet{u};
    }
    case PacketType::Pingreq:
      if (!r.done()) return fail("PINGREQ with body");
      return Packet{Pingreq{}};
    case PacketType::Pingresp:
      if (!r.done()) return fail("PINGRESP with body");
      return Packet{Pingresp{}};
    case PacketType::Disconnect:
      if (!r.done()) return fail("DISCONNECT with body");
      return Packet{Disconnect{}};
  }
  return fail("unknown packet type");
}

inline constexpr std::uint8_t required_flags(PacketType t) noexcept {
  switch (t) {
    case PacketType::Pubrel:
    case PacketType::Subscribe:
    case PacketType::Unsubscribe:
      return 0x02;
    default:
      return 0x00;
  }
}

}  // namespace detail

// Incremental decoder: feed the bytes received so far; on Ok, `consumed`
// bytes form exactly one packet.
inline DecodeResult decode_packet(std::span<const std::uint8_t> buffer, const DecodeLimits& limits = {}) {
  DecodeResult result;
  if (buffer.empty()) return result;

  const std::uint8_t first = buffer[0];
  const unsigned type_bits = first >> 4;
  const std::uint8_t flags = first & 0x0F;
  if (type_bits == 0 || type_bits == 15) {
    result.status = DecodeStatus::Malformed;
    result.error = "reserved packet type " + std::to_string(type_bits);
    return result;
  }
  const auto type = static_cast<PacketType>(type_bits);
  if (type != PacketType::Publish && flags != detail::required_flags(type)) {
    result.status = DecodeStatus::Malformed;
    result.error = std::string("invalid fixed header flags for ") + to_string(type);
    return result;
  }
  if (type == PacketType::Publish && ((flags >> 1) & 0x03) == 3) {
    result.status = DecodeStatus::Malformed;
    result.error = "PUBLISH QoS 3";
    return result;
  }

  const LengthDecode len = decode_remaining_length(buffer.subspan(1));
  if (len.status != DecodeStatus::Ok) {
    result.status = len.status;
    if (len.status == DecodeStatus::Malformed) result.error = "malformed remaining length";
    return result;
  }
  if (len.value > limits.max_remaining_length) {
    result.status = DecodeStatus::Malformed;
    result.error = "remaining length " + std::to_string(len.value) + " exceeds limit";
    return result;
  }
  const std::size_t header = 1 + len.consumed;
  if (buffer.size() - header < len.value) return result;  // NeedMore

  auto packet = detail::decode_body(type, flags, buffer.subspan(header, len.value), result.error);
  if (!packet) {
    result.status = DecodeStatus::Malformed;
    return result;
  }
  result.status = DecodeStatus::Ok;
  result.packet = std::move(*packet);
  result.consumed = header + len.value;
  return result;
}

// Human-readable one-line summary, for logs and test failure messages.
inline std::string describe(const Packet& p) {
  std::string s = to_string(packet_type(p));
  if (const auto* pub = std::get_if<Publish>(&p)) {
    s += " topic=" + pub->topic + " qos=" + std::to_string(to_int(pub->qos));
    if (pub->packet_id) s += " id=" + std::to_string(*pub->packet_id);
    if (pub->dup) s += " dup";
    s += " bytes=" + std::to_string(pub->payload.size());
  } else if (const auto* a = std::get_if<Puback>(&p)) {
    s += " id=" + std::to_string(a->packet_id);
  } else if (const auto* a = std::get_if<Pubrec>(&p)) {
    s += " id=" + std::to_string(a->packet_id);
  } else if (const auto* a = std::get_if<Pubrel>(&p)) {
    s += " id=" + std::to_string(a->packet_id);
  } else if (const auto* a = std::get_if<Pubcomp>(&p)) {
    s += " id=" + std::to_string(a->packet_id);
  } else if (const auto* c = std::get_if<Connect>(&p)) {
    s += " client_id=" + c->client_id;
  } else if (const auto* c = std::get_if<Connack>(&p)) {
    s += " rc=" + std::to_string(c->return_code);
  }
  return s;
}

}  // namespace busgw::wire
