#include <gtest/gtest.h>

#include <random>

#include "busgw/wire.hpp"
#include "support/gen.hpp"

using namespace busgw::wire;

TEST(RemainingLength, EncodesBoundaries) {
  EXPECT_EQ(encode_remaining_length(0), (Bytes{0x00}));
  EXPECT_EQ(encode_remaining_length(127), (Bytes{0x7F}));
  EXPECT_EQ(encode_remaining_length(128), (Bytes{0x80, 0x01}));
  EXPECT_EQ(encode_remaining_length(321), (Bytes{0xC1, 0x02}));
  EXPECT_EQ(encode_remaining_length(kMaxRemainingLength), (Bytes{0xFF, 0xFF, 0xFF, 0x7F}));
  EXPECT_THROW(encode_remaining_length(kMaxRemainingLength + 1), WireError);
}

TEST(RemainingLength, Decodes) {
  const Bytes zero{0x00};
  auto r = decode_remaining_length(zero);
  EXPECT_EQ(r.status, DecodeStatus::Ok);
  EXPECT_EQ(r.value, 0u);
  EXPECT_EQ(r.consumed, 1u);
  const Bytes two{0xC1, 0x02};
  r = decode_remaining_length(two);
  EXPECT_EQ(r.value, 321u);
  EXPECT_EQ(r.consumed, 2u);
  const Bytes overflow{0xFF, 0xFF, 0xFF, 0xFF, 0x01};
  EXPECT_EQ(decode_remaining_length(overflow).status, DecodeStatus::Malformed);
  const Bytes partial{0x80};
  EXPECT_EQ(decode_remaining_length(partial).status, DecodeStatus::NeedMore);
}

TEST(RemainingLength, BijectionOnSampledRange) {
  std::mt19937_64 rng(7);
  std::vector<std::uint32_t> values{0, 1, 127, 128, 16383, 16384, 2097151, 2097152, kMaxRemainingLength};
  for (int i = 0; i < 20000; ++i) values.push_back(static_cast<std::uint32_t>(rng() % (kMaxRemainingLength + 1ull)));
  for (auto v : values) {
    const Bytes b = encode_remaining_length(v);
    const auto r = decode_remaining_length(b);
    ASSERT_EQ(r.status, DecodeStatus::Ok);
    ASSERT_EQ(r.value, v);
    ASSERT_EQ(r.consumed, b.size());
  }
}

TEST(Encode, PingreqAndMinimalPublish) {
  EXPECT_EQ(encode_packet(Pingreq{}), (Bytes{0xC0, 0x00}));
  Publish p;
  p.topic = "a";
  EXPECT_EQ(encode_packet(p), (Bytes{0x30, 0x03, 0x00, 0x01, 0x61}));
}

TEST(Encode, RejectsInvariantViolations) {
  Publish p;
  p.topic = "a";
  p.qos = QosLevel::AtLeastOnce;
  EXPECT_THROW(encode_packet(p), WireError);  // missing packet id
  p.packet_id = 0;
  EXPECT_THROW(encode_packet(p), WireError);
  p.qos = QosLevel::AtMostOnce;
  p.packet_id = 5;
  EXPECT_THROW(encode_packet(p), WireError);
  p.packet_id.reset();
  p.dup = true;
  EXPECT_THROW(encode_packet(p), WireError);
  p.dup = false;
  p.topic = "a/+";
  EXPECT_THROW(encode_packet(p), WireError);
  EXPECT_THROW(encode_packet(Subscribe{1, {}}), WireError);
  EXPECT_THROW(encode_packet(Unsubscribe{1, {}}), WireError);
}

TEST(Decode, PartialAndReserved) {
  const Bytes truncated{0x30};
  EXPECT_EQ(decode_packet(truncated).status, DecodeStatus::NeedMore);
  const Bytes reserved{0x00, 0x00};
  EXPECT_EQ(decode_packet(reserved).status, DecodeStatus::Malformed);
  const Bytes reserved15{0xF0, 0x00};
  EXPECT_EQ(decode_packet(reserved15).status, DecodeStatus::Malformed);
  const Bytes bad_pubrel_flags{0x60, 0x02, 0x00, 0x01};
  EXPECT_EQ(decode_packet(bad_pubrel_flags).status, DecodeStatus::Malformed);
  const Bytes qos3{0x36, 0x05, 0x00, 0x01, 0x61, 0x00, 0x01};
  EXPECT_EQ(decode_packet(qos3).status, DecodeStatus::Malformed);
}

TEST(Decode, RespectsLengthLimit) {
  Publish p;
  p.topic = "big";
  p.payload.assign(2000, 0x55);
  const Bytes b = encode_packet(p);
  EXPECT_EQ(decode_packet(b, DecodeLimits{1024}).status, DecodeStatus::Malformed);
  EXPECT_TRUE(decode_packet(b).ok());
}

TEST(Decode, ConnectWithWillAndCredentialsParses) {
  // CONNECT, level 4, flags: will (qos1) + username + password, keepalive 10.
  Bytes b{0x10, 0x00, 0x00, 0x04, 'M', 'Q', 'T', 'T', 0x04, 0xCE, 0x00, 0x0A, 0x00, 0x01, 'c',
          0x00, 0x01, 'w', 0x00, 0x01, 'x', 0x00, 0x01, 'u', 0x00, 0x01, 'p'};
  b[1] = static_cast<std::uint8_t>(b.size() - 2);
  const auto r = decode_packet(b);
  ASSERT_TRUE(r.ok()) << r.error;
  const auto& c = std::get<Connect>(r.packet);
  EXPECT_EQ(c.client_id, "c");
  EXPECT_EQ(c.keepalive_seconds, 10);
  EXPECT_TRUE(c.clean_session);
}

TEST(Property, RoundtripOfGeneratedPackets) {
  gen::Rng rng(20240601);
  for (int i = 0; i < 10000; ++i) {
    const Packet p = gen::packet(rng);
    const Bytes b = encode_packet(p);
    const auto r = decode_packet(b);
    ASSERT_TRUE(r.ok()) << describe(p) << ": " << r.error;
    ASSERT_EQ(r.consumed, b.size());
    ASSERT_EQ(r.packet, p) << describe(p);
  }
}

TEST(Property, ConcatenatedStreamSplitsBack) {
  gen::Rng rng(99);
  std::vector<Packet> packets;
  Bytes stream;
  for (int i = 0; i < 200; ++i) {
    packets.push_back(gen::packet(rng));
    encode_packet(packets.back(), stream);
  }
  std::size_t pos = 0;
  for (const auto& expected : packets) {
    const auto r = decode_packet(std::span<const std::uint8_t>(stream).subspan(pos));
    ASSERT_TRUE(r.ok());
    ASSERT_EQ(r.packet, expected);
    pos += r.consumed;
  }
  EXPECT_EQ(pos, stream.size());
}

TEST(Fuzz, DecoderSurvivesRandomAndMutatedInput) {
  gen::Rng rng(4242);
  std::size_t ok = 0, need = 0, bad = 0;
  for (int i = 0; i < 200000; ++i) {
    Bytes b;
    if (i % 2 == 0) {
      b = gen::bytes(rng, 64);
    } else {
      b = encode_packet(gen::packet(rng));
      const auto flips = gen::uniform(rng, 1, 4);
      for (std::size_t k = 0; k < flips && !b.empty(); ++k) b[gen::uniform(rng, 0, b.size() - 1)] ^= static_cast<std::uint8_t>(rng());
      if (gen::coin(rng, 0.3)) b.resize(gen::uniform(rng, 0, b.size()));
    }
    const auto r = decode_packet(b);
    ASSERT_LE(r.consumed, b.size());
    switch (r.status) {
      case DecodeStatus::Ok: ++ok; break;
      case DecodeStatus::NeedMore: ++need; break;
      case DecodeStatus::Malformed: ++bad; break;
    }
  }
  EXPECT_GT(ok, 0u);
  EXPECT_GT(need, 0u);
  EXPECT_GT(bad, 0u);
}

TEST(Validation, TopicNamesAndFilters) {
  EXPECT_TRUE(is_valid_topic_filter("city/bus/#"));
  EXPECT_TRUE(is_valid_topic_filter("+/+/x"));
  EXPECT_FALSE(is_valid_topic_filter("a/#/b"));
  EXPECT_FALSE(is_valid_topic_filter("a+/b"));
  EXPECT_FALSE(is_valid_topic_filter(""));
  EXPECT_TRUE(is_valid_topic_name("city/bus/1"));
  EXPECT_FALSE(is_valid_topic_name("city/+"));
  EXPECT_FALSE(is_valid_topic_name(""));
  EXPECT_FALSE(is_valid_utf8("\xC0\x80"));
  EXPECT_FALSE(is_valid_utf8(std::string("a\0b", 3)));
}
