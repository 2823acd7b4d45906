#include <gtest/gtest.h>

#include <random>

#include "busgw/geo.hpp"
#include "support/oracles.hpp"

using namespace busgw::geo;

TEST(Haversine, IdentityAndEquatorialDegree) {
  EXPECT_EQ(haversine_m({-8.05, -34.9}, {-8.05, -34.9}), 0.0);
  EXPECT_NEAR(haversine_m({0, 0}, {0, 1}), 111194.93, 0.01);
  EXPECT_NEAR(haversine_m({0, 0}, {0, 1}), oracle::equatorial_degree_m(), 1e-6);
}

TEST(Haversine, TriangleInequalityAndSymmetry) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> lat(-90, 90), lon(-180, 180);
  for (int i = 0; i < 20000; ++i) {
    const LatLon a{lat(rng), lon(rng)}, b{lat(rng), lon(rng)}, c{lat(rng), lon(rng)};
    const double ab = haversine_m(a, b), bc = haversine_m(b, c), ac = haversine_m(a, c);
    ASSERT_LE(ac, (ab + bc) * (1 + 1e-9) + 1e-9);
    ASSERT_NEAR(ab, haversine_m(b, a), 1e-6);
  }
}

namespace {

Route line() { return Route("L", {{0.0, 0.0}, {0.0, 0.01}, {0.01, 0.01}}, false); }

}  // namespace

TEST(Route, RejectsBadGeometry) {
  EXPECT_THROW(Route("r", {{0, 0}}, false), GeoError);
  EXPECT_THROW(Route("r", {{0, 0}, {0, 0}}, false), GeoError);
  EXPECT_THROW(Route("r", {{0, 0}, {91, 0}}, false), GeoError);
  EXPECT_THROW(Route("r", {{0, 0}, {0, 1}, {0, 0}}, true), GeoError);
}

TEST(Advance, ZeroDtKeepsPosition) {
  const auto r = line();
  const auto a = advance_along_route(r, {0, 0.25}, 10.0, 0.0, 5);
  EXPECT_EQ(a.position.segment, 0u);
  EXPECT_DOUBLE_EQ(a.position.fraction, 0.25);
  EXPECT_EQ(a.fix.timestamp_ms, 5);
}

TEST(Advance, ExactSegmentLengthLandsOnNextSegment) {
  const auto r = line();
  const auto a = advance_along_route(r, {0, 0.0}, r.segment_length(0), 1.0, 0);
  EXPECT_EQ(a.position.segment, 1u);
  EXPECT_DOUBLE_EQ(a.position.fraction, 0.0);
}

TEST(Advance, NonLoopClampsAtEnd) {
  const auto r = line();
  auto a = advance_along_route(r, {0, 0.0}, 100.0, 1e6, 0);
  EXPECT_EQ(a.position.segment, r.segment_count() - 1);
  EXPECT_DOUBLE_EQ(a.position.fraction, 1.0);
  const auto b = advance_along_route(r, a.position, 100.0, 10.0, 1);
  EXPECT_EQ(b.fix.latitude, a.fix.latitude);
  EXPECT_EQ(b.fix.longitude, a.fix.longitude);
}

TEST(Advance, LoopWrapsAround) {
  const Route r("c", {{0, 0}, {0, 0.01}, {0.01, 0.01}}, true);
  EXPECT_EQ(r.segment_count(), 3u);
  const auto a = advance_along_route(r, {0, 0.0}, 1.0, r.total_length() * 2.5, 0);
  EXPECT_NEAR(distance_along(r, a.position), r.total_length() * 0.5, 1e-6);
}

TEST(Advance, AdditivityOfSmallSteps) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> dt(0.0, 3.0);
  for (bool loop : {false, true}) {
    const Route r("r", {{-8.06, -34.87}, {-8.061, -34.873}, {-8.058, -34.875}, {-8.055, -34.872}}, loop);
    for (int trial = 0; trial < 200; ++trial) {
      RoutePosition stepped{};
      double total = 0.0;
      for (int i = 0; i < 50; ++i) {
        const double d = dt(rng);
        total += d;
        stepped = advance_along_route(r, stepped, 7.5, d, 0).position;
      }
      const auto once = advance_along_route(r, {}, 7.5, total, 0).position;
      const double a = distance_along(r, stepped), b = distance_along(r, once);
      ASSERT_NEAR(a, b, 1e-6 * std::max(1.0, r.total_length()));
    }
  }
}

TEST(Proximity, CrossingsAndHysteresis) {
  const Stop stop{"stop-1", {0.0, 0.0}, 100.0};
  auto at = [](double metres) { return GpsFix{0.0, metres / oracle::equatorial_degree_m(), 0}; };
  auto in = proximity_step(false, at(50), "b", stop, 0.1);
  ASSERT_TRUE(in.event);
  EXPECT_EQ(in.event->kind, ProximityKind::Entered);
  EXPECT_TRUE(in.inside);
  auto hold = proximity_step(true, at(105), "b", stop, 0.1);
  EXPECT_FALSE(hold.event);
  EXPECT_TRUE(hold.inside);
  auto out = proximity_step(true, at(150), "b", stop, 0.1);
  ASSERT_TRUE(out.event);
  EXPECT_EQ(out.event->kind, ProximityKind::Exited);
  EXPECT_FALSE(out.inside);
}

TEST(Proximity, EventsAlternateOnRandomWalks) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> step(0.0, 40.0);
  const Stop stop{"s", {0.0, 0.0}, 100.0};
  for (int walk = 0; walk < 200; ++walk) {
    double x = 0, y = 300;
    bool inside = false;
    std::optional<ProximityKind> last;
    for (int i = 0; i < 500; ++i) {
      x += step(rng);
      y += step(rng);
      const GpsFix f{y / oracle::equatorial_degree_m(), x / oracle::equatorial_degree_m(), i};
      const auto s = proximity_step(inside, f, "b", stop, 0.1);
      inside = s.inside;
      if (!s.event) continue;
      if (!last) {
        ASSERT_EQ(s.event->kind, ProximityKind::Entered);
      } else {
        ASSERT_NE(s.event->kind, *last);
      }
      last = s.event->kind;
    }
  }
}

TEST(Json, RouteAndStopRoundtrip) {
  const Route r("centro", {{-8.06, -34.87}, {-8.05, -34.86}}, true);
  const Route back = route_from_json(to_json(r));
  EXPECT_EQ(back.id(), "centro");
  EXPECT_TRUE(back.loop());
  EXPECT_EQ(back.waypoints().size(), 2u);
  const Stop s{"stop-9", {-8.06, -34.87}, 80.0};
  const Stop sb = stop_from_json(to_json(s));
  EXPECT_EQ(sb.stop_id, "stop-9");
  EXPECT_DOUBLE_EQ(sb.radius_m, 80.0);
  EXPECT_THROW(stop_from_json(nlohmann::json{{"stop_id", "x"}, {"lat", 0}, {"lon", 0}, {"radius_m", -1}}), GeoError);
}
