#include "support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace isac;

namespace {

RoadGeometry straight_x()
{
    return fit_spline(std::vector<ControlPoint>{{0, 0}, {50, 0}, {100, 0}}, 6.0);
}

// Centerline position by brute force from the spline pieces, independent of
// the arc-length inversion.
CartesianPoint piece_point(const SplineSegment& seg, double rho)
{
    return {detail::cubic(seg.a, rho), detail::cubic(seg.b, rho)};
}

} // namespace

TEST(RoadGeometry, CollinearPointsGiveStraightLine)
{
    const RoadGeometry road = straight_x();
    EXPECT_NEAR(road.total_length(), 100.0, 1e-9);
    for (double s = 0.0; s <= 100.0; s += 7.5) {
        const auto tc = tangent_and_curvature(road, s);
        EXPECT_NEAR(tc.alpha, 0.0, 1e-12);
        EXPECT_NEAR(tc.dalpha_ds, 0.0, 1e-12);
    }
}

TEST(RoadGeometry, StraightRoadCcsIsCartesian)
{
    const RoadGeometry road = straight_x();
    const CartesianPoint p = ccs_to_cartesian(road, {10.0, 2.0});
    EXPECT_NEAR(p.x, 10.0, 1e-9);
    EXPECT_NEAR(p.y, 2.0, 1e-9);
    const CartesianPoint c = ccs_to_cartesian(road, {10.0, 0.0});
    EXPECT_NEAR(c.x, 10.0, 1e-9);
    EXPECT_NEAR(c.y, 0.0, 1e-9);
    const CcsPoint back = cartesian_to_ccs(road, {10.0, 2.0});
    EXPECT_NEAR(back.s, 10.0, 1e-9);
    EXPECT_NEAR(back.n, 2.0, 1e-9);
}

TEST(RoadGeometry, RoadAlongYHasQuarterTurnTangent)
{
    const RoadGeometry road = fit_spline(std::vector<ControlPoint>{{0, 0}, {0, 40}, {0, 80}}, 6.0);
    EXPECT_NEAR(tangent_and_curvature(road, 33.0).alpha, kPi / 2, 1e-12);
}

TEST(RoadGeometry, NinePointArcLength)
{
    // Half circle of radius 50: analytic length 50 pi.
    const RoadGeometry road = fit_spline(test::circle_points(50.0, 0.0, kPi, 9), 6.0);
    EXPECT_NEAR(road.total_length(), 50.0 * kPi, 0.01 * 50.0 * kPi);
}

TEST(RoadGeometry, ArcLengthMatchesDenseChordSum)
{
    const RoadGeometry road = test::country_road();
    for (const auto& seg : road.segments()) {
        double chord = 0.0;
        CartesianPoint prev = piece_point(seg, 0.0);
        constexpr int steps = 20000;
        for (int k = 1; k <= steps; ++k) {
            const CartesianPoint p = piece_point(seg, static_cast<double>(k) / steps);
            chord += std::hypot(p.x - prev.x, p.y - prev.y);
            prev = p;
        }
        EXPECT_NEAR(seg.length, chord, 1e-6 * seg.length);
    }
}

TEST(RoadGeometry, SixteenPointRingStaysOnCircle)
{
    // Natural end conditions force zero curvature at a free end, which pulls
    // the two end pieces of an open arc ~0.17 m off the circle; the bound
    // holds from the second piece inwards.
    const RoadGeometry road = fit_spline(test::circle_points(50.0, -kPi / 2, -kPi / 2 + 15.0 * kPi / 12.0, 16), 6.0);
    const auto& segs = road.segments();
    ASSERT_EQ(segs.size(), 15u);
    double interior = 0.0;
    double ends = 0.0;
    for (std::size_t i = 0; i < segs.size(); ++i) {
        for (int k = 0; k <= 400; ++k) {
            const CartesianPoint p = piece_point(segs[i], k / 400.0);
            double& worst = (i == 0 || i + 1 == segs.size()) ? ends : interior;
            worst = std::max(worst, std::abs(std::hypot(p.x, p.y) - 50.0));
        }
    }
    EXPECT_LT(interior, 0.1);
    EXPECT_LT(ends, 0.2);
}

TEST(RoadGeometry, CircleArcPoints)
{
    // Arc-length error from the free start end shrinks with the cube of the
    // knot spacing: 6.6 mm at 25 points, 0.8 mm at 49.
    const RoadGeometry road = fit_spline(test::circle_points(50.0, 0.0, 1.5 * kPi, 49), 6.0);
    const CartesianPoint quarter = ccs_to_cartesian(road, {25.0 * kPi, 0.0});
    EXPECT_NEAR(quarter.x, 0.0, 1e-3);
    EXPECT_NEAR(quarter.y, 50.0, 1e-3);
    const CartesianPoint half = ccs_to_cartesian(road, {50.0 * kPi, 0.0});
    EXPECT_NEAR(half.x, -50.0, 1e-3);
    EXPECT_NEAR(half.y, 0.0, 1e-3);
}

TEST(RoadGeometry, CircleLateralOffsetSign)
{
    // Counter-clockwise travel: the left normal points at the centre.
    const RoadGeometry road = fit_spline(test::circle_points(50.0, 0.0, 1.5 * kPi, 25), 6.0);
    const double a = 0.8;
    EXPECT_NEAR(cartesian_to_ccs(road, {48.0 * std::cos(a), 48.0 * std::sin(a)}).n, 2.0, 1e-3);
    EXPECT_NEAR(cartesian_to_ccs(road, {52.0 * std::cos(a), 52.0 * std::sin(a)}).n, -2.0, 1e-3);
}

TEST(RoadGeometry, CircleCurvature)
{
    const RoadGeometry road = fit_spline(test::circle_points(50.0, 0.0, 1.5 * kPi, 25), 6.0);
    for (double s = 40.0; s < road.total_length() - 40.0; s += 9.0) {
        EXPECT_NEAR(tangent_and_curvature(road, s).dalpha_ds, 0.02, 1e-4) << "s = " << s;
    }
}

TEST(RoadGeometry, SplineIsTwiceContinuousAtJoins)
{
    for (const RoadGeometry& road : {test::country_road(), test::roundabout_road()}) {
        const auto& segs = road.segments();
        for (std::size_t i = 1; i < segs.size(); ++i) {
            const auto& a = segs[i - 1];
            const auto& b = segs[i];
            EXPECT_NEAR(detail::cubic(a.a, 1.0), detail::cubic(b.a, 0.0), 1e-8);
            EXPECT_NEAR(detail::cubic(a.b, 1.0), detail::cubic(b.b, 0.0), 1e-8);
            // Chord-length knots: derivatives in rho scale with the knot spacing.
            const double ha = std::hypot(detail::cubic(a.a, 1.0) - detail::cubic(a.a, 0.0),
                                         detail::cubic(a.b, 1.0) - detail::cubic(a.b, 0.0));
            const double hb = std::hypot(detail::cubic(b.a, 1.0) - detail::cubic(b.a, 0.0),
                                         detail::cubic(b.b, 1.0) - detail::cubic(b.b, 0.0));
            EXPECT_NEAR(detail::cubic_d1(a.a, 1.0) / ha, detail::cubic_d1(b.a, 0.0) / hb, 1e-8);
            EXPECT_NEAR(detail::cubic_d1(a.b, 1.0) / ha, detail::cubic_d1(b.b, 0.0) / hb, 1e-8);
            EXPECT_NEAR(detail::cubic_d2(a.a, 1.0) / (ha * ha), detail::cubic_d2(b.a, 0.0) / (hb * hb), 1e-8);
            EXPECT_NEAR(detail::cubic_d2(a.b, 1.0) / (ha * ha), detail::cubic_d2(b.b, 0.0) / (hb * hb), 1e-8);
            EXPECT_NEAR(b.s_start, a.s_start + a.length, 1e-9);
        }
        EXPECT_NEAR(road.total_length(), segs.back().s_start + segs.back().length, 1e-9);
        // Natural end conditions.
        EXPECT_NEAR(detail::cubic_d2(segs.front().a, 0.0), 0.0, 1e-9);
        EXPECT_NEAR(detail::cubic_d2(segs.back().b, 1.0), 0.0, 1e-9);
    }
}

TEST(RoadGeometry, ArcLengthIncreasesWithinSegments)
{
    const RoadGeometry road = test::roundabout_road();
    for (const auto& seg : road.segments()) {
        double prev = -1.0;
        for (int k = 0; k <= 100; ++k) {
            const double s = RoadGeometry::arc_within(seg, k / 100.0);
            EXPECT_GT(s, prev);
            prev = s;
        }
    }
}

TEST(RoadGeometry, RoundTripOnBothRoads)
{
    std::mt19937_64 gen(2024);
    for (const RoadGeometry& road : {test::country_road(), test::roundabout_road()}) {
        std::uniform_real_distribution<double> s_dist(0.0, road.total_length());
        std::uniform_real_distribution<double> n_dist(-road.lane_half_width(), road.lane_half_width());
        for (int i = 0; i < 1000; ++i) {
            const CcsPoint p{s_dist(gen), n_dist(gen)};
            const CcsPoint q = cartesian_to_ccs(road, ccs_to_cartesian(road, p));
            ASSERT_NEAR(q.s, p.s, 1e-6) << "n = " << p.n;
            ASSERT_NEAR(q.n, p.n, 1e-6) << "s = " << p.s;
        }
    }
}

TEST(RoadGeometry, EndExtensionContinuesAlongTangent)
{
    const RoadGeometry road = test::country_road();
    const auto end = road.frame(road.total_length());
    const CartesianPoint p = ccs_to_cartesian(road, {road.total_length() + 10.0, 1.0});
    EXPECT_NEAR(p.x, end.x + 10.0 * std::cos(end.alpha) - std::sin(end.alpha), 1e-9);
    EXPECT_NEAR(p.y, end.y + 10.0 * std::sin(end.alpha) + std::cos(end.alpha), 1e-9);
    const CcsPoint back = cartesian_to_ccs(road, p);
    EXPECT_NEAR(back.s, road.total_length() + 10.0, 1e-6);
    EXPECT_NEAR(back.n, 1.0, 1e-6);
}

TEST(RoadGeometry, Errors)
{
    test::expect_code([] { fit_spline(std::vector<ControlPoint>{{0, 0}, {1, 0}}, 6.0); }, ErrorCode::TooFewPoints);
    test::expect_code([] { fit_spline(std::vector<ControlPoint>{{0, 0}, {1, 0}, {1, 0}}, 6.0); },
                      ErrorCode::DegenerateSegment);
    const RoadGeometry road = straight_x();
    test::expect_code([&] { ccs_to_cartesian(road, {101.0, 0.0}); }, ErrorCode::OutOfRange);
    test::expect_code([&] { cartesian_to_ccs(road, {50.0, 7.0}); }, ErrorCode::OffRoad);
    test::expect_code([&] { geometry_jacobian(road, {50.0, 0.0}, {50.0, 0.0, 10.0}); }, ErrorCode::SingularGeometry);
}

TEST(Polar, DistancesAndAzimuth)
{
    const RoadGeometry road = fit_spline(std::vector<ControlPoint>{{-50, 0}, {0, 0}, {50, 0}}, 6.0);
    EXPECT_NEAR(ccs_to_polar(road, {50.0, 0.0}, {0.0, 0.0, 10.0}).d, 10.0, 1e-9);
    EXPECT_NEAR(ccs_to_polar(road, {60.0, 0.0}, {0.0, 0.0, 10.0}).d, std::sqrt(200.0), 1e-9);
    EXPECT_NEAR(ccs_to_polar(road, {55.0, 5.0}, {0.0, 0.0, 10.0}).theta, kPi / 4, 1e-12);
    // phi is measured from the downward boresight.
    EXPECT_NEAR(ccs_to_polar(road, {60.0, 0.0}, {0.0, 0.0, 10.0}).phi, kPi / 4, 1e-12);
    EXPECT_NEAR(ccs_to_polar(road, {40.0, 0.0}, {0.0, 0.0, 10.0}).theta, kPi, 1e-12);
}

TEST(GeometryJacobian, DistanceFlatAlongNormalWhenNormalIsPerpendicular)
{
    const RoadGeometry road = straight_x();
    const GeometryJacobian j = geometry_jacobian(road, {10.0, 0.0}, {-20.0, 0.0, 10.0});
    EXPECT_NEAR(j.dd_dn, 0.0, 1e-12);
}

namespace {

struct Geo3 {
    double theta;
    double phi;
    double d;
};

Geo3 geo_at(const RoadGeometry& road, double s, double n, const RsuPose& rsu)
{
    const PolarView v = ccs_to_polar(road, {s, n}, rsu);
    return {v.theta, v.phi, v.d};
}

void check_geometry_jacobian(const RoadGeometry& road, const RsuPose& rsu, std::uint64_t seed, double s_lo,
                             double s_hi)
{
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> s_dist(s_lo, s_hi);
    std::uniform_real_distribution<double> n_dist(-3.0, 3.0);
    constexpr double h = 1e-4;
    int checked = 0;
    while (checked < 100) {
        const double s = s_dist(gen);
        const double n = n_dist(gen);
        if (geo_at(road, s, n, rsu).d < 1.0 + rsu.h) {
            continue;
        }
        const GeometryJacobian j = geometry_jacobian(road, {s, n}, rsu);
        const Geo3 sp = geo_at(road, s + h, n, rsu);
        const Geo3 sm = geo_at(road, s - h, n, rsu);
        const Geo3 np = geo_at(road, s, n + h, rsu);
        const Geo3 nm = geo_at(road, s, n - h, rsu);
        Eigen::Matrix<double, 3, 2> fd;
        fd << wrap_angle(sp.theta - sm.theta) / (2 * h), wrap_angle(np.theta - nm.theta) / (2 * h),
            (sp.phi - sm.phi) / (2 * h), (np.phi - nm.phi) / (2 * h), (sp.d - sm.d) / (2 * h), (np.d - nm.d) / (2 * h);
        Eigen::Matrix<double, 3, 2> an;
        an << j.angles(0, 0), j.angles(0, 1), j.angles(1, 0), j.angles(1, 1), j.dd_ds, j.dd_dn;
        ASSERT_LT(test::row_relative_error(an, fd), 1e-5) << "s = " << s << ", n = " << n;
        ++checked;
    }
}

} // namespace

TEST(GeometryJacobian, FiniteDifferencesStraightRoadSideRsu)
{
    check_geometry_jacobian(straight_x(), {50.0, -40.0, 10.0}, 1, 0.0, 100.0);
}

TEST(GeometryJacobian, FiniteDifferencesCircleWithCentralRsu)
{
    const RoadGeometry road = fit_spline(test::circle_points(50.0, 0.0, 1.5 * kPi, 25), 6.0);
    check_geometry_jacobian(road, {0.0, 0.0, 10.0}, 2, 0.0, road.total_length());
}

TEST(GeometryJacobian, FiniteDifferencesCountryAndRoundabout)
{
    const RoadGeometry country = test::country_road();
    check_geometry_jacobian(country, {0.0, 0.0, 10.0}, 3, 0.0, country.total_length());
    const RoadGeometry ring = test::roundabout_road();
    check_geometry_jacobian(ring, {25.0, 25.0, 10.0}, 4, 0.0, ring.total_length());
}
