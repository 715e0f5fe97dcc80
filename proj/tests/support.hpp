#pragma once

#include "isac/scenario_io.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace isac::test {

inline std::filesystem::path scenario_dir() { return ISAC_SCENARIO_DIR; }

inline std::vector<ControlPoint> road_points(const std::string& name)
{
    const Json j = detail::read_json_file(scenario_dir() / "roads" / (name + ".json"));
    return detail::read_points(j.at("control_points"), name);
}

inline RoadGeometry country_road()
{
    RoadGeometry road = fit_spline(road_points("country"), 6.0);
    road.set_end_extension(30.0);
    return road;
}

inline RoadGeometry roundabout_road()
{
    RoadGeometry road = fit_spline(road_points("roundabout"), 6.0);
    road.set_end_extension(30.0);
    return road;
}

/// Points on a circle of radius r about the origin, counter-clockwise from
/// angle a0 to a1 inclusive.
inline std::vector<ControlPoint> circle_points(double r, double a0, double a1, int count)
{
    std::vector<ControlPoint> pts;
    for (int k = 0; k < count; ++k) {
        const double a = a0 + (a1 - a0) * k / (count - 1);
        pts.push_back({r * std::cos(a), r * std::sin(a)});
    }
    return pts;
}

/// Central-difference derivative of f at x along coordinate i.
template <typename F>
auto central_diff(F f, Vec6 x, int i, double h)
{
    Vec6 up = x;
    Vec6 dn = x;
    up(i) += h;
    dn(i) -= h;
    return ((f(up) - f(dn)) / (2.0 * h)).eval();
}

/// Largest row-scaled discrepancy max_ij |a_ij - b_ij| / max(max_j |b_ij|, floor).
template <typename A, typename B>
double row_relative_error(const A& analytic, const B& reference, double floor = 1e-12)
{
    double worst = 0.0;
    for (Eigen::Index i = 0; i < reference.rows(); ++i) {
        const double scale = std::max(reference.row(i).cwiseAbs().maxCoeff(), floor);
        worst = std::max(worst, (analytic.row(i) - reference.row(i)).cwiseAbs().maxCoeff() / scale);
    }
    return worst;
}

template <typename F>
void expect_code(F f, ErrorCode code)
{
    try {
        f();
        ADD_FAILURE() << "no error raised";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), code) << e.what();
    }
}

/// Country-road lane-keeping scenario used by several tests.
inline Scenario country_scenario()
{
    Scenario sc;
    sc.name = "country";
    sc.control_points = road_points("country");
    sc.road_extension = 30.0;
    sc.init = {2.0, 10.0, 0.0, 0.0, 2e-5, 2e-5};
    sc.schedule = {{0.0, 10.0, 10.0, 0.0}};
    sc.tracker = TrackerKind::EKF_LK;
    return sc;
}

} // namespace isac::test
