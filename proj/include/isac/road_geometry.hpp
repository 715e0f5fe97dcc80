#pragma once

#include "isac/error.hpp"
#include "isac/linalg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace isac {

struct ControlPoint {
    double x = 0.0;
    double y = 0.0;
};

struct CartesianPoint {
    double x = 0.0;
    double y = 0.0;
};

/// Road-following coordinates: s is arc length along the centerline, n the
/// lateral offset, positive to the left of the travel direction.
struct CcsPoint {
    double s = 0.0;
    double n = 0.0;
};

/// RSU array position on the ground plane and its mounting height.
struct RsuPose {
    double x = 0.0;
    double y = 0.0;
    double h = 10.0;
};

/// Azimuth theta (atan2 convention), angle phi from the downward boresight,
/// slant distance d, and centerline tangent angle alpha.
struct PolarView {
    double theta = 0.0;
    double phi = 0.0;
    double d = 0.0;
    double alpha = 0.0;
};

/// One cubic piece between consecutive control points, parametrized by
/// rho in [0, 1]. Coefficient arrays are ordered [rho^3, rho^2, rho, 1].
struct SplineSegment {
    std::array<double, 4> a{};
    std::array<double, 4> b{};
    /// Cubic Hermite approximation of s(rho); informational only, the exact
    /// arc length comes from the quadrature table.
    std::array<double, 4> c{};
    double s_start = 0.0;
    double length = 0.0;
    /// Arc length from rho = 0 to rho = k / (arc_table.size() - 1).
    std::vector<double> arc_table;
};

namespace detail {

inline double cubic(const std::array<double, 4>& k, double r) { return ((k[0] * r + k[1]) * r + k[2]) * r + k[3]; }
inline double cubic_d1(const std::array<double, 4>& k, double r) { return (3.0 * k[0] * r + 2.0 * k[1]) * r + k[2]; }
inline double cubic_d2(const std::array<double, 4>& k, double r) { return 6.0 * k[0] * r + 2.0 * k[1]; }

inline double segment_speed(const SplineSegment& seg, double r)
{
    return std::hypot(cubic_d1(seg.a, r), cubic_d1(seg.b, r));
}

// 8-point Gauss-Legendre nodes/weights on [-1, 1].
inline constexpr std::array<double, 8> kGlNodes{-0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
                                                -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
                                                0.7966664774136267,  0.9602898564975363};
inline constexpr std::array<double, 8> kGlWeights{0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
                                                  0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
                                                  0.2223810344533745, 0.1012285362903763};

inline double gauss_legendre(const SplineSegment& seg, double lo, double hi)
{
    const double mid = 0.5 * (lo + hi);
    const double half = 0.5 * (hi - lo);
    double sum = 0.0;
    for (std::size_t i = 0; i < kGlNodes.size(); ++i) {
        sum += kGlWeights[i] * segment_speed(seg, mid + half * kGlNodes[i]);
    }
    return sum * half;
}

inline double adaptive_arc(const SplineSegment& seg, double lo, double hi, double whole, double rel_tol, int depth)
{
    const double mid = 0.5 * (lo + hi);
    const double left = gauss_legendre(seg, lo, mid);
    const double right = gauss_legendre(seg, mid, hi);
    const double refined = left + right;
    if (depth >= 30 || std::abs(refined - whole) <= rel_tol * std::max(std::abs(refined), 1e-300)) {
        return refined;
    }
    return adaptive_arc(seg, lo, mid, left, rel_tol, depth + 1) + adaptive_arc(seg, mid, hi, right, rel_tol, depth + 1);
}

// Second derivatives of a natural cubic spline through (u_i, v_i).
inline std::vector<double> natural_second_derivatives(std::span<const double> u, std::span<const double> v)
{
    const std::size_t n = u.size();
    std::vector<double> m(n, 0.0);
    if (n < 3) {
        return m;
    }
    const std::size_t k = n - 2;
    std::vector<double> diag(k), upper(k), rhs(k);
    for (std::size_t i = 1; i + 1 < n; ++i) {
        const double h0 = u[i] - u[i - 1];
        const double h1 = u[i + 1] - u[i];
        diag[i - 1] = 2.0 * (h0 + h1);
        upper[i - 1] = h1;
        rhs[i - 1] = 6.0 * ((v[i + 1] - v[i]) / h1 - (v[i] - v[i - 1]) / h0);
    }
    // Thomas algorithm; the sub-diagonal entry of row i equals upper[i - 1].
    for (std::size_t i = 1; i < k; ++i) {
        const double w = upper[i - 1] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for (std::size_t i = k - 1; i-- > 0;) {
        m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
    }
    return m;
}

} // namespace detail

/// Fitted road centerline. Immutable once built by fit_spline().
class RoadGeometry {
public:
    /// Arc-length table resolution per segment.
    static constexpr int kArcTableIntervals = 16;

    RoadGeometry() = default;

    const std::vector<SplineSegment>& segments() const { return segments_; }
    const std::vector<ControlPoint>& control_points() const { return points_; }
    double total_length() const { return total_length_; }
    double lane_half_width() const { return lane_half_width_; }
    /// Length of the straight run-out continuing each end along its tangent.
    double end_extension() const { return extension_; }

    void set_end_extension(double metres)
    {
        if (!(metres >= 0.0) || !std::isfinite(metres)) {
            throw Error(ErrorCode::InvalidScenario, "end extension must be a non-negative length");
        }
        extension_ = metres;
    }

    struct Frame {
        double x;
        double y;
        double alpha;
        double curvature;
    };

    std::size_t segment_index(double s) const
    {
        auto it = std::upper_bound(segment_starts_.begin(), segment_starts_.end(), s);
        const auto idx = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, (it - segment_starts_.begin()) - 1));
        return std::min(idx, segments_.size() - 1);
    }

    /// Arc length from the segment start up to rho.
    static double arc_within(const SplineSegment& seg, double rho)
    {
        const int intervals = static_cast<int>(seg.arc_table.size()) - 1;
        const double scaled = std::clamp(rho, 0.0, 1.0) * intervals;
        const int k = std::min(static_cast<int>(scaled), intervals - 1);
        const double lo = static_cast<double>(k) / intervals;
        return seg.arc_table[static_cast<std::size_t>(k)] + detail::gauss_legendre(seg, lo, rho);
    }

    /// Solves s(rho) = local_s on one segment. The Doppler model needs the
    /// tangent angle to ~1e-12 rad, so the iteration runs to round-off.
    static double rho_at(const SplineSegment& seg, double local_s)
    {
        local_s = std::clamp(local_s, 0.0, seg.length);
        const auto& table = seg.arc_table;
        const int intervals = static_cast<int>(table.size()) - 1;
        auto it = std::upper_bound(table.begin(), table.end(), local_s);
        int k = std::clamp(static_cast<int>(it - table.begin()) - 1, 0, intervals - 1);
        double lo = static_cast<double>(k) / intervals;
        double hi = static_cast<double>(k + 1) / intervals;
        const double span = table[static_cast<std::size_t>(k) + 1] - table[static_cast<std::size_t>(k)];
        double rho = lo + (hi - lo) * (span > 0.0 ? (local_s - table[static_cast<std::size_t>(k)]) / span : 0.0);
        const double tol = 1e-14 * std::max(1.0, seg.length);
        for (int iter = 0; iter < 60; ++iter) {
            const double err = arc_within(seg, rho) - local_s;
            if (std::abs(err) < tol) {
                return std::clamp(rho - err / detail::segment_speed(seg, rho), 0.0, 1.0);
            }
            if (err > 0.0) {
                hi = rho;
            } else {
                lo = rho;
            }
            double next = rho - err / detail::segment_speed(seg, rho);
            if (!(next > lo && next < hi)) {
                next = 0.5 * (lo + hi);
            }
            rho = next;
        }
        return rho;
    }

    void check_range(double s) const
    {
        if (!(s >= -extension_ && s <= total_length_ + extension_)) {
            throw Error(ErrorCode::OutOfRange, "s = " + std::to_string(s) + " outside [" + std::to_string(-extension_) +
                                                   ", " + std::to_string(total_length_ + extension_) + "]");
        }
    }

    /// Centerline point, tangent angle and signed curvature at arc length s.
    Frame frame(double s) const
    {
        check_range(s);
        if (s < 0.0 || s > total_length_) {
            const double end = s < 0.0 ? 0.0 : total_length_;
            const Frame f = frame(end);
            return Frame{f.x + (s - end) * std::cos(f.alpha), f.y + (s - end) * std::sin(f.alpha), f.alpha, 0.0};
        }
        const std::size_t i = segment_index(s);
        const SplineSegment& seg = segments_[i];
        const double rho = rho_at(seg, s - seg.s_start);
        const double dx = detail::cubic_d1(seg.a, rho);
        const double dy = detail::cubic_d1(seg.b, rho);
        const double ddx = detail::cubic_d2(seg.a, rho);
        const double ddy = detail::cubic_d2(seg.b, rho);
        const double speed = std::hypot(dx, dy);
        return Frame{detail::cubic(seg.a, rho), detail::cubic(seg.b, rho), std::atan2(dy, dx),
                     (dx * ddy - dy * ddx) / (speed * speed * speed)};
    }

private:
    friend RoadGeometry fit_spline(std::span<const ControlPoint> points, double lane_half_width);

    std::vector<ControlPoint> points_;
    std::vector<SplineSegment> segments_;
    std::vector<double> segment_starts_;
    double total_length_ = 0.0;
    double lane_half_width_ = 6.0;
    double extension_ = 0.0;
};

/// Natural cubic spline through the control points (chord-length knots) with
/// each segment's arc length integrated by adaptive Gauss-Legendre quadrature.
inline RoadGeometry fit_spline(std::span<const ControlPoint> points, double lane_half_width = 6.0)
{
    if (points.size() < 3) {
        throw Error(ErrorCode::TooFewPoints, "need at least 3 control points, got " + std::to_string(points.size()));
    }
    if (!(lane_half_width > 0.0)) {
        throw Error(ErrorCode::InvalidScenario, "lane_half_width must be positive");
    }
    std::vector<double> u(points.size(), 0.0);
    std::vector<double> xs(points.size()), ys(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (!std::isfinite(points[i].x) || !std::isfinite(points[i].y)) {
            throw Error(ErrorCode::DegenerateSegment, "control point " + std::to_string(i) + " is not finite");
        }
        xs[i] = points[i].x;
        ys[i] = points[i].y;
        if (i > 0) {
            const double chord = std::hypot(xs[i] - xs[i - 1], ys[i] - ys[i - 1]);
            if (!(chord > 1e-9)) {
                throw Error(ErrorCode::DegenerateSegment,
                            "control points " + std::to_string(i - 1) + " and " + std::to_string(i) + " coincide");
            }
            u[i] = u[i - 1] + chord;
        }
    }
    const auto mx = detail::natural_second_derivatives(u, xs);
    const auto my = detail::natural_second_derivatives(u, ys);

    RoadGeometry road;
    road.points_.assign(points.begin(), points.end());
    road.lane_half_width_ = lane_half_width;
    double s_acc = 0.0;
    for (std::size_t i = 0; i + 1 < points.size(); ++i) {
        const double h = u[i + 1] - u[i];
        auto coeffs = [h](double v0, double v1, double m0, double m1) {
            const double slope = (v1 - v0) / h - h * (2.0 * m0 + m1) / 6.0;
            return std::array<double, 4>{(m1 - m0) / (6.0 * h) * h * h * h, 0.5 * m0 * h * h, slope * h, v0};
        };
        SplineSegment seg;
        seg.a = coeffs(xs[i], xs[i + 1], mx[i], mx[i + 1]);
        seg.b = coeffs(ys[i], ys[i + 1], my[i], my[i + 1]);
        seg.s_start = s_acc;
        seg.arc_table.assign(RoadGeometry::kArcTableIntervals + 1, 0.0);
        for (int k = 0; k < RoadGeometry::kArcTableIntervals; ++k) {
            const double lo = static_cast<double>(k) / RoadGeometry::kArcTableIntervals;
            const double hi = static_cast<double>(k + 1) / RoadGeometry::kArcTableIntervals;
            const double coarse = detail::gauss_legendre(seg, lo, hi);
            seg.arc_table[static_cast<std::size_t>(k) + 1] =
                seg.arc_table[static_cast<std::size_t>(k)] + detail::adaptive_arc(seg, lo, hi, coarse, 1e-13, 0);
        }
        seg.length = seg.arc_table.back();
        for (double r : {0.0, 0.5, 1.0}) {
            if (!(detail::segment_speed(seg, r) > 1e-9)) {
                throw Error(ErrorCode::DegenerateSegment, "segment " + std::to_string(i) + " has vanishing speed");
            }
        }
        // Hermite cubic matching s and ds/drho at both ends.
        const double l = seg.length;
        const double v0 = detail::segment_speed(seg, 0.0);
        const double v1 = detail::segment_speed(seg, 1.0);
        seg.c = {v0 + v1 - 2.0 * l, 3.0 * l - 2.0 * v0 - v1, v0, s_acc};
        s_acc += seg.length;
        road.segment_starts_.push_back(seg.s_start);
        road.segments_.push_back(std::move(seg));
    }
    road.total_length_ = s_acc;
    return road;
}

inline RoadGeometry fit_spline(const std::vector<ControlPoint>& points, double lane_half_width = 6.0)
{
    return fit_spline(std::span<const ControlPoint>(points), lane_half_width);
}

struct TangentCurvature {
    double alpha;
    double dalpha_ds;
};

inline TangentCurvature tangent_and_curvature(const RoadGeometry& road, double s)
{
    const auto f = road.frame(s);
    return {f.alpha, f.curvature};
}

inline CartesianPoint ccs_to_cartesian(const RoadGeometry& road, CcsPoint p)
{
    const auto f = road.frame(p.s);
    return {f.x - p.n * std::sin(f.alpha), f.y + p.n * std::cos(f.alpha)};
}

/// Foot of the perpendicular from q onto the centerline. `along` is the
/// tangential component of the offset, non-zero only when the closest point
/// is a road end.
struct CenterlineProjection {
    double s = 0.0;
    double n = 0.0;
    double along = 0.0;
};

/// Closest centerline point; Newton on the orthogonality condition per
/// segment, bracketed by bisection, global minimum over segments.
inline CenterlineProjection project_to_centerline(const RoadGeometry& road, CartesianPoint q)
{
    constexpr int kSamples = 8;
    double best_dist2 = std::numeric_limits<double>::infinity();
    std::size_t best_seg = 0;
    double best_rho = 0.0;

    const auto& segs = road.segments();
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const SplineSegment& seg = segs[i];
        auto dist2 = [&](double r) {
            const double dx = detail::cubic(seg.a, r) - q.x;
            const double dy = detail::cubic(seg.b, r) - q.y;
            return dx * dx + dy * dy;
        };
        auto ortho = [&](double r) {
            return (detail::cubic(seg.a, r) - q.x) * detail::cubic_d1(seg.a, r) +
                   (detail::cubic(seg.b, r) - q.y) * detail::cubic_d1(seg.b, r);
        };
        auto ortho_d = [&](double r) {
            const double dx = detail::cubic_d1(seg.a, r);
            const double dy = detail::cubic_d1(seg.b, r);
            return dx * dx + dy * dy + (detail::cubic(seg.a, r) - q.x) * detail::cubic_d2(seg.a, r) +
                   (detail::cubic(seg.b, r) - q.y) * detail::cubic_d2(seg.b, r);
        };
        auto consider = [&](double r) {
            const double d2 = dist2(r);
            if (d2 < best_dist2 - 1e-18) {
                best_dist2 = d2;
                best_seg = i;
                best_rho = r;
            }
        };
        consider(0.0);
        double prev_r = 0.0;
        double prev_f = ortho(0.0);
        for (int k = 1; k <= kSamples; ++k) {
            const double r = static_cast<double>(k) / kSamples;
            const double f = ortho(r);
            if (prev_f < 0.0 && f >= 0.0) {
                // Sign change from negative to positive brackets a distance minimum.
                double lo = prev_r;
                double hi = r;
                double x = 0.5 * (lo + hi);
                for (int iter = 0; iter < 100; ++iter) {
                    const double fx = ortho(x);
                    if (fx < 0.0) {
                        lo = x;
                    } else {
                        hi = x;
                    }
                    const double dfx = ortho_d(x);
                    double next = dfx > 0.0 ? x - fx / dfx : 0.5 * (lo + hi);
                    if (!(next > lo && next < hi)) {
                        next = 0.5 * (lo + hi);
                    }
                    if (std::abs(next - x) < 1e-15 || hi - lo < 1e-15) {
                        x = next;
                        break;
                    }
                    x = next;
                }
                consider(x);
            }
            prev_r = r;
            prev_f = f;
        }
        consider(1.0);
    }

    if (road.end_extension() > 0.0) {
        // Straight run-outs: closest point on each end ray, clamped to its length.
        std::optional<CenterlineProjection> line_best;
        for (const double end : {0.0, road.total_length()}) {
            const auto f = road.frame(end);
            const double dir = end == 0.0 ? -1.0 : 1.0;
            const double tx = dir * std::cos(f.alpha);
            const double ty = dir * std::sin(f.alpha);
            const double ox = q.x - f.x;
            const double oy = q.y - f.y;
            const double t = std::clamp(ox * tx + oy * ty, 0.0, road.end_extension());
            const double d2 = (ox - t * tx) * (ox - t * tx) + (oy - t * ty) * (oy - t * ty);
            if (t > 0.0 && d2 < best_dist2 - 1e-18) {
                best_dist2 = d2;
                const double along = ox * std::cos(f.alpha) + oy * std::sin(f.alpha);
                const double s_line = end + dir * t;
                line_best = CenterlineProjection{s_line, -ox * std::sin(f.alpha) + oy * std::cos(f.alpha),
                                                 along - (s_line - end)};
            }
        }
        if (line_best) {
            return *line_best;
        }
    }

    const SplineSegment& seg = segs[best_seg];
    const double dx = detail::cubic_d1(seg.a, best_rho);
    const double dy = detail::cubic_d1(seg.b, best_rho);
    const double speed = std::hypot(dx, dy);
    const double ox = q.x - detail::cubic(seg.a, best_rho);
    const double oy = q.y - detail::cubic(seg.b, best_rho);
    const double s = seg.s_start + RoadGeometry::arc_within(seg, best_rho);
    return {std::clamp(s, 0.0, road.total_length()), (-ox * dy + oy * dx) / speed, (ox * dx + oy * dy) / speed};
}

inline CcsPoint cartesian_to_ccs(const RoadGeometry& road, CartesianPoint q)
{
    const CenterlineProjection p = project_to_centerline(road, q);
    if (std::abs(p.along) > 1e-6) {
        throw Error(ErrorCode::OutOfRange, "point projects beyond the road ends");
    }
    if (std::abs(p.n) > road.lane_half_width() + 1e-6) {
        throw Error(ErrorCode::OffRoad,
                    "lateral offset " + std::to_string(p.n) + " exceeds lane half-width " +
                        std::to_string(road.lane_half_width()));
    }
    return {p.s, p.n};
}

inline PolarView polar_from_cartesian(CartesianPoint q, const RsuPose& rsu, double alpha)
{
    const double dx = q.x - rsu.x;
    const double dy = q.y - rsu.y;
    const double ground = std::hypot(dx, dy);
    double theta = std::atan2(dy, dx);
    if (theta <= -kPi) {
        theta = kPi;
    }
    return {theta, std::atan2(ground, rsu.h), std::sqrt(ground * ground + rsu.h * rsu.h), alpha};
}

inline PolarView ccs_to_polar(const RoadGeometry& road, CcsPoint p, const RsuPose& rsu)
{
    const auto f = road.frame(p.s);
    const CartesianPoint q{f.x - p.n * std::sin(f.alpha), f.y + p.n * std::cos(f.alpha)};
    return polar_from_cartesian(q, rsu, f.alpha);
}

/// Partial derivatives of azimuth, elevation and distance with respect to
/// the curvilinear position, together with the point they were taken at.
struct GeometryJacobian {
    Mat2 angles;  // [dtheta/ds dtheta/dn; dphi/ds dphi/dn]
    double dd_ds = 0.0;
    double dd_dn = 0.0;
    PolarView view;
    CartesianPoint position;
    double curvature = 0.0;
};

inline GeometryJacobian geometry_jacobian(const RoadGeometry& road, CcsPoint p, const RsuPose& rsu)
{
    const auto f = road.frame(p.s);
    const double ca = std::cos(f.alpha);
    const double sa = std::sin(f.alpha);
    const CartesianPoint q{f.x - p.n * sa, f.y + p.n * ca};
    const double dx = q.x - rsu.x;
    const double dy = q.y - rsu.y;
    const double ground2 = dx * dx + dy * dy;
    const double ground = std::sqrt(ground2);
    const double d2 = ground2 + rsu.h * rsu.h;
    const double d = std::sqrt(d2);
    if (d < 1e-6 || ground < 1e-9) {
        throw Error(ErrorCode::SingularGeometry, "vehicle at the RSU base, angles undefined");
    }
    // dP/ds = T (1 - n kappa), dP/dn = N.
    const double stretch = 1.0 - p.n * f.curvature;
    const Vec2 dpos_ds{ca * stretch, sa * stretch};
    const Vec2 dpos_dn{-sa, ca};
    const Vec2 dtheta_dxy{-dy / ground2, dx / ground2};
    const Vec2 dphi_dxy = (rsu.h / d2) * Vec2{dx / ground, dy / ground};
    const Vec2 dd_dxy{dx / d, dy / d};

    GeometryJacobian j;
    j.angles << dtheta_dxy.dot(dpos_ds), dtheta_dxy.dot(dpos_dn), dphi_dxy.dot(dpos_ds), dphi_dxy.dot(dpos_dn);
    j.dd_ds = dd_dxy.dot(dpos_ds);
    j.dd_dn = dd_dxy.dot(dpos_dn);
    j.view = polar_from_cartesian(q, rsu, f.alpha);
    j.position = q;
    j.curvature = f.curvature;
    return j;
}

/// Straight road through the first two control points of another road,
/// extended to the given length.
inline RoadGeometry straight_road_through(ControlPoint first, ControlPoint second, double length,
                                          double lane_half_width)
{
    const double dx = second.x - first.x;
    const double dy = second.y - first.y;
    const double norm = std::hypot(dx, dy);
    if (!(norm > 1e-9)) {
        throw Error(ErrorCode::DegenerateSegment, "first two control points coincide");
    }
    const double ux = dx / norm;
    const double uy = dy / norm;
    const std::vector<ControlPoint> pts{
        first, {first.x + 0.5 * length * ux, first.y + 0.5 * length * uy}, {first.x + length * ux, first.y + length * uy}};
    return fit_spline(pts, lane_half_width);
}

} // namespace isac
