#pragma once

#include "isac/array_channel.hpp"
#include "isac/error.hpp"
#include "isac/linalg.hpp"
#include "isac/road_geometry.hpp"
#include "isac/state.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace isac {

/// Half-power half-width of an N-element axis in spatial frequency is k0 / N.
inline constexpr double kDefaultBeamwidthFactor = 0.886;

struct AngleUncertainty {
    Mat2 sigma = Mat2::Zero();
};

struct SpatialFreqUncertainty {
    Mat2 sigma_tilde = Mat2::Zero();
};

enum class EllipseMethod { Printed, Tangent, BoundingBox };

/// Axis-aligned region A psi_par^2 + B psi_perp^2 <= 1. Infinite parameters
/// mean no uncertainty along that axis.
struct CoveringEllipse {
    double a_theta = 0.0;
    double b_phi = 0.0;
    EllipseMethod method = EllipseMethod::Printed;
};

struct BeamPlan {
    int best_n = 1;
    int best_m = 1;
    double r0 = 0.0;
    double a_theta = 0.0;
    double b_phi = 0.0;
    double misalignment = 0.0;
    EllipseMethod method = EllipseMethod::Printed;
    double point_theta = 0.0;
    double point_phi = 0.0;
    Mat2 sigma_tilde = Mat2::Zero();
};

inline AngleUncertainty angle_covariance(const Mat6& m_pred, const Mat2& geom_jac)
{
    Mat2 pos;
    pos << m_pred(kS, kS), m_pred(kS, kN), m_pred(kN, kS), m_pred(kN, kN);
    return {symmetrized(geom_jac * pos * geom_jac.transpose())};
}

/// d(psi_par, psi_perp)/d(theta, phi) for psi_par = cos(theta) sin(phi),
/// psi_perp = sin(theta) sin(phi).
inline Mat2 spatial_transform(double theta, double phi)
{
    Mat2 t;
    t << -std::sin(theta) * std::sin(phi), std::cos(theta) * std::cos(phi), std::cos(theta) * std::sin(phi),
        std::sin(theta) * std::cos(phi);
    return t;
}

inline SpatialFreqUncertainty spatial_freq_covariance(const AngleUncertainty& sigma, double theta, double phi)
{
    const Mat2 t = spatial_transform(theta, phi);
    return {symmetrized(t * sigma.sigma * t.transpose())};
}

inline double radius_for_gamma(double gamma)
{
    if (!(gamma > 0.0 && gamma < 1.0)) {
        throw Error(ErrorCode::GammaOutOfRange, "gamma must lie in (0, 1)");
    }
    return std::sqrt(-2.0 * std::log(gamma));
}

inline void check_psd(const Mat2& m)
{
    if (!m.allFinite()) {
        throw Error(ErrorCode::NonPsdCovariance, "covariance is not finite");
    }
    const double scale = std::max(1e-300, m.diagonal().cwiseAbs().maxCoeff());
    if (min_eigenvalue(m) < -1e-12 * scale || (m.diagonal().array() < 0.0).any()) {
        throw Error(ErrorCode::NonPsdCovariance, "covariance is not positive semi-definite");
    }
}

/// Checks that the r0-confidence ellipse of sigma_tilde lies inside the
/// axis-aligned region, sampling the boundary at `samples` points.
inline bool ellipse_contains(const Mat2& sigma_tilde, double r0, double a_theta, double b_phi, int samples = 720)
{
    const Mat2 root = psd_sqrt(sigma_tilde);
    auto term = [](double coef, double psi, double var) {
        if (std::isinf(coef)) {
            return var <= 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
        }
        return coef * psi * psi;
    };
    for (int k = 0; k < samples; ++k) {
        const double t = 2.0 * kPi * k / samples;
        const Vec2 psi = r0 * root * Vec2{std::cos(t), std::sin(t)};
        if (term(a_theta, psi(0), sigma_tilde(0, 0)) + term(b_phi, psi(1), sigma_tilde(1, 1)) > 1.0 + 1e-9) {
            return false;
        }
    }
    return true;
}

/// Axis-aligned ellipse covering the r0-confidence ellipse. The closed form
/// with the halved cross term is tried first; when the sampled containment
/// check rejects it the tightest-area covering ellipse with touching axes is
/// used, and the scaled bounding box is the last resort.
inline CoveringEllipse covering_ellipse(const Mat2& sigma_tilde, double r0)
{
    check_psd(sigma_tilde);
    if (!(r0 > 0.0)) {
        throw Error(ErrorCode::GammaOutOfRange, "radius scale must be positive");
    }
    constexpr double inf = std::numeric_limits<double>::infinity();
    const double s11 = std::max(sigma_tilde(0, 0), 0.0);
    const double s22 = std::max(sigma_tilde(1, 1), 0.0);
    const double s12 = sigma_tilde(0, 1);
    const double r2 = r0 * r0;
    if (s11 <= 0.0 && s22 <= 0.0) {
        return {inf, inf, EllipseMethod::Printed};
    }

    const double det = s11 * s22 - s12 * s12;
    if (s11 > 0.0 && s22 > 0.0 && det > 1e-14 * s11 * s22) {
        const Mat2 p = (r2 * sigma_tilde).inverse();
        const double a = p(0, 0) - std::abs(p(1, 0)) * std::sqrt(p(0, 0) / p(1, 1)) / 2.0;
        const double b = p(1, 1) - std::abs(p(0, 1)) * std::sqrt(p(1, 1) / p(0, 0)) / 2.0;
        if (a > 0.0 && b > 0.0 && ellipse_contains(sigma_tilde, r0, a, b)) {
            return {a, b, EllipseMethod::Printed};
        }
    }

    const double rho = (s11 > 0.0 && s22 > 0.0) ? std::min(1.0, std::abs(s12) / std::sqrt(s11 * s22)) : 0.0;
    const double a_t = s11 > 0.0 ? 1.0 / (r2 * s11 * (1.0 + rho)) : inf;
    const double b_t = s22 > 0.0 ? 1.0 / (r2 * s22 * (1.0 + rho)) : inf;
    if (ellipse_contains(sigma_tilde, r0, a_t, b_t)) {
        return {a_t, b_t, EllipseMethod::Tangent};
    }
    const double a_box = s11 > 0.0 ? 1.0 / (2.0 * r2 * s11) : inf;
    const double b_box = s22 > 0.0 ? 1.0 / (2.0 * r2 * s22) : inf;
    return {a_box, b_box, EllipseMethod::BoundingBox};
}

/// Largest element count whose half-power half-width k0 / count still covers
/// the semi-axis 1 / sqrt(coef).
inline int elements_for_axis(double coef, int physical, double k0)
{
    const double count = std::floor(k0 * std::sqrt(coef));
    if (!(count < static_cast<double>(physical))) {
        return physical;
    }
    return std::max(1, static_cast<int>(count));
}

inline BeamPlan best_array_size(double a_theta, double b_phi, int physical_m, int physical_n,
                                double k0 = kDefaultBeamwidthFactor)
{
    BeamPlan plan;
    plan.a_theta = a_theta;
    plan.b_phi = b_phi;
    plan.best_n = elements_for_axis(a_theta, physical_n, k0);
    plan.best_m = elements_for_axis(b_phi, physical_m, k0);
    return plan;
}

/// Gaussian mass of sigma_tilde outside the largest confidence ellipse that
/// fits in the half-power ellipse of an n_rows x m_cols beam.
inline double misalignment_estimate(const Mat2& sigma_tilde, int n_rows, int m_cols, double k0)
{
    const Mat2 root = psd_sqrt(sigma_tilde);
    const double a = (n_rows / k0) * (n_rows / k0);
    const double b = (m_cols / k0) * (m_cols / k0);
    const Mat2 shaped = root * Vec2{a, b}.asDiagonal() * root;
    const double top = Eigen::SelfAdjointEigenSolver<Mat2>(symmetrized(shaped), Eigen::EigenvaluesOnly)
                           .eigenvalues()
                           .maxCoeff();
    if (!(top > 0.0)) {
        return 0.0;
    }
    return std::exp(-0.5 / top);
}

inline BeamPlan plan_beam(const Mat6& m_pred, const Vec6& x_pred, const RoadGeometry& road, const RsuConfig& rsu,
                          double gamma, double k0 = kDefaultBeamwidthFactor)
{
    const GeometryJacobian geo = geometry_jacobian(road, {x_pred(kS), x_pred(kN)}, rsu.pose());
    const AngleUncertainty angles = angle_covariance(m_pred, geo.angles);
    const SpatialFreqUncertainty freq = spatial_freq_covariance(angles, geo.view.theta, geo.view.phi);
    const double r0 = radius_for_gamma(gamma);
    const CoveringEllipse ellipse = covering_ellipse(freq.sigma_tilde, r0);
    BeamPlan plan = best_array_size(ellipse.a_theta, ellipse.b_phi, rsu.cols_m, rsu.rows_n, k0);
    plan.r0 = r0;
    plan.method = ellipse.method;
    plan.point_theta = geo.view.theta;
    plan.point_phi = geo.view.phi;
    plan.sigma_tilde = freq.sigma_tilde;
    plan.misalignment = misalignment_estimate(freq.sigma_tilde, plan.best_n, plan.best_m, k0);
    return plan;
}

} // namespace isac
