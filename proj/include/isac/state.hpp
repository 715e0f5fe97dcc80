#pragma once

#include "isac/linalg.hpp"
#include "isac/road_geometry.hpp"

#include <complex>

namespace isac {

// State vector layout.
inline constexpr int kS = 0;
inline constexpr int kVs = 1;
inline constexpr int kN = 2;
inline constexpr int kVn = 3;
inline constexpr int kBetaRe = 4;
inline constexpr int kBetaIm = 5;

// Measurement vector layout.
inline constexpr int kTheta = 0;
inline constexpr int kPhi = 1;
inline constexpr int kMu = 2;
inline constexpr int kTau = 3;
inline constexpr int kObsBetaRe = 4;
inline constexpr int kObsBetaIm = 5;

struct VehicleState {
    double s = 0.0;
    double v_s = 0.0;
    double n = 0.0;
    double v_n = 0.0;
    double beta_re = 0.0;
    double beta_im = 0.0;

    Vec6 to_vec() const
    {
        Vec6 v;
        v << s, v_s, n, v_n, beta_re, beta_im;
        return v;
    }

    static VehicleState from_vec(const Vec6& v) { return {v(kS), v(kVs), v(kN), v(kVn), v(kBetaRe), v(kBetaIm)}; }

    std::complex<double> beta() const { return {beta_re, beta_im}; }
    CcsPoint position() const { return {s, n}; }
};

/// Radar observation: azimuth, elevation, Doppler, round-trip delay and the
/// complex reflection amplitude.
struct Observation {
    double theta_hat = 0.0;
    double phi_hat = 0.0;
    double mu_hat = 0.0;
    double tau_hat = 0.0;
    std::complex<double> beta_hat;

    Vec6 to_vec() const
    {
        Vec6 v;
        v << theta_hat, phi_hat, mu_hat, tau_hat, beta_hat.real(), beta_hat.imag();
        return v;
    }

    static Observation from_vec(const Vec6& v)
    {
        return {v(kTheta), v(kPhi), v(kMu), v(kTau), {v(kObsBetaRe), v(kObsBetaIm)}};
    }
};

/// Radial velocity as seen from the RSU ground position.
inline double radial_velocity(double v_s, double v_n, double theta, double alpha)
{
    return v_s * std::cos(theta - alpha) + v_n * std::sin(theta - alpha);
}

/// Noiseless measurement h(x) = [theta, phi, mu, tau, Re beta, Im beta].
inline Vec6 measure(const Vec6& x, const RoadGeometry& road, const RsuPose& rsu, double wavelength)
{
    const PolarView view = ccs_to_polar(road, {x(kS), x(kN)}, rsu);
    const double v_r = radial_velocity(x(kVs), x(kVn), view.theta, view.alpha);
    Vec6 h;
    h << view.theta, view.phi, 2.0 * std::cos(view.phi) * v_r / wavelength, 2.0 * view.d / kSpeedOfLight,
        x(kBetaRe), x(kBetaIm);
    return h;
}

inline Vec6 measure(const VehicleState& x, const RoadGeometry& road, const RsuPose& rsu, double wavelength)
{
    return measure(x.to_vec(), road, rsu, wavelength);
}

} // namespace isac
