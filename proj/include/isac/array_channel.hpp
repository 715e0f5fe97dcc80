#pragma once

#include "isac/error.hpp"
#include "isac/linalg.hpp"
#include "isac/rng.hpp"
#include "isac/road_geometry.hpp"
#include "isac/state.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>

namespace isac {

struct RsuConfig {
    double x0 = 0.0;
    double y0 = 0.0;
    double height_h = 10.0;
    int cols_m = 16;
    int rows_n = 16;
    double carrier_fc = 30e9;
    double bandwidth_bw = 500e6;
    double tx_power_p = 1.0;
    double noise_var_sigma2 = dbm_to_watts(-144.0) * 500e6;
    double sample_rate_fs = 500e6;
    int n_sample = 1024;
    double epoch_dt = 0.02;
    double pathloss_eta = 1.0;
    /// Use the delay bound without the squared bandwidth.
    bool tau_printed = false;

    double wavelength() const { return kSpeedOfLight / carrier_fc; }
    int n_elements() const { return cols_m * rows_n; }
    RsuPose pose() const { return {x0, y0, height_h}; }

    void validate() const
    {
        const bool ok = height_h > 0.0 && cols_m >= 1 && rows_n >= 1 && carrier_fc > 0.0 && bandwidth_bw > 0.0 &&
                        tx_power_p > 0.0 && noise_var_sigma2 > 0.0 && sample_rate_fs > 0.0 && n_sample >= 1 &&
                        epoch_dt > 0.0 && pathloss_eta > 0.0 && std::isfinite(x0) && std::isfinite(y0);
        if (!ok) {
            throw Error(ErrorCode::InvalidScenario, "rsu parameters must be positive and finite");
        }
    }
};

struct BeamConfig {
    int active_m = 1;
    int active_n = 1;
    double point_theta = 0.0;
    double point_phi = 0.0;
};

/// UPA steering vector. Element index k maps to row k / M (paired with
/// sin(phi)cos(theta)) and column k % M (paired with sin(phi)sin(theta)).
inline Eigen::VectorXcd steering_vector(double theta, double phi, int m_cols, int n_rows)
{
    const double u = std::sin(phi) * std::cos(theta);
    const double v = std::sin(phi) * std::sin(theta);
    Eigen::VectorXcd a(static_cast<Eigen::Index>(m_cols) * n_rows);
    for (int k = 0; k < m_cols * n_rows; ++k) {
        const int row = k / m_cols;
        const int col = k - m_cols * row;
        a(k) = std::polar(1.0, -kPi * (row * u + col * v));
    }
    return a;
}

/// |sum_{k<count} exp(j pi k delta)|, the one-axis array factor.
inline double array_factor(double delta, int count)
{
    std::complex<double> acc = 0.0;
    for (int k = 0; k < count; ++k) {
        acc += std::polar(1.0, kPi * k * delta);
    }
    return std::abs(acc);
}

/// Spatial-frequency offsets (parallel, perpendicular) between two directions.
inline Vec2 spatial_offset(double theta, double phi, double theta_ref, double phi_ref)
{
    return {std::sin(phi) * std::cos(theta) - std::sin(phi_ref) * std::cos(theta_ref),
            std::sin(phi) * std::sin(theta) - std::sin(phi_ref) * std::sin(theta_ref)};
}

/// Gain of an M' x N' subarray pointed at (theta_hat, phi_hat) toward the
/// target at (theta, phi). The steering vector factorizes per axis, so the
/// inner product is the product of two one-axis array factors.
inline double subarray_gain(double theta, double phi, double theta_hat, double phi_hat, int active_m, int active_n)
{
    const Vec2 off = spatial_offset(theta, phi, theta_hat, phi_hat);
    return array_factor(off(0), active_n) * array_factor(off(1), active_m) /
           std::sqrt(static_cast<double>(active_m) * active_n);
}

inline double tx_gain(double true_theta, double true_phi, const BeamConfig& beam)
{
    return subarray_gain(true_theta, true_phi, beam.point_theta, beam.point_phi, beam.active_m, beam.active_n);
}

inline double rx_gain(double true_theta, double true_phi, double est_theta, double est_phi, int cols_m, int rows_n)
{
    return subarray_gain(true_theta, true_phi, est_theta, est_phi, cols_m, rows_n);
}

inline double path_loss_db(double d, double fc, double eta)
{
    if (!(d > 0.0)) {
        throw Error(ErrorCode::NonPositiveDistance, "distance must be positive");
    }
    return 32.4 + 20.0 * std::log10(fc / 1e6) + 20.0 * eta * std::log10(d / 1e3);
}

inline std::complex<double> reflection_coefficient(double d, std::complex<double> rcs_eps, double lambda)
{
    if (!(d > 0.0)) {
        throw Error(ErrorCode::NonPositiveDistance, "distance must be positive");
    }
    return lambda * rcs_eps / (std::pow(4.0 * kPi, 1.5) * d * d);
}

struct RadarSnr {
    double rho0 = 0.0;
    double rho1 = 0.0;
    double chi = 0.0;
};

inline RadarSnr radar_snrs(const RsuConfig& rsu, std::complex<double> beta, double kappa_t, double kappa_r)
{
    const double rho0 = rsu.tx_power_p * std::norm(beta) * kappa_t * kappa_t / rsu.noise_var_sigma2;
    const double rho1 = rho0 * kappa_r * kappa_r;
    return {rho0, rho1, rho1 * rsu.epoch_dt * rsu.bandwidth_bw};
}

/// Measurement-noise covariance in measurement order (theta, phi, mu, tau,
/// Re beta, Im beta).
struct MeasurementNoise {
    Mat6 q_m = Mat6::Zero();
};

/// d(theta, phi)/d(a, b) with a = pi sin(phi) cos(theta), b = pi sin(phi) sin(theta).
inline Mat2 angle_from_spatial_jacobian(double theta, double phi)
{
    const double sp = std::sin(phi);
    const double cp = std::cos(phi);
    if (std::abs(sp) < 1e-6 || std::abs(cp) < 1e-12) {
        throw Error(ErrorCode::DegenerateAngle, "angle mapping singular at phi = " + std::to_string(phi));
    }
    const double a = kPi * sp * std::cos(theta);
    const double b = kPi * sp * std::sin(theta);
    const double r2 = a * a + b * b;
    const double r = std::sqrt(r2);
    Mat2 j;
    j << -b / r2, a / r2, a / (r * kPi * cp), b / (r * kPi * cp);
    return j;
}

/// SNR floor for the bounds, keeps a beam sitting exactly on a null from
/// producing infinite variances.
inline constexpr double kMinSnr = 1e-30;

inline MeasurementNoise crlb_covariance(const RsuConfig& rsu, const RadarSnr& snr, double theta, double phi)
{
    const double n_r = rsu.n_elements();
    const double ns = rsu.n_sample;
    const double rho0 = std::max(snr.rho0, kMinSnr);
    const double chi = std::max(snr.chi, kMinSnr);
    const double c_ab = 6.0 / (ns * ns * n_r * rho0);
    const Mat2 j = angle_from_spatial_jacobian(theta, phi);
    const double bw_term = rsu.tau_printed ? rsu.bandwidth_bw : rsu.bandwidth_bw * rsu.bandwidth_bw;
    const double c_beta = 1.0 / (ns * n_r * rho0);

    MeasurementNoise out;
    out.q_m.block<2, 2>(kTheta, kTheta) = symmetrized(c_ab * j * j.transpose());
    out.q_m(kMu, kMu) = 1.0 / (4.0 * kPi * kPi * rsu.epoch_dt * rsu.epoch_dt * rsu.sample_rate_fs * chi);
    out.q_m(kTau, kTau) = 3.0 / (2.0 * kPi * kPi * bw_term * chi);
    out.q_m(kObsBetaRe, kObsBetaRe) = 0.5 * c_beta;
    out.q_m(kObsBetaIm, kObsBetaIm) = 0.5 * c_beta;
    return out;
}

inline double achievable_rate(const RsuConfig& rsu, double d, double kappa_t)
{
    const double g = std::pow(10.0, -path_loss_db(d, rsu.carrier_fc, rsu.pathloss_eta) / 10.0);
    return std::log2(1.0 + rsu.tx_power_p * g * kappa_t * kappa_t / rsu.noise_var_sigma2);
}

struct SynthesizedObservation {
    Observation y;
    MeasurementNoise noise;
    RadarSnr snr;
    double kappa_t = 0.0;
    double kappa_r = 0.0;
    PolarView view;
};

/// Draws a radar observation at the estimation floor. The angle pair is
/// drawn first because the receive gain depends on the estimated angles;
/// delay and Doppler noise then follow from the resulting matched-filter SNR.
/// noise_scale = 0 returns the noiseless measurement.
inline SynthesizedObservation synthesize_observation(const VehicleState& truth, const RoadGeometry& road,
                                                     const RsuConfig& rsu, const BeamConfig& beam,
                                                     GaussianSource& rng, double noise_scale = 1.0)
{
    const Vec6 h = measure(truth, road, rsu.pose(), rsu.wavelength());
    SynthesizedObservation out;
    out.view = ccs_to_polar(road, truth.position(), rsu.pose());
    out.kappa_t = tx_gain(h(kTheta), h(kPhi), beam);

    const double rho0 = std::max(radar_snrs(rsu, truth.beta(), out.kappa_t, 1.0).rho0, kMinSnr);
    const double ns = rsu.n_sample;
    const Mat2 j = angle_from_spatial_jacobian(h(kTheta), h(kPhi));
    const Mat2 c_angle = symmetrized((6.0 / (ns * ns * rsu.n_elements() * rho0)) * j * j.transpose());
    const Vec2 angle_noise = psd_sqrt(c_angle) * Vec2{rng(), rng()};

    Vec6 y = h;
    y.head<2>() += noise_scale * angle_noise;
    out.kappa_r = rx_gain(h(kTheta), h(kPhi), y(kTheta), y(kPhi), rsu.cols_m, rsu.rows_n);
    out.snr = radar_snrs(rsu, truth.beta(), out.kappa_t, out.kappa_r);
    out.noise = crlb_covariance(rsu, out.snr, h(kTheta), h(kPhi));
    for (int k = kMu; k <= kObsBetaIm; ++k) {
        y(k) += noise_scale * std::sqrt(out.noise.q_m(k, k)) * rng();
    }
    y(kTheta) = wrap_angle(y(kTheta));
    out.y = Observation::from_vec(y);
    return out;
}

} // namespace isac
