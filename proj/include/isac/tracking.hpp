#pragma once

#include "isac/array_channel.hpp"
#include "isac/error.hpp"
#include "isac/linalg.hpp"
#include "isac/rng.hpp"
#include "isac/road_geometry.hpp"
#include "isac/state.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace isac {

enum class ModelKind { LK, LC };

/// Standard deviations and cross-correlations of the per-epoch process noise.
struct ProcessNoiseParams {
    double sigma_s = 0.08;
    double sigma_vs = 0.1;
    double sigma_n = 0.016;
    double sigma_vn = 0.02;
    double sigma_beta = 2e-6;
    double rho_s_vs = 0.0;
    double rho_n_vn = 0.0;
};

/// Process-noise covariance in state order. The lane-keeping variant has no
/// noise on the lateral velocity; beta noise is split over Re/Im.
inline Mat6 process_noise(const ProcessNoiseParams& p, ModelKind kind)
{
    Mat6 q = Mat6::Zero();
    q(kS, kS) = p.sigma_s * p.sigma_s;
    q(kVs, kVs) = p.sigma_vs * p.sigma_vs;
    q(kS, kVs) = q(kVs, kS) = p.rho_s_vs * p.sigma_s * p.sigma_vs;
    q(kN, kN) = p.sigma_n * p.sigma_n;
    if (kind == ModelKind::LC) {
        q(kVn, kVn) = p.sigma_vn * p.sigma_vn;
        q(kN, kVn) = q(kVn, kN) = p.rho_n_vn * p.sigma_n * p.sigma_vn;
    }
    q(kBetaRe, kBetaRe) = 0.5 * p.sigma_beta * p.sigma_beta;
    q(kBetaIm, kBetaIm) = 0.5 * p.sigma_beta * p.sigma_beta;
    return q;
}

struct KinematicModel {
    ModelKind kind = ModelKind::LK;
    Mat6 q_s = Mat6::Zero();

    static KinematicModel make(ModelKind kind, const ProcessNoiseParams& p) { return {kind, process_noise(p, kind)}; }
};

/// Everything a filter step needs besides the state itself.
struct TrackingContext {
    const RoadGeometry* road = nullptr;
    RsuPose rsu;
    double wavelength = kSpeedOfLight / 30e9;
    double dt = 0.02;
    /// Relinearizations of the measurement update; 1 is the plain EKF.
    int iterations = 1;
    /// Skip updates whose innovation exceeds the 99.9% chi-square(6) gate.
    bool gate = false;
    /// Average the per-model predictions uniformly instead of by probability.
    bool uniform_prediction = false;
    /// Relinearize about the current posterior and add the second-order
    /// linearization error to the measurement noise.
    bool posterior_linearization = false;
};

inline Vec6 evolve(const Vec6& x, double dt, const RoadGeometry& road, const RsuPose& rsu, ModelKind kind)
{
    if (!(dt > 0.0)) {
        throw Error(ErrorCode::InvalidScenario, "dt must be positive");
    }
    Vec6 out = x;
    out(kS) = x(kS) + x(kVs) * dt;
    if (kind == ModelKind::LC) {
        out(kN) = x(kN) + x(kVn) * dt;
    } else {
        out(kVn) = 0.0;
    }
    const double d_old = ccs_to_polar(road, {x(kS), x(kN)}, rsu).d;
    const double d_new = ccs_to_polar(road, {out(kS), out(kN)}, rsu).d;
    const double ratio = (d_old * d_old) / (d_new * d_new);
    out(kBetaRe) = x(kBetaRe) * ratio;
    out(kBetaIm) = x(kBetaIm) * ratio;
    return out;
}

inline VehicleState evolve(const VehicleState& x, double dt, const RoadGeometry& road, const RsuPose& rsu,
                           const KinematicModel& model)
{
    return VehicleState::from_vec(evolve(x.to_vec(), dt, road, rsu, model.kind));
}

inline Mat6 jacobian_g(const Vec6& x, double dt, const RoadGeometry& road, const RsuPose& rsu, ModelKind kind)
{
    const bool lc = kind == ModelKind::LC;
    const double s1 = x(kS) + x(kVs) * dt;
    const double n1 = lc ? x(kN) + x(kVn) * dt : x(kN);
    const GeometryJacobian g0 = geometry_jacobian(road, {x(kS), x(kN)}, rsu);
    const GeometryJacobian g1 = geometry_jacobian(road, {s1, n1}, rsu);
    const double d0sq = g0.view.d * g0.view.d;
    const double d1sq = g1.view.d * g1.view.d;
    const double ratio = d0sq / d1sq;
    // Derivatives of the squared distances at the old and new positions.
    const double dd0_ds = 2.0 * g0.view.d * g0.dd_ds;
    const double dd0_dn = 2.0 * g0.view.d * g0.dd_dn;
    const double dd1_ds = 2.0 * g1.view.d * g1.dd_ds;
    const double dd1_dn = 2.0 * g1.view.d * g1.dd_dn;
    const double dr_ds = dd0_ds / d1sq - d0sq * dd1_ds / (d1sq * d1sq);
    const double dr_dn = dd0_dn / d1sq - d0sq * dd1_dn / (d1sq * d1sq);
    const double dr_dvs = -d0sq * dd1_ds * dt / (d1sq * d1sq);
    const double dr_dvn = lc ? -d0sq * dd1_dn * dt / (d1sq * d1sq) : 0.0;

    Mat6 g = Mat6::Identity();
    g(kS, kVs) = dt;
    if (lc) {
        g(kN, kVn) = dt;
    } else {
        g(kVn, kVn) = 0.0;
    }
    for (int b : {kBetaRe, kBetaIm}) {
        g(b, kS) = x(b) * dr_ds;
        g(b, kVs) = x(b) * dr_dvs;
        g(b, kN) = x(b) * dr_dn;
        g(b, kVn) = x(b) * dr_dvn;
        g(b, b) = ratio;
    }
    return g;
}

inline Mat6 jacobian_h(const Vec6& x, const RoadGeometry& road, const RsuPose& rsu, double wavelength)
{
    const GeometryJacobian geo = geometry_jacobian(road, {x(kS), x(kN)}, rsu);
    const double theta = geo.view.theta;
    const double phi = geo.view.phi;
    const double rel = theta - geo.view.alpha;
    const double v_r = radial_velocity(x(kVs), x(kVn), theta, geo.view.alpha);
    // d v_r / d(theta - alpha)
    const double dvr_drel = -x(kVs) * std::sin(rel) + x(kVn) * std::cos(rel);
    const double scale = 2.0 / wavelength;
    const double th_s = geo.angles(0, 0);
    const double th_n = geo.angles(0, 1);
    const double ph_s = geo.angles(1, 0);
    const double ph_n = geo.angles(1, 1);

    Mat6 h = Mat6::Zero();
    h(kTheta, kS) = th_s;
    h(kTheta, kN) = th_n;
    h(kPhi, kS) = ph_s;
    h(kPhi, kN) = ph_n;
    h(kMu, kS) = scale * (-std::sin(phi) * ph_s * v_r + std::cos(phi) * dvr_drel * (th_s - geo.curvature));
    h(kMu, kN) = scale * (-std::sin(phi) * ph_n * v_r + std::cos(phi) * dvr_drel * th_n);
    h(kMu, kVs) = scale * std::cos(phi) * std::cos(rel);
    h(kMu, kVn) = scale * std::cos(phi) * std::sin(rel);
    h(kTau, kS) = 2.0 / kSpeedOfLight * geo.dd_ds;
    h(kTau, kN) = 2.0 / kSpeedOfLight * geo.dd_dn;
    h(kObsBetaRe, kBetaRe) = 1.0;
    h(kObsBetaIm, kBetaIm) = 1.0;
    return h;
}

/// Second derivatives of the measurement rows over the kinematic states,
/// by central differences of the analytic Jacobian along s and n. The
/// velocities enter linearly, so their own second derivatives vanish.
inline std::array<Mat6, 6> hessian_h(const Vec6& x, const RoadGeometry& road, const RsuPose& rsu, double wavelength)
{
    constexpr double step = 1e-4;
    std::array<Mat6, 6> hess;
    for (auto& m : hess) {
        m.setZero();
    }
    for (int j : {kS, kN}) {
        Vec6 up = x;
        Vec6 down = x;
        up(j) += step;
        down(j) -= step;
        const Mat6 diff = (jacobian_h(up, road, rsu, wavelength) - jacobian_h(down, road, rsu, wavelength)) / (2.0 * step);
        for (int row : {kTheta, kPhi, kMu, kTau}) {
            for (int c = 0; c < 4; ++c) {
                hess[static_cast<std::size_t>(row)](j, c) = diff(row, c);
            }
        }
    }
    for (int row : {kTheta, kPhi, kMu, kTau}) {
        Mat6& m = hess[static_cast<std::size_t>(row)];
        for (int v : {kVs, kVn}) {
            m(v, kS) = m(kS, v);
            m(v, kN) = m(kN, v);
        }
        m(kS, kN) = m(kN, kS) = 0.5 * (m(kS, kN) + m(kN, kS));
    }
    return hess;
}

struct FilterState {
    Vec6 x_hat = Vec6::Zero();
    Mat6 m = Mat6::Zero();
    Vec6 x_pred = Vec6::Zero();
    Mat6 m_pred = Mat6::Zero();
    /// Upper-triangular R with R^T R = m^-1 on the free components, left by
    /// the last measurement update. Zero when unavailable.
    Mat6 info_root = Mat6::Zero();
};

/// Innovation statistics of one update, needed by the model-probability step.
struct EkfUpdate {
    FilterState state;
    Vec6 residual = Vec6::Zero();
    Mat6 s = Mat6::Zero();
    double mahalanobis = 0.0;
    double log_likelihood = 0.0;
    bool gated = false;
};

/// Inverse of an innovation covariance via Jacobi equilibration, with its log
/// determinant. Throws SingularInnovation when the equilibrated matrix has a
/// condition number above 1e12.
struct InnovationSolver {
    Mat6 inverse;
    double log_det = 0.0;

    explicit InnovationSolver(const Mat6& s)
    {
        Vec6 scale;
        for (int i = 0; i < 6; ++i) {
            if (!(s(i, i) > 0.0) || !std::isfinite(s(i, i))) {
                throw Error(ErrorCode::SingularInnovation, "innovation covariance has a non-positive diagonal");
            }
            scale(i) = 1.0 / std::sqrt(s(i, i));
        }
        const Mat6 eq = symmetrized(scale.asDiagonal() * s * scale.asDiagonal());
        Eigen::SelfAdjointEigenSolver<Mat6> eig(eq);
        const double lo = eig.eigenvalues().minCoeff();
        const double hi = eig.eigenvalues().maxCoeff();
        if (!(lo > 0.0) || hi / lo > 1e12) {
            throw Error(ErrorCode::SingularInnovation, "innovation covariance condition number exceeds 1e12");
        }
        const Mat6 eq_inv =
            eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
        inverse = symmetrized(scale.asDiagonal() * eq_inv * scale.asDiagonal());
        log_det = eig.eigenvalues().array().log().sum() - 2.0 * scale.array().log().sum();
    }
};

/// Components a model estimates; a lane-keeping filter holds v_n at zero.
inline std::vector<int> free_components(ModelKind kind)
{
    std::vector<int> idx;
    for (int i = 0; i < 6; ++i) {
        if (!(kind == ModelKind::LK && i == kVn)) {
            idx.push_back(i);
        }
    }
    return idx;
}

namespace detail {

/// Lower-triangular factor L of a symmetric positive-definite matrix with
/// D^-1 L L^T D^-1 = m, D the Jacobi scaling. Returns false if m is not PD.
inline bool scaled_cholesky(const Eigen::MatrixXd& m, Eigen::MatrixXd& lower, Eigen::VectorXd& scale)
{
    const Eigen::Index k = m.rows();
    scale.resize(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        if (!(m(i, i) > 0.0) || !std::isfinite(m(i, i))) {
            return false;
        }
        scale(i) = 1.0 / std::sqrt(m(i, i));
    }
    const Eigen::MatrixXd eq = scale.asDiagonal() * m * scale.asDiagonal();
    Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (eq + eq.transpose()));
    if (llt.info() != Eigen::Success) {
        return false;
    }
    lower = llt.matrixL();
    return true;
}

} // namespace detail

inline FilterState ekf_predict(const FilterState& f, const KinematicModel& model, const TrackingContext& ctx)
{
    FilterState out = f;
    const Mat6 g = jacobian_g(f.x_hat, ctx.dt, *ctx.road, ctx.rsu, model.kind);
    out.x_pred = evolve(f.x_hat, ctx.dt, *ctx.road, ctx.rsu, model.kind);
    out.m_pred = symmetrized(g * f.m * g.transpose() + model.q_s);
    return out;
}

/// Measurement update from the prior held in f.x_pred / f.m_pred, solved as
/// a least-squares problem on the square-root information of prior and
/// measurement. The posterior variances can sit twenty orders of magnitude
/// below the prior ones, which the gain form cannot resolve in double
/// precision. With ctx.iterations > 1 the measurement model is relinearized
/// about each new estimate (Gauss-Newton on the posterior mode); the first
/// pass equals the plain EKF update.
inline EkfUpdate ekf_update(const FilterState& f, const Vec6& y, const Mat6& q_m, const KinematicModel& model,
                            const TrackingContext& ctx)
{
    const std::vector<int> idx = free_components(model.kind);
    const auto k = static_cast<Eigen::Index>(idx.size());

    Eigen::MatrixXd m_prior(k, k);
    for (Eigen::Index a = 0; a < k; ++a) {
        for (Eigen::Index b = 0; b < k; ++b) {
            m_prior(a, b) = f.m_pred(idx[a], idx[b]);
        }
    }
    Eigen::MatrixXd prior_l;
    Eigen::VectorXd prior_scale;
    if (!detail::scaled_cholesky(m_prior, prior_l, prior_scale)) {
        throw Error(ErrorCode::NonPsdCovariance, "predicted covariance is not positive definite");
    }
    // Prior square-root information: R_p^T R_p = m_prior^-1.
    const Eigen::MatrixXd prior_root =
        prior_l.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd(prior_scale.asDiagonal()));

    Vec6 x_i = f.x_pred;
    Mat6 h;
    Vec6 r;
    Mat6 r_eff;
    Eigen::MatrixXd q_l;
    Eigen::VectorXd q_scale;
    Eigen::MatrixXd root;
    Eigen::VectorXd tail;
    Mat6 m_current = f.m_pred;
    for (int it = 0; it < std::max(1, ctx.iterations); ++it) {
        h = jacobian_h(x_i, *ctx.road, ctx.rsu, ctx.wavelength);
        Vec6 predicted = measure(x_i, *ctx.road, ctx.rsu, ctx.wavelength);
        r_eff = q_m;
        if (ctx.posterior_linearization) {
            const std::array<Mat6, 6> hess = hessian_h(x_i, *ctx.road, ctx.rsu, ctx.wavelength);
            std::array<Mat6, 6> hm;
            for (std::size_t a = 0; a < 6; ++a) {
                hm[a] = hess[a] * m_current;
                predicted(static_cast<Eigen::Index>(a)) += 0.5 * hm[a].trace();
            }
            for (std::size_t a = 0; a < 6; ++a) {
                for (std::size_t b = 0; b <= a; ++b) {
                    const double term = 0.5 * (hm[a] * hm[b]).trace();
                    r_eff(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += term;
                    if (a != b) {
                        r_eff(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) += term;
                    }
                }
            }
        }
        if (!detail::scaled_cholesky(r_eff, q_l, q_scale)) {
            throw Error(ErrorCode::SingularInnovation, "measurement noise covariance is not positive definite");
        }
        const Eigen::MatrixXd whiten =
            q_l.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd(q_scale.asDiagonal()));
        r = y - predicted - h * (f.x_pred - x_i);
        r(kTheta) = wrap_angle(r(kTheta));
        r(kPhi) = wrap_angle(r(kPhi));

        Eigen::MatrixXd h_free(6, k);
        for (Eigen::Index a = 0; a < k; ++a) {
            h_free.col(a) = h.col(idx[a]);
        }
        const Eigen::MatrixXd a_meas = whiten * h_free;
        const Eigen::VectorXd b_meas = whiten * r;
        // Heavy rows first keeps Householder QR accurate under wide row scaling.
        std::vector<Eigen::Index> order(6);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](Eigen::Index p, Eigen::Index q) {
            return a_meas.row(p).norm() > a_meas.row(q).norm();
        });
        Eigen::MatrixXd stacked(6 + k, k);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(6 + k);
        for (Eigen::Index row = 0; row < 6; ++row) {
            stacked.row(row) = a_meas.row(order[static_cast<std::size_t>(row)]);
            rhs(row) = b_meas(order[static_cast<std::size_t>(row)]);
        }
        stacked.bottomRows(k) = prior_root;

        const Eigen::HouseholderQR<Eigen::MatrixXd> qr(stacked);
        const Eigen::VectorXd qtb = qr.householderQ().transpose() * rhs;
        root = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
        const Eigen::VectorXd delta = root.triangularView<Eigen::Upper>().solve(qtb.head(k));
        tail = qtb.tail(6);
        if (ctx.posterior_linearization) {
            const Eigen::MatrixXd root_inv =
                root.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(k, k));
            const Eigen::MatrixXd m_free = root_inv * root_inv.transpose();
            m_current.setZero();
            for (Eigen::Index a = 0; a < k; ++a) {
                for (Eigen::Index b = 0; b < k; ++b) {
                    m_current(idx[a], idx[b]) = 0.5 * (m_free(a, b) + m_free(b, a));
                }
            }
        }

        Vec6 x_next = f.x_pred;
        for (Eigen::Index a = 0; a < k; ++a) {
            x_next(idx[a]) += delta(a);
        }
        double step = 0.0;
        for (int j = 0; j < 6; ++j) {
            const double sd = std::sqrt(std::max(f.m_pred(j, j), 0.0));
            if (sd > 0.0) {
                step = std::max(step, std::abs(x_next(j) - x_i(j)) / sd);
            }
        }
        x_i = x_next;
        if (step < 1e-9) {
            break;
        }
    }

    EkfUpdate out;
    out.residual = r;
    out.s = symmetrized(h * f.m_pred * h.transpose() + r_eff);
    // S itself is never inverted. Its raw condition number grows with the
    // prior-to-measurement variance ratio and says nothing about this solve,
    // so the guard looks at the matrices that are factored.
    (void)InnovationSolver(r_eff);
    for (Eigen::Index a = 0; a < k; ++a) {
        if (!std::isfinite(root(a, a)) || root(a, a) == 0.0) {
            throw Error(ErrorCode::SingularInnovation, "posterior information is singular");
        }
    }
    // log det S = log det Q + log det M_prior + log det(R^T R)
    double log_det = 2.0 * q_l.diagonal().array().abs().log().sum() - 2.0 * q_scale.array().log().sum() +
                     2.0 * prior_l.diagonal().array().abs().log().sum() - 2.0 * prior_scale.array().log().sum() +
                     2.0 * root.diagonal().array().abs().log().sum();
    out.mahalanobis = tail.squaredNorm();
    out.log_likelihood = -0.5 * out.mahalanobis - 0.5 * log_det - 3.0 * std::log(2.0 * kPi);
    out.state = f;
    // 99.9% quantile of chi-square with 6 degrees of freedom.
    if (ctx.gate && out.mahalanobis > 22.457744484825326) {
        out.gated = true;
        out.state.x_hat = f.x_pred;
        out.state.m = f.m_pred;
        out.state.info_root.setZero();
        return out;
    }
    out.state.x_hat = x_i;
    const Eigen::MatrixXd root_inv =
        root.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(k, k));
    const Eigen::MatrixXd m_free = root_inv * root_inv.transpose();
    out.state.m.setZero();
    out.state.info_root.setZero();
    for (Eigen::Index a = 0; a < k; ++a) {
        for (Eigen::Index b = 0; b < k; ++b) {
            out.state.m(idx[a], idx[b]) = 0.5 * (m_free(a, b) + m_free(b, a));
            out.state.info_root(idx[a], idx[b]) = root(a, b);
        }
    }
    return out;
}

inline EkfUpdate ekf_step(const FilterState& f, const Vec6& y, const Mat6& q_m, const KinematicModel& model,
                          const TrackingContext& ctx)
{
    return ekf_update(ekf_predict(f, model, ctx), y, q_m, model, ctx);
}

struct ImmBank {
    std::vector<KinematicModel> models;
    std::vector<FilterState> filters;
    Eigen::VectorXd probs;
    /// transition(j, i) is the probability of switching from model j to i.
    Eigen::MatrixXd transition;
};

inline void validate_transition(const Eigen::MatrixXd& t, std::size_t n_models)
{
    if (t.rows() != static_cast<Eigen::Index>(n_models) || t.cols() != t.rows()) {
        throw Error(ErrorCode::BadTransitionMatrix, "transition matrix must be square with one row per model");
    }
    for (Eigen::Index j = 0; j < t.rows(); ++j) {
        if ((t.row(j).array() < 0.0).any() || !t.row(j).allFinite() || std::abs(t.row(j).sum() - 1.0) > 1e-9) {
            throw Error(ErrorCode::BadTransitionMatrix, "row " + std::to_string(j) + " is not a probability vector");
        }
    }
}

/// Pins the lateral velocity of a lane-keeping filter.
inline void pin_lateral(FilterState& f)
{
    f.x_hat(kVn) = 0.0;
    f.m.row(kVn).setZero();
    f.m.col(kVn).setZero();
}

/// Initial estimate: the truth perturbed by one draw from init_cov.
inline Vec6 draw_initial_estimate(const Vec6& truth0, const Mat6& init_cov, GaussianSource& rng)
{
    if (min_eigenvalue(init_cov) < -1e-12) {
        throw Error(ErrorCode::NonPsdCovariance, "initial covariance is not PSD");
    }
    Vec6 z;
    for (int i = 0; i < 6; ++i) {
        z(i) = rng();
    }
    return truth0 + psd_sqrt(init_cov) * z;
}

/// Bank whose filters all start from x0 with uniform model probabilities.
inline ImmBank bank_from_estimate(const Vec6& x0, const Mat6& init_cov, const Eigen::MatrixXd& t,
                                  const std::vector<KinematicModel>& models)
{
    if (models.empty()) {
        throw Error(ErrorCode::InvalidScenario, "at least one kinematic model is required");
    }
    validate_transition(t, models.size());
    ImmBank bank;
    bank.models = models;
    bank.transition = t;
    bank.probs = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(models.size()), 1.0 / models.size());
    for (const auto& model : models) {
        FilterState f;
        f.x_hat = x0;
        f.m = symmetrized(init_cov);
        if (model.kind == ModelKind::LK) {
            pin_lateral(f);
        }
        f.x_pred = f.x_hat;
        f.m_pred = f.m;
        bank.filters.push_back(f);
    }
    return bank;
}

inline ImmBank initialize_bank(const Vec6& truth0, const Mat6& init_cov, const Eigen::MatrixXd& t,
                               const std::vector<KinematicModel>& models, GaussianSource& rng)
{
    validate_transition(t, models.size());
    return bank_from_estimate(draw_initial_estimate(truth0, init_cov, rng), init_cov, t, models);
}

/// Bank after the interaction and per-model prediction, plus the combined
/// one-step prediction used for beam pointing.
struct ImmPrediction {
    ImmBank bank;
    Eigen::VectorXd prior_probs;
    std::vector<Vec6> model_predictions;
    Vec6 fused_prediction = Vec6::Zero();
    Mat6 fused_m_pred = Mat6::Zero();
};

inline ImmPrediction imm_predict(const ImmBank& bank, const TrackingContext& ctx)
{
    const auto n = static_cast<Eigen::Index>(bank.models.size());
    ImmPrediction out;
    out.bank = bank;
    // prior_probs(i) = sum_j T(j, i) p(j)
    out.prior_probs = bank.transition.transpose() * bank.probs;
    out.model_predictions.resize(bank.models.size());

    std::vector<Vec6> evolved(bank.models.size() * bank.models.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& model = bank.models[static_cast<std::size_t>(i)];
        Vec6 mixed = Vec6::Zero();
        Vec6 predicted = Vec6::Zero();
        std::vector<double> weight(static_cast<std::size_t>(n), 0.0);
        for (Eigen::Index j = 0; j < n; ++j) {
            const double c = out.prior_probs(i) > 0.0 ? bank.transition(j, i) * bank.probs(j) / out.prior_probs(i)
                                                      : (i == j ? 1.0 : 0.0);
            weight[static_cast<std::size_t>(j)] = c;
            const Vec6& xj = bank.filters[static_cast<std::size_t>(j)].x_hat;
            mixed += c * xj;
            predicted += c * evolve(xj, ctx.dt, *ctx.road, ctx.rsu, model.kind);
        }
        Mat6 mixed_m = Mat6::Zero();
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& fj = bank.filters[static_cast<std::size_t>(j)];
            const Vec6 diff = mixed - fj.x_hat;
            mixed_m += weight[static_cast<std::size_t>(j)] * (fj.m + diff * diff.transpose());
        }
        FilterState input = bank.filters[static_cast<std::size_t>(i)];
        input.x_hat = mixed;
        input.m = symmetrized(mixed_m);
        out.bank.filters[static_cast<std::size_t>(i)] = ekf_predict(input, model, ctx);
        out.model_predictions[static_cast<std::size_t>(i)] = predicted;
    }

    const Eigen::VectorXd w =
        ctx.uniform_prediction ? Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n)) : out.prior_probs;
    for (Eigen::Index i = 0; i < n; ++i) {
        out.fused_prediction += w(i) * out.model_predictions[static_cast<std::size_t>(i)];
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec6 diff = out.model_predictions[static_cast<std::size_t>(i)] - out.fused_prediction;
        out.fused_m_pred += w(i) * (out.bank.filters[static_cast<std::size_t>(i)].m_pred + diff * diff.transpose());
    }
    out.fused_m_pred = symmetrized(out.fused_m_pred);
    return out;
}

struct ImmStepResult {
    ImmBank bank;
    Vec6 fused_prediction = Vec6::Zero();
    Mat6 fused_m_pred = Mat6::Zero();
    Vec6 fused_estimate = Vec6::Zero();
    Mat6 fused_m = Mat6::Zero();
    /// True when every model likelihood underflowed and the prior was kept.
    bool likelihood_fallback = false;
};

inline ImmStepResult imm_update(const ImmPrediction& pred, const Vec6& y, const Mat6& q_m, const TrackingContext& ctx)
{
    const auto n = static_cast<Eigen::Index>(pred.bank.models.size());
    ImmStepResult out;
    out.bank = pred.bank;
    out.fused_prediction = pred.fused_prediction;
    out.fused_m_pred = pred.fused_m_pred;

    Eigen::VectorXd log_post(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        const EkfUpdate upd = ekf_update(pred.bank.filters[idx], y, q_m, pred.bank.models[idx], ctx);
        out.bank.filters[idx] = upd.state;
        log_post(i) = pred.prior_probs(i) > 0.0 ? upd.log_likelihood + std::log(pred.prior_probs(i))
                                                : -std::numeric_limits<double>::infinity();
    }
    const double top = log_post.maxCoeff();
    if (!std::isfinite(top)) {
        out.likelihood_fallback = true;
        out.bank.probs = pred.prior_probs / pred.prior_probs.sum();
    } else {
        Eigen::VectorXd p = (log_post.array() - top).exp().matrix();
        out.bank.probs = p / p.sum();
    }

    for (Eigen::Index i = 0; i < n; ++i) {
        out.fused_estimate += out.bank.probs(i) * out.bank.filters[static_cast<std::size_t>(i)].x_hat;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& f = out.bank.filters[static_cast<std::size_t>(i)];
        const Vec6 diff = f.x_hat - out.fused_estimate;
        out.fused_m += out.bank.probs(i) * (f.m + diff * diff.transpose());
    }
    out.fused_m = symmetrized(out.fused_m);
    return out;
}

inline ImmStepResult imm_step(const ImmBank& bank, const Vec6& y, const Mat6& q_m, const TrackingContext& ctx)
{
    return imm_update(imm_predict(bank, ctx), y, q_m, ctx);
}

/// Normalized estimation error squared over the components with non-zero
/// variance (a pinned lateral velocity drops out). When the filter kept its
/// square-root information the error is whitened with it directly.
struct Nees {
    double value = 0.0;
    int dof = 0;
};

inline Nees nees(const Vec6& estimate, const Mat6& m, const Vec6& truth, const Mat6& info_root = Mat6::Zero())
{
    std::vector<int> keep;
    for (int i = 0; i < 6; ++i) {
        if (m(i, i) > 0.0) {
            keep.push_back(i);
        }
    }
    const auto k = static_cast<Eigen::Index>(keep.size());
    Eigen::VectorXd err(k);
    for (Eigen::Index a = 0; a < k; ++a) {
        err(a) = estimate(keep[static_cast<std::size_t>(a)]) - truth(keep[static_cast<std::size_t>(a)]);
    }
    if (!info_root.isZero(0.0)) {
        Eigen::MatrixXd root(k, k);
        for (Eigen::Index a = 0; a < k; ++a) {
            for (Eigen::Index b = 0; b < k; ++b) {
                root(a, b) = info_root(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(b)]);
            }
        }
        return {(root * err).squaredNorm(), static_cast<int>(k)};
    }
    Eigen::MatrixXd sub(k, k);
    Eigen::VectorXd scale(k);
    for (Eigen::Index a = 0; a < k; ++a) {
        scale(a) = 1.0 / std::sqrt(m(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(a)]));
        for (Eigen::Index b = 0; b < k; ++b) {
            sub(a, b) = m(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(b)]);
        }
    }
    const Eigen::MatrixXd eq = scale.asDiagonal() * sub * scale.asDiagonal();
    const Eigen::VectorXd e = scale.asDiagonal() * err;
    return {e.dot(eq.ldlt().solve(e)), static_cast<int>(k)};
}

} // namespace isac
