#pragma once

#include "isac/array_channel.hpp"
#include "isac/beam_adapt.hpp"
#include "isac/error.hpp"
#include "isac/linalg.hpp"
#include "isac/rng.hpp"
#include "isac/road_geometry.hpp"
#include "isac/state.hpp"
#include "isac/tracking.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace isac {

enum class TrackerKind { IMM, EKF_LK, EKF_LC, CARTESIAN_DIFF, STRAIGHT_ROAD };
enum class BeamMode { CONSTANT, DYNAMIC, ORACLE };

/// Scheduled velocities over [t_start, t_end), times in seconds.
struct MotionSegment {
    double t_start = 0.0;
    double t_end = 0.0;
    double v_s = 0.0;
    double v_n = 0.0;
};

struct Scenario {
    std::string name = "scenario";
    std::vector<ControlPoint> control_points;
    double lane_half_width = 6.0;
    /// Straight run-out beyond both road ends, metres.
    double road_extension = 0.0;
    RsuConfig rsu;
    VehicleState init;
    std::vector<MotionSegment> schedule;
    int epochs = 100;
    int mc_runs = 1;
    std::uint64_t seed = 1;
    TrackerKind tracker = TrackerKind::IMM;
    BeamMode beam_mode = BeamMode::CONSTANT;
    double gamma = 0.05;
    double k0 = kDefaultBeamwidthFactor;
    ProcessNoiseParams process_noise;
    Mat6 init_cov = (Vec6() << 1.0, 1.0, 0.25, 0.04, 1e-10, 1e-10).finished().asDiagonal();
    std::vector<ModelKind> imm_models{ModelKind::LK, ModelKind::LC};
    Eigen::MatrixXd transition = (Eigen::MatrixXd(2, 2) << 0.95, 0.05, 0.05, 0.95).finished();
    bool uniform_prediction = false;
    /// Filter defaults: relinearized update with the second-order noise
    /// term; iterations = 1 and no posterior linearization is the plain EKF.
    int filter_iterations = 5;
    bool posterior_linearization = true;
    bool gate = false;
    /// Multiplies the truth process noise.
    double world_noise_scale = 1.0;
    /// Multiplies the synthesized measurement noise (0 gives noiseless observations).
    double measurement_noise_scale = 1.0;
    /// Position error beyond which a run is flagged diverged.
    double divergence_m = 50.0;

    void validate() const
    {
        rsu.validate();
        if (control_points.size() < 3) {
            throw Error(ErrorCode::TooFewPoints, "road needs at least 3 control points");
        }
        if (epochs < 1 || mc_runs < 1) {
            throw Error(ErrorCode::InvalidScenario, "epochs and mc_runs must be at least 1");
        }
        if (schedule.empty()) {
            throw Error(ErrorCode::InvalidScenario, "schedule is empty");
        }
        for (std::size_t i = 0; i < schedule.size(); ++i) {
            if (!(schedule[i].t_end > schedule[i].t_start)) {
                throw Error(ErrorCode::InvalidScenario, "schedule interval " + std::to_string(i) + " is empty");
            }
            if (i > 0 && std::abs(schedule[i].t_start - schedule[i - 1].t_end) > 1e-9) {
                throw Error(ErrorCode::InvalidScenario, "schedule intervals must be contiguous");
            }
        }
        if (epochs * rsu.epoch_dt > schedule.back().t_end - schedule.front().t_start + 1e-9) {
            throw Error(ErrorCode::InvalidScenario, "epochs exceed the schedule span");
        }
        if (!(gamma > 0.0 && gamma < 1.0)) {
            throw Error(ErrorCode::GammaOutOfRange, "gamma must lie in (0, 1)");
        }
        if (!(k0 > 0.0) || world_noise_scale < 0.0 || measurement_noise_scale < 0.0 || filter_iterations < 1) {
            throw Error(ErrorCode::InvalidScenario, "k0, noise scales and filter iterations out of range");
        }
        if (tracker == TrackerKind::CARTESIAN_DIFF && beam_mode == BeamMode::DYNAMIC) {
            throw Error(ErrorCode::InvalidScenario, "the difference baseline has no covariance for dynamic beams");
        }
        if (tracker == TrackerKind::IMM) {
            validate_transition(transition, imm_models.size());
        }
    }

    /// Segment covering t, intervals read as (t_start, t_end]; t at or
    /// before the first start maps to the first segment.
    const MotionSegment& segment_at(double t) const
    {
        for (const auto& seg : schedule) {
            if (t <= seg.t_end + 1e-9) {
                return seg;
            }
        }
        return schedule.back();
    }

    TrackingContext context(const RoadGeometry& road) const
    {
        TrackingContext ctx;
        ctx.road = &road;
        ctx.rsu = rsu.pose();
        ctx.wavelength = rsu.wavelength();
        ctx.dt = rsu.epoch_dt;
        ctx.iterations = filter_iterations;
        ctx.gate = gate;
        ctx.uniform_prediction = uniform_prediction;
        ctx.posterior_linearization = posterior_linearization;
        return ctx;
    }

    RoadGeometry build_road() const
    {
        RoadGeometry road = fit_spline(control_points, lane_half_width);
        road.set_end_extension(road_extension);
        return road;
    }
};

/// Ground-truth trajectory of epochs + 1 states. The step into epoch k uses
/// the scheduled velocity over ((k-1) dt, k dt] plus a random-walk deviation,
/// and that velocity is the state's velocity at k. The lateral deviation is
/// reset and its noise suppressed while the schedule is lane keeping.
inline std::vector<VehicleState> generate_truth(const Scenario& sc, const RoadGeometry& road, GaussianSource& rng)
{
    const double dt = sc.rsu.epoch_dt;
    const Mat6 root_lk = psd_sqrt(process_noise(sc.process_noise, ModelKind::LK));
    const Mat6 root_lc = psd_sqrt(process_noise(sc.process_noise, ModelKind::LC));
    std::vector<VehicleState> truth;
    truth.reserve(static_cast<std::size_t>(sc.epochs) + 1);
    VehicleState x = sc.init;
    const MotionSegment& first = sc.segment_at(0.0);
    x.v_s = first.v_s;
    x.v_n = first.v_n;
    double dev_vs = 0.0;
    double dev_vn = 0.0;
    truth.push_back(x);
    for (int k = 1; k <= sc.epochs; ++k) {
        const MotionSegment& seg = sc.segment_at(k * dt);
        const bool lateral = seg.v_n != 0.0;
        Vec6 z;
        for (int i = 0; i < 6; ++i) {
            z(i) = rng();
        }
        const Vec6 w = sc.world_noise_scale * (lateral ? root_lc : root_lk) * z;
        dev_vs += w(kVs);
        dev_vn = lateral ? dev_vn + w(kVn) : 0.0;
        VehicleState y = x;
        y.v_s = seg.v_s + dev_vs;
        y.v_n = seg.v_n + dev_vn;
        y.s = x.s + y.v_s * dt + w(kS);
        y.n = x.n + y.v_n * dt + w(kN);
        if (std::abs(y.n) > road.lane_half_width()) {
            throw Error(ErrorCode::OffRoad, "truth left the lane at epoch " + std::to_string(k));
        }
        // Path-loss ratio over the noiseless displacement.
        const double d_old = ccs_to_polar(road, x.position(), sc.rsu.pose()).d;
        const double d_new = ccs_to_polar(road, {x.s + y.v_s * dt, x.n + y.v_n * dt}, sc.rsu.pose()).d;
        const double ratio = d_old * d_old / (d_new * d_new);
        y.beta_re = x.beta_re * ratio + w(kBetaRe);
        y.beta_im = x.beta_im * ratio + w(kBetaIm);
        truth.push_back(y);
        x = y;
    }
    return truth;
}

/// Quadratic extrapolation from the last three positions (oldest first).
inline CartesianPoint baseline_cartesian_diff(const std::deque<CartesianPoint>& history)
{
    if (history.size() < 3) {
        throw Error(ErrorCode::InsufficientHistory, "difference predictor needs three positions");
    }
    const auto& p3 = history[history.size() - 3];
    const auto& p2 = history[history.size() - 2];
    const auto& p1 = history[history.size() - 1];
    return {3.0 * p1.x - 3.0 * p2.x + p3.x, 3.0 * p1.y - 3.0 * p2.y + p3.y};
}

/// What a tracker offers the beam planner before the epoch's measurement.
struct TrackerPrediction {
    CartesianPoint position;
    double theta = 0.0;
    double phi = 0.0;
    /// State and covariance in the tracker's own road frame, when it has one.
    std::optional<Vec6> x_pred;
    std::optional<Mat6> m_pred;
    const RoadGeometry* frame = nullptr;
};

/// Estimate in the true road frame, for consistency checks.
struct RoadEstimate {
    Vec6 x = Vec6::Zero();
    Mat6 m = Mat6::Zero();
    Mat6 info_root = Mat6::Zero();
};

class Tracker {
public:
    virtual ~Tracker() = default;
    virtual TrackerPrediction predict() = 0;
    virtual void update(const SynthesizedObservation& obs) = 0;
    virtual CartesianPoint estimate_position() const = 0;
    virtual std::optional<RoadEstimate> estimate_on_road() const = 0;
    virtual double prob_lk() const = 0;
    virtual double prob_lc() const = 0;
};

namespace detail {

inline TrackerPrediction prediction_from_state(const Vec6& x, const Mat6& m, const RoadGeometry& frame,
                                               const RsuPose& rsu)
{
    TrackerPrediction p;
    p.position = ccs_to_cartesian(frame, {x(kS), x(kN)});
    const PolarView view = polar_from_cartesian(p.position, rsu, 0.0);
    p.theta = view.theta;
    p.phi = view.phi;
    p.x_pred = x;
    p.m_pred = m;
    p.frame = &frame;
    return p;
}

} // namespace detail

/// Single-model EKF, optionally on a road model other than the true one.
class EkfTracker final : public Tracker {
public:
    EkfTracker(const Scenario& sc, const RoadGeometry& frame, bool on_true_road, ModelKind kind, const Vec6& x0)
        : model_(KinematicModel::make(kind, sc.process_noise)), ctx_(sc.context(frame)), on_true_road_(on_true_road)
    {
        state_.x_hat = x0;
        state_.m = symmetrized(sc.init_cov);
        if (kind == ModelKind::LK) {
            pin_lateral(state_);
        }
    }

    TrackerPrediction predict() override
    {
        state_ = ekf_predict(state_, model_, ctx_);
        return detail::prediction_from_state(state_.x_pred, state_.m_pred, *ctx_.road, ctx_.rsu);
    }

    void update(const SynthesizedObservation& obs) override
    {
        state_ = ekf_update(state_, obs.y.to_vec(), obs.noise.q_m, model_, ctx_).state;
    }

    CartesianPoint estimate_position() const override
    {
        return ccs_to_cartesian(*ctx_.road, {state_.x_hat(kS), state_.x_hat(kN)});
    }

    std::optional<RoadEstimate> estimate_on_road() const override
    {
        if (!on_true_road_) {
            return std::nullopt;
        }
        return RoadEstimate{state_.x_hat, state_.m, state_.info_root};
    }

    double prob_lk() const override { return model_.kind == ModelKind::LK ? 1.0 : 0.0; }
    double prob_lc() const override { return model_.kind == ModelKind::LC ? 1.0 : 0.0; }

    const FilterState& state() const { return state_; }

private:
    KinematicModel model_;
    TrackingContext ctx_;
    bool on_true_road_;
    FilterState state_;
};

class ImmTracker final : public Tracker {
public:
    ImmTracker(const Scenario& sc, const RoadGeometry& road, const ImmBank& bank)
        : ctx_(sc.context(road)), bank_(bank)
    {
        fused_ = bank.filters.front().x_hat;
        fused_m_ = bank.filters.front().m;
    }

    TrackerPrediction predict() override
    {
        pending_ = imm_predict(bank_, ctx_);
        return detail::prediction_from_state(pending_->fused_prediction, pending_->fused_m_pred, *ctx_.road,
                                             ctx_.rsu);
    }

    void update(const SynthesizedObservation& obs) override
    {
        const ImmStepResult res = imm_update(*pending_, obs.y.to_vec(), obs.noise.q_m, ctx_);
        bank_ = res.bank;
        fused_ = res.fused_estimate;
        fused_m_ = res.fused_m;
        pending_.reset();
    }

    CartesianPoint estimate_position() const override { return ccs_to_cartesian(*ctx_.road, {fused_(kS), fused_(kN)}); }

    std::optional<RoadEstimate> estimate_on_road() const override { return RoadEstimate{fused_, fused_m_, Mat6::Zero()}; }

    double prob_lk() const override { return prob_of(ModelKind::LK); }
    double prob_lc() const override { return prob_of(ModelKind::LC); }

private:
    double prob_of(ModelKind kind) const
    {
        double p = 0.0;
        for (std::size_t i = 0; i < bank_.models.size(); ++i) {
            if (bank_.models[i].kind == kind) {
                p += bank_.probs(static_cast<Eigen::Index>(i));
            }
        }
        return p;
    }

    TrackingContext ctx_;
    ImmBank bank_;
    std::optional<ImmPrediction> pending_;
    Vec6 fused_;
    Mat6 fused_m_;
};

/// Difference baseline: positions come straight from each observation and
/// the next one is extrapolated in the plane, with no road knowledge.
class CartesianDiffTracker final : public Tracker {
public:
    CartesianDiffTracker(const RsuConfig& rsu, const RoadGeometry& road, const Vec6& x0) : rsu_(rsu)
    {
        const auto frame = road.frame(std::clamp(x0(kS), 0.0, road.total_length()));
        const CartesianPoint p0 = ccs_to_cartesian(road, {x0(kS), x0(kN)});
        const double dt = rsu.epoch_dt;
        for (int k = 2; k >= 0; --k) {
            history_.push_back({p0.x - k * dt * x0(kVs) * std::cos(frame.alpha),
                                p0.y - k * dt * x0(kVs) * std::sin(frame.alpha)});
        }
    }

    TrackerPrediction predict() override
    {
        TrackerPrediction p;
        p.position = baseline_cartesian_diff(history_);
        const PolarView view = polar_from_cartesian(p.position, rsu_.pose(), 0.0);
        p.theta = view.theta;
        p.phi = view.phi;
        return p;
    }

    void update(const SynthesizedObservation& obs) override
    {
        const double d = 0.5 * kSpeedOfLight * obs.y.tau_hat;
        const double ground = std::sqrt(std::max(d * d - rsu_.height_h * rsu_.height_h, 0.0));
        history_.push_back({rsu_.x0 + ground * std::cos(obs.y.theta_hat), rsu_.y0 + ground * std::sin(obs.y.theta_hat)});
        if (history_.size() > 3) {
            history_.pop_front();
        }
    }

    CartesianPoint estimate_position() const override { return history_.back(); }
    std::optional<RoadEstimate> estimate_on_road() const override { return std::nullopt; }
    double prob_lk() const override { return 0.0; }
    double prob_lc() const override { return 0.0; }

private:
    RsuConfig rsu_;
    std::deque<CartesianPoint> history_;
};

struct EpochRecord {
    int epoch = 0;
    double t_ms = 0.0;
    Vec6 truth = Vec6::Zero();
    CcsPoint estimate;
    CcsPoint prediction;
    double theta_deg = 0.0;
    double phi_deg = 0.0;
    int active_m = 0;
    int active_n = 0;
    double kappa_t = 0.0;
    double rate = 0.0;
    bool aligned = false;
    double p_lk = 0.0;
    double p_lc = 0.0;
    /// Cartesian distance of the estimate and of the prediction from the truth.
    double est_error = 0.0;
    double pred_error = 0.0;
    double ground_distance = 0.0;
    std::optional<Nees> nees;
    /// Predicted position variance (s plus n) of trackers that carry one.
    std::optional<double> pred_mse;
    double misalignment_estimate = 0.0;
};

struct RunResult {
    int run = 0;
    std::vector<EpochRecord> records;
    bool diverged = false;
    std::string failure;
};

/// Road model of the straight baseline: the line through the first two
/// control points, extended far enough both ways to hold the whole trip.
inline RoadGeometry straight_frame(const Scenario& sc, const RoadGeometry& road)
{
    const ControlPoint a = sc.control_points[0];
    const ControlPoint b = sc.control_points[1];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    const double back = 4.0 * road.total_length() + 100.0;
    const ControlPoint start{a.x - back * (b.x - a.x) / len, a.y - back * (b.y - a.y) / len};
    return straight_road_through(start, a, 2.0 * back, 1e6);
}

/// Builds the tracker a scenario asks for from the shared initial estimate.
inline std::unique_ptr<Tracker> make_tracker(const Scenario& sc, const RoadGeometry& road,
                                             const RoadGeometry& straight, const Vec6& truth0, GaussianSource& rng)
{
    // Drawn the same way for every tracker so runs share initial errors.
    const Vec6 x0 = draw_initial_estimate(truth0, sc.init_cov, rng);
    switch (sc.tracker) {
    case TrackerKind::IMM: {
        std::vector<KinematicModel> models;
        for (ModelKind k : sc.imm_models) {
            models.push_back(KinematicModel::make(k, sc.process_noise));
        }
        return std::make_unique<ImmTracker>(sc, road, bank_from_estimate(x0, sc.init_cov, sc.transition, models));
    }
    case TrackerKind::EKF_LK: return std::make_unique<EkfTracker>(sc, road, true, ModelKind::LK, x0);
    case TrackerKind::EKF_LC: return std::make_unique<EkfTracker>(sc, road, true, ModelKind::LC, x0);
    case TrackerKind::CARTESIAN_DIFF: return std::make_unique<CartesianDiffTracker>(sc.rsu, road, x0);
    case TrackerKind::STRAIGHT_ROAD: {
        const CartesianPoint p = ccs_to_cartesian(road, {x0(kS), x0(kN)});
        const CcsPoint own = cartesian_to_ccs(straight, p);
        Vec6 xs = x0;
        xs(kS) = own.s;
        xs(kN) = own.n;
        return std::make_unique<EkfTracker>(sc, straight, false, ModelKind::LK, xs);
    }
    default: break;
    }
    throw Error(ErrorCode::InvalidScenario, "unknown tracker");
}

/// Beam for one epoch. Constant and oracle use the full array; dynamic sizes
/// the subarray from the predicted covariance.
inline std::pair<BeamConfig, double> choose_beam(const Scenario& sc, const TrackerPrediction& pred,
                                                 const PolarView& truth_view)
{
    BeamConfig beam{sc.rsu.cols_m, sc.rsu.rows_n, pred.theta, pred.phi};
    double misalignment = 0.0;
    switch (sc.beam_mode) {
    case BeamMode::CONSTANT: break;
    case BeamMode::ORACLE:
        beam.point_theta = truth_view.theta;
        beam.point_phi = truth_view.phi;
        break;
    case BeamMode::DYNAMIC: {
        if (!pred.m_pred || !pred.x_pred || pred.frame == nullptr) {
            throw Error(ErrorCode::InvalidScenario, "dynamic beams need a predicted covariance");
        }
        const BeamPlan plan = plan_beam(*pred.m_pred, *pred.x_pred, *pred.frame, sc.rsu, sc.gamma, sc.k0);
        beam.active_m = plan.best_m;
        beam.active_n = plan.best_n;
        misalignment = plan.misalignment;
        break;
    }
    }
    return {beam, misalignment};
}

/// One Monte-Carlo replication. Errors inside the epoch loop end the run and
/// flag it diverged; the epochs already recorded are kept.
inline RunResult run_single(const Scenario& sc, const RoadGeometry& road, const RoadGeometry& straight, int run)
{
    RunResult result;
    result.run = run;
    const auto run_id = static_cast<std::uint32_t>(run);
    GaussianSource truth_rng = make_stream(sc.seed, run_id, Substream::Truth);
    GaussianSource meas_rng = make_stream(sc.seed, run_id, Substream::Measurement);
    GaussianSource init_rng = make_stream(sc.seed, run_id, Substream::Init);
    const std::vector<VehicleState> truth = generate_truth(sc, road, truth_rng);
    std::unique_ptr<Tracker> tracker = make_tracker(sc, road, straight, truth.front().to_vec(), init_rng);
    const RsuPose pose = sc.rsu.pose();

    for (int l = 1; l <= sc.epochs; ++l) {
        const VehicleState& x = truth[static_cast<std::size_t>(l)];
        try {
            const TrackerPrediction pred = tracker->predict();
            const PolarView truth_view = ccs_to_polar(road, x.position(), pose);
            const auto [beam, misalignment] = choose_beam(sc, pred, truth_view);
            const SynthesizedObservation obs =
                synthesize_observation(x, road, sc.rsu, beam, meas_rng, sc.measurement_noise_scale);
            tracker->update(obs);

            EpochRecord rec;
            rec.epoch = l;
            // Rounded to the nanosecond so whole-millisecond times print cleanly.
            rec.t_ms = std::round(l * sc.rsu.epoch_dt * 1e9) / 1e6;
            rec.truth = x.to_vec();
            const CartesianPoint truth_xy = ccs_to_cartesian(road, x.position());
            const CartesianPoint est_xy = tracker->estimate_position();
            const CenterlineProjection est = project_to_centerline(road, est_xy);
            const CenterlineProjection prd = project_to_centerline(road, pred.position);
            rec.estimate = {est.s, est.n};
            rec.prediction = {prd.s, prd.n};
            rec.theta_deg = beam.point_theta * 180.0 / kPi;
            rec.phi_deg = beam.point_phi * 180.0 / kPi;
            rec.active_m = beam.active_m;
            rec.active_n = beam.active_n;
            rec.kappa_t = obs.kappa_t;
            rec.rate = achievable_rate(sc.rsu, truth_view.d, obs.kappa_t);
            rec.aligned = obs.kappa_t * obs.kappa_t >= 0.5 * beam.active_m * beam.active_n;
            rec.p_lk = tracker->prob_lk();
            rec.p_lc = tracker->prob_lc();
            rec.est_error = std::hypot(est_xy.x - truth_xy.x, est_xy.y - truth_xy.y);
            rec.pred_error = std::hypot(pred.position.x - truth_xy.x, pred.position.y - truth_xy.y);
            rec.ground_distance = std::hypot(truth_xy.x - pose.x, truth_xy.y - pose.y);
            if (auto on_road = tracker->estimate_on_road()) {
                rec.nees = nees(on_road->x, on_road->m, rec.truth, on_road->info_root);
            }
            if (pred.m_pred) {
                rec.pred_mse = (*pred.m_pred)(kS, kS) + (*pred.m_pred)(kN, kN);
            }
            rec.misalignment_estimate = misalignment;
            if (rec.est_error > sc.divergence_m) {
                result.diverged = true;
            }
            result.records.push_back(rec);
        } catch (const Error& e) {
            result.diverged = true;
            result.failure = e.what();
            break;
        }
    }
    return result;
}

/// Runs every replication, fanning out over `jobs` threads. Results are
/// stored by run index so the output does not depend on scheduling.
inline std::vector<RunResult> run_batch_runs(const Scenario& sc, int jobs = 1)
{
    sc.validate();
    const RoadGeometry road = sc.build_road();
    const RoadGeometry straight = straight_frame(sc, road);
    std::vector<RunResult> results(static_cast<std::size_t>(sc.mc_runs));
    std::atomic<int> next{0};
    std::mutex error_mutex;
    std::optional<Error> first_error;
    auto worker = [&] {
        for (int r = next++; r < sc.mc_runs; r = next++) {
            try {
                results[static_cast<std::size_t>(r)] = run_single(sc, road, straight, r);
            } catch (const Error& e) {
                const std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) {
                    first_error = e;
                }
            }
        }
    };
    const int n_threads = std::max(1, std::min(jobs, sc.mc_runs));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) {
            pool.emplace_back(worker);
        }
        for (auto& th : pool) {
            th.join();
        }
    }
    if (first_error) {
        throw *first_error;
    }
    return results;
}

struct MetricsSummary {
    std::vector<double> t_ms;
    std::vector<double> rmse_s;
    std::vector<double> rmse_n;
    std::vector<double> rmse_pos;
    std::vector<double> rmse_pred_pos;
    std::vector<double> mean_p_lk;
    std::vector<double> mean_p_lc;
    std::vector<double> mean_rate_trace;
    std::vector<double> mean_nees;
    std::vector<double> nees_dof;
    std::vector<double> pred_mse;
    std::vector<int> samples;
    /// Pooled epoch rates, sorted; the empirical CDF at rate_sorted[i] is (i + 1) / size.
    std::vector<double> rate_sorted;
    double mean_rate = 0.0;
    double misalignment = 0.0;
    double mean_rmse_pos = 0.0;
    double mean_rmse_s = 0.0;
    double mean_rmse_n = 0.0;
    int runs = 0;
    int diverged = 0;
    std::size_t epochs_total = 0;
};

inline MetricsSummary aggregate(const std::vector<RunResult>& runs)
{
    std::size_t max_len = 0;
    for (const auto& r : runs) {
        max_len = std::max(max_len, r.records.size());
    }
    if (runs.empty() || max_len == 0) {
        throw Error(ErrorCode::NoData, "no completed epochs to aggregate");
    }
    MetricsSummary m;
    m.runs = static_cast<int>(runs.size());
    std::vector<double> se(max_len, 0.0), ne(max_len, 0.0), pe(max_len, 0.0), ppe(max_len, 0.0);
    std::vector<double> plk(max_len, 0.0), plc(max_len, 0.0), rate(max_len, 0.0), nees_sum(max_len, 0.0),
        dof_sum(max_len, 0.0), mse(max_len, 0.0);
    std::vector<int> count(max_len, 0), nees_count(max_len, 0), mse_count(max_len, 0);
    std::vector<double> t(max_len, 0.0);
    double rate_total = 0.0;
    std::size_t misaligned = 0;
    for (const auto& r : runs) {
        m.diverged += r.diverged ? 1 : 0;
        for (std::size_t k = 0; k < r.records.size(); ++k) {
            const EpochRecord& e = r.records[k];
            const double ds = e.estimate.s - e.truth(kS);
            const double dn = e.estimate.n - e.truth(kN);
            se[k] += ds * ds;
            ne[k] += dn * dn;
            pe[k] += e.est_error * e.est_error;
            ppe[k] += e.pred_error * e.pred_error;
            plk[k] += e.p_lk;
            plc[k] += e.p_lc;
            rate[k] += e.rate;
            t[k] = e.t_ms;
            ++count[k];
            if (e.nees) {
                nees_sum[k] += e.nees->value;
                dof_sum[k] += e.nees->dof;
                ++nees_count[k];
            }
            if (e.pred_mse) {
                mse[k] += *e.pred_mse;
                ++mse_count[k];
            }
            rate_total += e.rate;
            misaligned += e.aligned ? 0 : 1;
            m.rate_sorted.push_back(e.rate);
        }
    }
    m.epochs_total = m.rate_sorted.size();
    std::sort(m.rate_sorted.begin(), m.rate_sorted.end());
    m.mean_rate = rate_total / static_cast<double>(m.epochs_total);
    m.misalignment = static_cast<double>(misaligned) / static_cast<double>(m.epochs_total);
    for (std::size_t k = 0; k < max_len; ++k) {
        const double c = count[k];
        m.t_ms.push_back(t[k]);
        m.samples.push_back(count[k]);
        m.rmse_s.push_back(std::sqrt(se[k] / c));
        m.rmse_n.push_back(std::sqrt(ne[k] / c));
        m.rmse_pos.push_back(std::sqrt(pe[k] / c));
        m.rmse_pred_pos.push_back(std::sqrt(ppe[k] / c));
        m.mean_p_lk.push_back(plk[k] / c);
        m.mean_p_lc.push_back(plc[k] / c);
        m.mean_rate_trace.push_back(rate[k] / c);
        if (nees_count[k] > 0) {
            m.mean_nees.push_back(nees_sum[k] / nees_count[k]);
            m.nees_dof.push_back(dof_sum[k] / nees_count[k]);
        }
        if (mse_count[k] > 0) {
            m.pred_mse.push_back(mse[k] / mse_count[k]);
        }
    }
    auto mean_of = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) {
            acc += x;
        }
        return acc / static_cast<double>(v.size());
    };
    m.mean_rmse_pos = mean_of(m.rmse_pos);
    m.mean_rmse_s = mean_of(m.rmse_s);
    m.mean_rmse_n = mean_of(m.rmse_n);
    return m;
}

} // namespace isac
