#pragma once

#include "isac/error.hpp"
#include "isac/sim_harness.hpp"

#include <boost/uuid/detail/sha1.hpp>
#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace isac {

using Json = nlohmann::json;

inline constexpr int kSummarySchemaVersion = 1;

inline const std::vector<std::string>& csv_columns()
{
    static const std::vector<std::string> cols{"epoch",     "t_ms",     "s_true",   "n_true",     "s_est",
                                               "n_est",     "s_pred",   "n_pred",   "theta_deg",  "phi_deg",
                                               "active_m",  "active_n", "kappa_t",  "rate_bpshz", "aligned",
                                               "p_lk",      "p_lc"};
    return cols;
}

// ---- enum spellings -------------------------------------------------------

inline std::string to_string(TrackerKind k)
{
    switch (k) {
    case TrackerKind::IMM: return "imm";
    case TrackerKind::EKF_LK: return "ekf-lk";
    case TrackerKind::EKF_LC: return "ekf-lc";
    case TrackerKind::CARTESIAN_DIFF: return "cartesian";
    case TrackerKind::STRAIGHT_ROAD: return "straight";
    }
    return "?";
}

inline std::string to_string(BeamMode m)
{
    switch (m) {
    case BeamMode::CONSTANT: return "constant";
    case BeamMode::DYNAMIC: return "dynamic";
    case BeamMode::ORACLE: return "oracle";
    }
    return "?";
}

inline std::string to_string(ModelKind k) { return k == ModelKind::LK ? "LK" : "LC"; }

inline TrackerKind tracker_from_string(const std::string& s)
{
    for (TrackerKind k : {TrackerKind::IMM, TrackerKind::EKF_LK, TrackerKind::EKF_LC, TrackerKind::CARTESIAN_DIFF,
                          TrackerKind::STRAIGHT_ROAD}) {
        if (to_string(k) == s) {
            return k;
        }
    }
    throw Error(ErrorCode::InvalidScenario, "unknown tracker '" + s + "'");
}

inline BeamMode beam_mode_from_string(const std::string& s)
{
    for (BeamMode m : {BeamMode::CONSTANT, BeamMode::DYNAMIC, BeamMode::ORACLE}) {
        if (to_string(m) == s) {
            return m;
        }
    }
    throw Error(ErrorCode::InvalidScenario, "unknown beam mode '" + s + "'");
}

inline ModelKind model_from_string(const std::string& s)
{
    if (s == "LK") {
        return ModelKind::LK;
    }
    if (s == "LC") {
        return ModelKind::LC;
    }
    throw Error(ErrorCode::InvalidScenario, "unknown kinematic model '" + s + "'");
}

// ---- scenario loading -----------------------------------------------------

namespace detail {

inline void reject_unknown(const Json& obj, std::initializer_list<const char*> allowed, const std::string& where)
{
    if (!obj.is_object()) {
        throw Error(ErrorCode::InvalidScenario, where + " must be an object");
    }
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& item : obj.items()) {
        if (!ok.count(item.key())) {
            throw Error(ErrorCode::InvalidScenario, "unknown key '" + item.key() + "' in " + where);
        }
    }
}

template <typename T>
void read_opt(const Json& obj, const char* key, T& out, const std::string& where)
{
    if (!obj.contains(key)) {
        return;
    }
    try {
        out = obj.at(key).get<T>();
    } catch (const Json::exception&) {
        throw Error(ErrorCode::InvalidScenario, where + "." + key + " has the wrong type");
    }
}

inline Json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoError, "cannot open " + path.string());
    }
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::InvalidScenario, path.string() + ": " + e.what());
    }
}

inline std::vector<ControlPoint> read_points(const Json& arr, const std::string& where)
{
    if (!arr.is_array()) {
        throw Error(ErrorCode::InvalidScenario, where + " must be an array of [x, y] pairs");
    }
    std::vector<ControlPoint> pts;
    for (const auto& p : arr) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
            throw Error(ErrorCode::InvalidScenario, where + " must be an array of [x, y] pairs");
        }
        pts.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    return pts;
}

} // namespace detail

/// Builds a scenario from its JSON form. Relative road file paths resolve
/// against base_dir.
inline Scenario scenario_from_json(const Json& j, const std::filesystem::path& base_dir = {})
{
    using detail::read_opt;
    detail::reject_unknown(j,
                           {"name", "road", "rsu", "init", "schedule", "imm", "process_noise", "beam", "world",
                            "filter", "output"},
                           "scenario");
    Scenario sc;
    read_opt(j, "name", sc.name, "scenario");

    if (!j.contains("road")) {
        throw Error(ErrorCode::InvalidScenario, "scenario has no road section");
    }
    const Json& road = j.at("road");
    detail::reject_unknown(road, {"file", "control_points", "lane_half_width", "end_extension_m"}, "road");
    if (road.contains("file")) {
        const std::filesystem::path file = base_dir / road.at("file").get<std::string>();
        const Json rf = detail::read_json_file(file);
        detail::reject_unknown(rf, {"control_points", "lane_half_width"}, file.string());
        sc.control_points = detail::read_points(rf.value("control_points", Json::array()), "road file control_points");
        read_opt(rf, "lane_half_width", sc.lane_half_width, "road file");
    }
    if (road.contains("control_points")) {
        sc.control_points = detail::read_points(road.at("control_points"), "road.control_points");
    }
    read_opt(road, "lane_half_width", sc.lane_half_width, "road");
    read_opt(road, "end_extension_m", sc.road_extension, "road");

    if (j.contains("rsu")) {
        const Json& r = j.at("rsu");
        detail::reject_unknown(r,
                               {"rsu_xyh", "fc_hz", "bw_hz", "tx_power_dbm", "tx_power_w", "noise_psd_dbm_hz",
                                "noise_var_w", "array_m", "array_n", "fs_hz", "n_sample", "dt_s", "pathloss_eta",
                                "crlb"},
                               "rsu");
        if ((r.contains("tx_power_dbm") && r.contains("tx_power_w")) ||
            (r.contains("noise_psd_dbm_hz") && r.contains("noise_var_w"))) {
            throw Error(ErrorCode::InvalidScenario, "rsu power and noise may each be given in one unit only");
        }
        if (r.contains("rsu_xyh")) {
            const Json& xyh = r.at("rsu_xyh");
            if (!xyh.is_array() || xyh.size() != 3) {
                throw Error(ErrorCode::InvalidScenario, "rsu.rsu_xyh must be [x, y, h]");
            }
            sc.rsu.x0 = xyh[0].get<double>();
            sc.rsu.y0 = xyh[1].get<double>();
            sc.rsu.height_h = xyh[2].get<double>();
        }
        read_opt(r, "fc_hz", sc.rsu.carrier_fc, "rsu");
        read_opt(r, "bw_hz", sc.rsu.bandwidth_bw, "rsu");
        double power_dbm = 10.0 * std::log10(sc.rsu.tx_power_p * 1e3);
        read_opt(r, "tx_power_dbm", power_dbm, "rsu");
        sc.rsu.tx_power_p = dbm_to_watts(power_dbm);
        read_opt(r, "tx_power_w", sc.rsu.tx_power_p, "rsu");
        double psd = -144.0;
        read_opt(r, "noise_psd_dbm_hz", psd, "rsu");
        read_opt(r, "array_m", sc.rsu.cols_m, "rsu");
        read_opt(r, "array_n", sc.rsu.rows_n, "rsu");
        read_opt(r, "fs_hz", sc.rsu.sample_rate_fs, "rsu");
        read_opt(r, "n_sample", sc.rsu.n_sample, "rsu");
        read_opt(r, "dt_s", sc.rsu.epoch_dt, "rsu");
        read_opt(r, "pathloss_eta", sc.rsu.pathloss_eta, "rsu");
        sc.rsu.noise_var_sigma2 = dbm_to_watts(psd) * sc.rsu.bandwidth_bw;
        // Resolved configs carry the exact SI values.
        read_opt(r, "noise_var_w", sc.rsu.noise_var_sigma2, "rsu");
        if (r.contains("crlb")) {
            detail::reject_unknown(r.at("crlb"), {"tau_printed"}, "rsu.crlb");
            read_opt(r.at("crlb"), "tau_printed", sc.rsu.tau_printed, "rsu.crlb");
        }
    }

    if (j.contains("init")) {
        const Json& in = j.at("init");
        detail::reject_unknown(in, {"s", "v_s", "n", "v_n", "beta_re", "beta_im", "cov_diag", "cov_offdiag"}, "init");
        read_opt(in, "s", sc.init.s, "init");
        read_opt(in, "v_s", sc.init.v_s, "init");
        read_opt(in, "n", sc.init.n, "init");
        read_opt(in, "v_n", sc.init.v_n, "init");
        read_opt(in, "beta_re", sc.init.beta_re, "init");
        read_opt(in, "beta_im", sc.init.beta_im, "init");
        if (in.contains("cov_diag")) {
            const auto diag = in.at("cov_diag").get<std::vector<double>>();
            if (diag.size() != 6) {
                throw Error(ErrorCode::InvalidScenario, "init.cov_diag needs 6 entries");
            }
            sc.init_cov = Eigen::Map<const Vec6>(diag.data()).asDiagonal();
        }
        if (in.contains("cov_offdiag")) {
            // Entries [row, col, value] with row < col.
            for (const auto& e : in.at("cov_offdiag")) {
                const auto a = e.at(0).get<int>();
                const auto b = e.at(1).get<int>();
                if (a < 0 || b <= a || b > 5) {
                    throw Error(ErrorCode::InvalidScenario, "init.cov_offdiag index out of range");
                }
                sc.init_cov(a, b) = sc.init_cov(b, a) = e.at(2).get<double>();
            }
        }
    }

    if (!j.contains("schedule") || !j.at("schedule").is_array()) {
        throw Error(ErrorCode::InvalidScenario, "scenario needs a schedule array");
    }
    for (const auto& seg : j.at("schedule")) {
        detail::reject_unknown(seg, {"t_start_ms", "t_end_ms", "v_s", "v_n"}, "schedule entry");
        MotionSegment m;
        double t0 = 0.0;
        double t1 = 0.0;
        read_opt(seg, "t_start_ms", t0, "schedule");
        read_opt(seg, "t_end_ms", t1, "schedule");
        m.t_start = t0 * 1e-3;
        m.t_end = t1 * 1e-3;
        read_opt(seg, "v_s", m.v_s, "schedule");
        read_opt(seg, "v_n", m.v_n, "schedule");
        sc.schedule.push_back(m);
    }

    if (j.contains("imm")) {
        const Json& imm = j.at("imm");
        detail::reject_unknown(imm, {"models", "transition", "prediction_weights"}, "imm");
        if (imm.contains("models")) {
            sc.imm_models.clear();
            for (const auto& m : imm.at("models")) {
                sc.imm_models.push_back(model_from_string(m.get<std::string>()));
            }
        }
        if (imm.contains("transition")) {
            const auto rows = imm.at("transition").get<std::vector<std::vector<double>>>();
            sc.transition.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
            for (std::size_t a = 0; a < rows.size(); ++a) {
                if (rows[a].size() != rows.size()) {
                    throw Error(ErrorCode::BadTransitionMatrix, "imm.transition must be square");
                }
                for (std::size_t b = 0; b < rows.size(); ++b) {
                    sc.transition(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = rows[a][b];
                }
            }
        }
        std::string weights = "probability";
        read_opt(imm, "prediction_weights", weights, "imm");
        if (weights != "probability" && weights != "uniform") {
            throw Error(ErrorCode::InvalidScenario, "imm.prediction_weights must be probability or uniform");
        }
        sc.uniform_prediction = weights == "uniform";
    }

    if (j.contains("process_noise")) {
        const Json& p = j.at("process_noise");
        detail::reject_unknown(p, {"sigma_s", "sigma_n", "sigma_vs", "sigma_vn", "sigma_beta", "rho_s_vs", "rho_n_vn"},
                               "process_noise");
        read_opt(p, "sigma_s", sc.process_noise.sigma_s, "process_noise");
        read_opt(p, "sigma_n", sc.process_noise.sigma_n, "process_noise");
        read_opt(p, "sigma_vs", sc.process_noise.sigma_vs, "process_noise");
        read_opt(p, "sigma_vn", sc.process_noise.sigma_vn, "process_noise");
        read_opt(p, "sigma_beta", sc.process_noise.sigma_beta, "process_noise");
        read_opt(p, "rho_s_vs", sc.process_noise.rho_s_vs, "process_noise");
        read_opt(p, "rho_n_vn", sc.process_noise.rho_n_vn, "process_noise");
    }

    if (j.contains("beam")) {
        const Json& b = j.at("beam");
        detail::reject_unknown(b, {"mode", "dynamic", "gamma", "k0"}, "beam");
        if (b.contains("mode")) {
            sc.beam_mode = beam_mode_from_string(b.at("mode").get<std::string>());
        } else if (b.contains("dynamic")) {
            sc.beam_mode = b.at("dynamic").get<bool>() ? BeamMode::DYNAMIC : BeamMode::CONSTANT;
        }
        read_opt(b, "gamma", sc.gamma, "beam");
        read_opt(b, "k0", sc.k0, "beam");
    }

    if (j.contains("world")) {
        const Json& w = j.at("world");
        detail::reject_unknown(w,
                               {"epochs", "mc_runs", "seed", "tracker", "noise_scale", "measurement_noise_scale",
                                "divergence_m"},
                               "world");
        read_opt(w, "epochs", sc.epochs, "world");
        read_opt(w, "mc_runs", sc.mc_runs, "world");
        read_opt(w, "seed", sc.seed, "world");
        if (w.contains("tracker")) {
            sc.tracker = tracker_from_string(w.at("tracker").get<std::string>());
        }
        read_opt(w, "noise_scale", sc.world_noise_scale, "world");
        read_opt(w, "measurement_noise_scale", sc.measurement_noise_scale, "world");
        read_opt(w, "divergence_m", sc.divergence_m, "world");
    }

    if (j.contains("filter")) {
        const Json& f = j.at("filter");
        detail::reject_unknown(f, {"iterations", "posterior_linearization", "gate"}, "filter");
        read_opt(f, "iterations", sc.filter_iterations, "filter");
        read_opt(f, "posterior_linearization", sc.posterior_linearization, "filter");
        read_opt(f, "gate", sc.gate, "filter");
    }
    if (j.contains("output")) {
        detail::reject_unknown(j.at("output"), {"dir", "write_runs"}, "output");
    }
    return sc;
}

inline Scenario load_scenario(const std::filesystem::path& path)
{
    return scenario_from_json(detail::read_json_file(path), path.parent_path());
}

/// A scenario plus the output preferences stored next to it.
struct ScenarioFile {
    Scenario scenario;
    std::string output_dir = "out";
    bool write_runs = true;
};

inline ScenarioFile load_scenario_file(const std::filesystem::path& path)
{
    const Json j = detail::read_json_file(path);
    ScenarioFile f;
    f.scenario = scenario_from_json(j, path.parent_path());
    if (j.contains("output")) {
        detail::read_opt(j.at("output"), "dir", f.output_dir, "output");
        detail::read_opt(j.at("output"), "write_runs", f.write_runs, "output");
    }
    return f;
}

/// Fully resolved configuration, every default spelled out. Feeds both the
/// summary echo and the scenario hash.
inline Json scenario_to_json(const Scenario& sc)
{
    Json pts = Json::array();
    for (const auto& p : sc.control_points) {
        pts.push_back({p.x, p.y});
    }
    Json schedule = Json::array();
    for (const auto& m : sc.schedule) {
        schedule.push_back({{"t_start_ms", m.t_start * 1e3}, {"t_end_ms", m.t_end * 1e3}, {"v_s", m.v_s}, {"v_n", m.v_n}});
    }
    Json models = Json::array();
    for (ModelKind k : sc.imm_models) {
        models.push_back(to_string(k));
    }
    Json transition = Json::array();
    for (Eigen::Index a = 0; a < sc.transition.rows(); ++a) {
        Json row = Json::array();
        for (Eigen::Index b = 0; b < sc.transition.cols(); ++b) {
            row.push_back(sc.transition(a, b));
        }
        transition.push_back(row);
    }
    Json cov = Json::array();
    for (int i = 0; i < 6; ++i) {
        cov.push_back(sc.init_cov(i, i));
    }
    Json cov_off = Json::array();
    for (int a = 0; a < 6; ++a) {
        for (int b = a + 1; b < 6; ++b) {
            if (sc.init_cov(a, b) != 0.0) {
                cov_off.push_back({a, b, sc.init_cov(a, b)});
            }
        }
    }
    const RsuConfig& r = sc.rsu;
    Json j;
    j["name"] = sc.name;
    j["road"] = {{"control_points", pts}, {"lane_half_width", sc.lane_half_width}, {"end_extension_m", sc.road_extension}};
    j["rsu"] = {{"rsu_xyh", {r.x0, r.y0, r.height_h}},
                {"fc_hz", r.carrier_fc},
                {"bw_hz", r.bandwidth_bw},
                {"tx_power_w", r.tx_power_p},
                {"noise_var_w", r.noise_var_sigma2},
                {"array_m", r.cols_m},
                {"array_n", r.rows_n},
                {"fs_hz", r.sample_rate_fs},
                {"n_sample", r.n_sample},
                {"dt_s", r.epoch_dt},
                {"pathloss_eta", r.pathloss_eta},
                {"crlb", {{"tau_printed", r.tau_printed}}}};
    j["init"] = {{"s", sc.init.s},          {"v_s", sc.init.v_s},         {"n", sc.init.n},
                 {"v_n", sc.init.v_n},      {"beta_re", sc.init.beta_re}, {"beta_im", sc.init.beta_im},
                 {"cov_diag", cov}};
    if (!cov_off.empty()) {
        j["init"]["cov_offdiag"] = cov_off;
    }
    j["schedule"] = schedule;
    j["imm"] = {{"models", models},
                {"transition", transition},
                {"prediction_weights", sc.uniform_prediction ? "uniform" : "probability"}};
    const auto& p = sc.process_noise;
    j["process_noise"] = {{"sigma_s", p.sigma_s},   {"sigma_n", p.sigma_n},       {"sigma_vs", p.sigma_vs},
                          {"sigma_vn", p.sigma_vn}, {"sigma_beta", p.sigma_beta}, {"rho_s_vs", p.rho_s_vs},
                          {"rho_n_vn", p.rho_n_vn}};
    j["beam"] = {{"mode", to_string(sc.beam_mode)}, {"gamma", sc.gamma}, {"k0", sc.k0}};
    j["world"] = {{"epochs", sc.epochs},
                  {"mc_runs", sc.mc_runs},
                  {"seed", sc.seed},
                  {"tracker", to_string(sc.tracker)},
                  {"noise_scale", sc.world_noise_scale},
                  {"measurement_noise_scale", sc.measurement_noise_scale},
                  {"divergence_m", sc.divergence_m}};
    j["filter"] = {{"iterations", sc.filter_iterations},
                   {"posterior_linearization", sc.posterior_linearization},
                   {"gate", sc.gate}};
    return j;
}

inline std::string sha1_hex(const std::string& text)
{
    boost::uuids::detail::sha1 h;
    h.process_bytes(text.data(), text.size());
    boost::uuids::detail::sha1::digest_type digest;
    h.get_digest(digest);
    std::string out;
    char buf[9];
    for (unsigned word : digest) {
        std::snprintf(buf, sizeof buf, "%08x", word);
        out += buf;
    }
    return out;
}

/// Content hash of every field that changes the simulation; the name does not.
inline std::string scenario_hash(const Scenario& sc)
{
    Json j = scenario_to_json(sc);
    j.erase("name");
    return sha1_hex(j.dump());
}

// ---- writers --------------------------------------------------------------

/// Shortest round-trip decimal form, independent of locale.
inline void append_number(std::string& out, double v)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, res.ptr);
}

inline void append_number(std::string& out, int v)
{
    char buf[16];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, res.ptr);
}

inline std::string records_to_csv(const std::vector<EpochRecord>& records)
{
    std::string out;
    const auto& cols = csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        out += cols[i];
        out += i + 1 < cols.size() ? ',' : '\n';
    }
    for (const auto& r : records) {
        append_number(out, r.epoch);
        for (double v : {r.t_ms, r.truth(kS), r.truth(kN), r.estimate.s, r.estimate.n, r.prediction.s, r.prediction.n,
                         r.theta_deg, r.phi_deg}) {
            out += ',';
            append_number(out, v);
        }
        out += ',';
        append_number(out, r.active_m);
        out += ',';
        append_number(out, r.active_n);
        out += ',';
        append_number(out, r.kappa_t);
        out += ',';
        append_number(out, r.rate);
        out += r.aligned ? ",1," : ",0,";
        append_number(out, r.p_lk);
        out += ',';
        append_number(out, r.p_lc);
        out += '\n';
    }
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw Error(ErrorCode::IoError, "write failed for " + path.string());
    }
}

inline std::string two_column(const std::string& x_name, const std::string& y_name, const std::vector<double>& x,
                              const std::vector<double>& y)
{
    std::string out = "# " + x_name + " " + y_name + "\n";
    const std::size_t n = std::min(x.size(), y.size());
    for (std::size_t i = 0; i < n; ++i) {
        append_number(out, x[i]);
        out += ' ';
        append_number(out, y[i]);
        out += '\n';
    }
    return out;
}

/// Plot-ready tables: RMSE and rate traces against time, the pooled rate CDF,
/// model probabilities, NEES and the predicted-MSE bound proxy.
inline void write_curves(const std::filesystem::path& dir, const MetricsSummary& m)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
    }
    write_text(dir / "rmse_s.dat", two_column("t_ms", "rmse_s_m", m.t_ms, m.rmse_s));
    write_text(dir / "rmse_n.dat", two_column("t_ms", "rmse_n_m", m.t_ms, m.rmse_n));
    write_text(dir / "rmse_pos.dat", two_column("t_ms", "rmse_pos_m", m.t_ms, m.rmse_pos));
    write_text(dir / "rmse_pred_pos.dat", two_column("t_ms", "rmse_pred_pos_m", m.t_ms, m.rmse_pred_pos));
    write_text(dir / "rate_trace.dat", two_column("t_ms", "mean_rate_bpshz", m.t_ms, m.mean_rate_trace));
    write_text(dir / "p_lk.dat", two_column("t_ms", "mean_p_lk", m.t_ms, m.mean_p_lk));
    write_text(dir / "p_lc.dat", two_column("t_ms", "mean_p_lc", m.t_ms, m.mean_p_lc));
    std::vector<double> cdf(m.rate_sorted.size());
    for (std::size_t i = 0; i < cdf.size(); ++i) {
        cdf[i] = static_cast<double>(i + 1) / static_cast<double>(cdf.size());
    }
    write_text(dir / "rate_cdf.dat", two_column("rate_bpshz", "cdf", m.rate_sorted, cdf));
    if (!m.mean_nees.empty()) {
        write_text(dir / "nees.dat", two_column("t_ms", "mean_nees", m.t_ms, m.mean_nees));
    }
    if (!m.pred_mse.empty()) {
        write_text(dir / "pred_mse_bound_proxy.dat", two_column("t_ms", "pred_mse_m2", m.t_ms, m.pred_mse));
    }
}

inline Json summary_json(const Scenario& sc, const Json& overrides, const MetricsSummary& m,
                         const std::vector<RunResult>& runs)
{
    Json failures = Json::array();
    for (const auto& r : runs) {
        if (!r.failure.empty()) {
            failures.push_back({{"run", r.run}, {"reason", r.failure}});
        }
    }
    Json j;
    j["schema_version"] = kSummarySchemaVersion;
    j["csv_columns"] = csv_columns();
    j["scenario_hash"] = scenario_hash(sc);
    j["config"] = scenario_to_json(sc);
    j["overrides"] = overrides;
    j["metrics"] = {{"mean_rate", m.mean_rate},
                    {"misalignment", m.misalignment},
                    {"mean_rmse_pos", m.mean_rmse_pos},
                    {"mean_rmse_s", m.mean_rmse_s},
                    {"mean_rmse_n", m.mean_rmse_n},
                    {"runs", m.runs},
                    {"diverged", m.diverged},
                    {"epochs_total", m.epochs_total},
                    {"failures", failures}};
    j["traces"] = {{"t_ms", m.t_ms},
                   {"rmse_s", m.rmse_s},
                   {"rmse_n", m.rmse_n},
                   {"rmse_pos", m.rmse_pos},
                   {"mean_p_lk", m.mean_p_lk},
                   {"mean_p_lc", m.mean_p_lc},
                   {"mean_rate", m.mean_rate_trace},
                   {"nees", m.mean_nees},
                   {"nees_dof", m.nees_dof},
                   {"pred_mse_bound_proxy", m.pred_mse}};
    return j;
}

// ---- comparison -----------------------------------------------------------

struct SummaryRow {
    std::string label;
    std::string hash;
    double mean_rate = 0.0;
    double mean_rmse_pos = 0.0;
    double misalignment = 0.0;
};

inline SummaryRow read_summary(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoError, "cannot open " + path.string());
    }
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::SchemaMismatch, path.string() + " is not JSON: " + e.what());
    }
    if (!j.is_object() || j.value("schema_version", -1) != kSummarySchemaVersion || !j.contains("metrics")) {
        throw Error(ErrorCode::SchemaMismatch, path.string() + " is not a version " +
                                                   std::to_string(kSummarySchemaVersion) + " summary");
    }
    try {
        const Json& m = j.at("metrics");
        SummaryRow row;
        row.label = j.at("config").value("name", path.stem().string()) + " (" +
                    j.at("config").at("world").at("tracker").get<std::string>() + ", " +
                    j.at("config").at("beam").at("mode").get<std::string>() + ")";
        row.hash = j.at("scenario_hash").get<std::string>();
        row.mean_rate = m.at("mean_rate").get<double>();
        row.mean_rmse_pos = m.at("mean_rmse_pos").get<double>();
        row.misalignment = m.at("misalignment").get<double>();
        return row;
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::SchemaMismatch, path.string() + ": " + e.what());
    }
}

/// Side-by-side table; deltas are taken against the first summary.
inline std::string compare_summaries(const std::vector<std::filesystem::path>& paths)
{
    if (paths.size() < 2) {
        throw Error(ErrorCode::UsageError, "compare needs at least two summaries");
    }
    std::vector<SummaryRow> rows;
    for (const auto& p : paths) {
        rows.push_back(read_summary(p));
    }
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof line, "%-40s %12s %12s %12s %12s %12s %12s\n", "summary", "mean_rate", "d_rate",
                  "rmse_pos", "d_rmse_pos", "misalign", "d_misalign");
    out << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-40.40s %12.6g %12.6g %12.6g %12.6g %12.6g %12.6g\n", r.label.c_str(),
                      r.mean_rate, r.mean_rate - rows.front().mean_rate, r.mean_rmse_pos,
                      r.mean_rmse_pos - rows.front().mean_rmse_pos, r.misalignment,
                      r.misalignment - rows.front().misalignment);
        out << line;
    }
    return out.str();
}

} // namespace isac
