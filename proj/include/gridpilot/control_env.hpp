#pragma once

// The control MDP around the physics: state = node-phase voltage magnitudes,
// action = one reactive-power coefficient per zone, reward = negative
// voltage and curtailment barriers.

#include <gridpilot/dsse.hpp>
#include <gridpilot/error.hpp>
#include <gridpilot/feeder.hpp>
#include <gridpilot/injection.hpp>
#include <gridpilot/powerflow.hpp>
#include <gridpilot/scenario.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <vector>

namespace gridpilot::env {

struct MdpState {
    Eigen::VectorXd v_mag;
};

struct MdpAction {
    std::vector<double> coefficients;
};

struct RewardConfig {
    double lambda_weight = 1.0;
    double eta_weight = 0.5;
    double v_min = 0.95;
    double v_max = 1.05;
    double v_nominal = 1.0;

    void validate() const {
        if (!(v_min < v_nominal && v_nominal < v_max)) throw SchemaError("reward config needs v_min < v_nominal < v_max");
        if (!(lambda_weight >= 0.0 && eta_weight >= 0.0)) throw SchemaError("reward weights must be nonnegative");
    }
};

inline void to_json(nlohmann::json& j, const RewardConfig& r) {
    j = {{"lambda_weight", r.lambda_weight}, {"eta_weight", r.eta_weight}, {"v_min", r.v_min},
         {"v_max", r.v_max},                 {"v_nominal", r.v_nominal}};
}

inline double q_max_no_curtailment(double s_rated, double p_pv) {
    if (p_pv < 0.0 || p_pv > s_rated) throw NumericalError("PV output outside [0, s_rated]");
    return std::sqrt(s_rated * s_rated - p_pv * p_pv);
}

inline double voltage_barrier(double v, const RewardConfig& cfg) {
    const double d = v - cfg.v_nominal;
    if (cfg.v_min <= v && v <= cfg.v_max) return d * d;
    return std::abs(d);
}

inline double curtailment_barrier(double q, double q_max) {
    const double excess = std::abs(q) - q_max;
    return excess > 0.0 ? excess : 0.0;
}

inline double reward(std::span<const double> v_mags, std::span<const double> q_setpoints,
                     std::span<const double> q_max_values, const RewardConfig& cfg) {
    if (q_setpoints.size() != q_max_values.size()) throw ShapeError("reward: setpoint and Q_max lengths differ");
    double lam = 0.0, gam = 0.0;
    for (double v : v_mags) lam += voltage_barrier(v, cfg);
    for (std::size_t k = 0; k < q_setpoints.size(); ++k) gam += curtailment_barrier(q_setpoints[k], q_max_values[k]);
    return -(cfg.lambda_weight * lam + cfg.eta_weight * gam);
}

inline double reward(const Eigen::VectorXd& v_mags, std::span<const double> q_setpoints,
                     std::span<const double> q_max_values, const RewardConfig& cfg) {
    return reward(std::span<const double>(v_mags.data(), static_cast<std::size_t>(v_mags.size())), q_setpoints,
                  q_max_values, cfg);
}

inline double objective_deviation(const Eigen::VectorXd& v_mags, double v_nominal) {
    return (v_mags.array() - v_nominal).abs().sum();
}

inline std::size_t violation_count(const Eigen::VectorXd& v_mags, const RewardConfig& cfg) {
    return static_cast<std::size_t>((v_mags.array() < cfg.v_min || v_mags.array() > cfg.v_max).count());
}

/// Q_PV[k] = a_zone(k) * Q_rated[k], hard-limited to +-Q_rated[k]. Coefficients
/// outside [-1, 1] are clamped first and the clamp is logged.
inline std::vector<double> map_action(const MdpAction& action, const std::vector<PvUnit>& pv_units,
                                      const std::vector<int>& zone_map) {
    if (zone_map.size() != pv_units.size()) throw ShapeError("zone map must cover every PV unit");
    std::vector<double> q(pv_units.size());
    for (std::size_t k = 0; k < pv_units.size(); ++k) {
        const auto z = static_cast<std::size_t>(zone_map[k]);
        if (zone_map[k] < 0 || z >= action.coefficients.size())
            throw ShapeError("PV unit " + std::to_string(k) + " maps to a zone outside the action");
        double a = action.coefficients[z];
        if (!std::isfinite(a)) throw NumericalError("non-finite action coefficient");
        if (a < -1.0 || a > 1.0) {
            spdlog::debug("action coefficient {} clamped to [-1, 1]", a);
            a = std::clamp(a, -1.0, 1.0);
        }
        const double qr = pv_units[k].q_rated;
        q[k] = std::clamp(a * qr, -qr, qr);
    }
    return q;
}

/// Everything env_step needs. Without a DSSE model the agent observes the
/// true voltages (perfect-state mode).
class Environment {
public:
    Environment(Feeder feeder, std::shared_ptr<const dsse::DsseModel> estimator = nullptr)
        : feeder_(std::move(feeder)), y_(build_admittance(feeder_)), fingerprint_(feeder_fingerprint(feeder_)),
          dsse_(std::move(estimator)), zone_map_(feeder_.pv_units.size(), 0) {
        if (dsse_ && dsse_->feeder_fingerprint != fingerprint_)
            throw MismatchError("DSSE model was trained for a different feeder");
    }

    const Feeder& feeder() const { return feeder_; }
    const AdmittanceMatrix& admittance() const { return y_; }
    std::uint64_t fingerprint() const { return fingerprint_; }
    std::size_t node_count() const { return y_.size(); }
    bool perfect_state() const { return dsse_ == nullptr; }
    const dsse::DsseModel* estimator() const { return dsse_.get(); }
    SlackVoltage slack() const { return balanced_slack(feeder_.source_voltage_pu); }

    int horizon = 20;
    double measurement_noise_pct = 0.0;
    RewardConfig reward_config;

    std::size_t zone_count() const {
        int z = 0;
        for (int v : zone_map_) z = std::max(z, v + 1);
        return static_cast<std::size_t>(std::max(z, 1));
    }
    const std::vector<int>& zone_map() const { return zone_map_; }
    void set_zone_map(std::vector<int> zones) {
        if (zones.size() != feeder_.pv_units.size()) throw ShapeError("zone map must cover every PV unit");
        for (int z : zones)
            if (z < 0) throw ShapeError("zone ids must be nonnegative");
        zone_map_ = std::move(zones);
    }

private:
    Feeder feeder_;
    AdmittanceMatrix y_;
    std::uint64_t fingerprint_;
    std::shared_ptr<const dsse::DsseModel> dsse_;
    std::vector<int> zone_map_;
};

struct StepInfo {
    Eigen::VectorXd true_v_mag;
    double feeder_head_p = 0.0;
    double feeder_head_q = 0.0;
    std::vector<double> q_setpoints;
    std::vector<double> q_max;
    bool diverged = false;
    bool estimate_clamped = false;
    double observation_latency_seconds = 0.0; // measurement + estimation
};

struct StepResult {
    MdpState next_state; // what the agent observes
    double reward = 0.0;
    bool terminal = false;
    StepInfo info;
};

inline double divergence_penalty(const Environment& env) { return -10.0 * static_cast<double>(env.node_count()); }

inline std::vector<double> q_max_values(const Feeder& feeder, const Scenario& s) {
    std::vector<double> q(feeder.pv_units.size());
    for (std::size_t k = 0; k < q.size(); ++k) q[k] = q_max_no_curtailment(feeder.pv_units[k].s_rated, s.p_pv[k]);
    return q;
}

/// map_action -> injections -> power flow -> feeder-head measurement ->
/// estimate (or true state). The reward always uses the true voltages.
template <std::uniform_random_bit_generator Rng>
StepResult env_step(const Environment& env, const Scenario& scenario, const MdpAction& action, Rng& noise_rng) {
    const Feeder& f = env.feeder();
    StepResult res;
    res.info.q_setpoints = map_action(action, f.pv_units, env.zone_map());
    res.info.q_max = q_max_values(f, scenario);
    PowerFlowSolution sol;
    try {
        sol = solve_power_flow(f, env.admittance(),
                               build_injections(f, env.admittance().index_map, scenario, res.info.q_setpoints),
                               env.slack());
    } catch (const DivergedError& e) {
        spdlog::warn("scenario {}: power flow diverged under action ({})", scenario.id, e.what());
        res.info.diverged = true;
    } catch (const NumericalError& e) {
        spdlog::warn("scenario {}: power flow failed under action ({})", scenario.id, e.what());
        res.info.diverged = true;
    }
    if (res.info.diverged) {
        res.reward = divergence_penalty(env);
        res.terminal = true;
        res.next_state.v_mag = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(env.node_count()),
                                                         env.reward_config.v_nominal);
        res.info.true_v_mag = res.next_state.v_mag;
        return res;
    }
    res.info.true_v_mag = sol.v_mag;
    res.info.feeder_head_p = sol.feeder_head_p;
    res.info.feeder_head_q = sol.feeder_head_q;
    res.reward = reward(sol.v_mag, res.info.q_setpoints, res.info.q_max, env.reward_config);
    const auto t0 = std::chrono::steady_clock::now();
    if (env.perfect_state()) {
        res.next_state.v_mag = sol.v_mag;
    } else {
        const auto m = feeder_head_measurement(sol, f, env.admittance(), env.measurement_noise_pct, noise_rng);
        auto est = dsse::estimate_states(*env.estimator(), m, env.fingerprint());
        res.next_state.v_mag = std::move(est.v_mag);
        res.info.estimate_clamped = est.clamped;
    }
    res.info.observation_latency_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

inline MdpAction zero_action(const Environment& env) { return {std::vector<double>(env.zone_count(), 0.0)}; }

/// Initial observation: the scenario at unity power factor. Divergence here
/// means the scenario violates the precondition and is rethrown.
template <std::uniform_random_bit_generator Rng>
StepResult env_reset(const Environment& env, const Scenario& scenario, Rng& noise_rng) {
    auto r = env_step(env, scenario, zero_action(env), noise_rng);
    if (r.info.diverged) throw DivergedError("scenario " + std::to_string(scenario.id) + " diverges at a = 0", 0.0);
    return r;
}

// Step log: episode,step,scenario_id,action_0..,reward,max_v,min_v,pf_p,pf_q,violation_count
inline void write_step_log_header(std::ostream& os, std::size_t zones) {
    os << "episode,step,scenario_id";
    for (std::size_t z = 0; z < zones; ++z) os << ",action_" << z;
    os << ",reward,max_v,min_v,pf_p,pf_q,violation_count\n";
}

inline void write_step_log_row(std::ostream& os, int episode, int step, int scenario_id, const MdpAction& a,
                               const StepResult& r, const RewardConfig& cfg) {
    os << episode << ',' << step << ',' << scenario_id;
    for (double c : a.coefficients) os << ',' << format_double(c);
    os << ',' << format_double(r.reward) << ',' << format_double(r.info.true_v_mag.maxCoeff()) << ','
       << format_double(r.info.true_v_mag.minCoeff()) << ',' << format_double(r.info.feeder_head_p) << ','
       << format_double(r.info.feeder_head_q) << ',' << (r.info.diverged ? r.info.true_v_mag.size() : static_cast<Eigen::Index>(violation_count(r.info.true_v_mag, cfg)))
       << '\n';
}

} // namespace gridpilot::env
