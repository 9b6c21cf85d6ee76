#pragma once

// Online execution with the agent performance recorder (APR), fine-tuning,
// the brute-force oracle for single-zone feeders, and evaluation sweeps.

#include <gridpilot/control_env.hpp>
#include <gridpilot/ddpg.hpp>
#include <gridpilot/error.hpp>
#include <gridpilot/scenario.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace gridpilot::runtime {

using env::MdpAction;

struct AprConfig {
    int window = 50;
    // Absolute threshold in reward units; when unset, 25% of |reference_reward|.
    std::optional<double> degradation_threshold;
    double reference_reward = 0.0;
    int fine_tune_episodes = 5;

    double threshold() const { return degradation_threshold ? *degradation_threshold : 0.25 * std::abs(reference_reward); }
    void validate() const {
        if (window < 1) throw SchemaError("APR window must be >= 1");
        if (fine_tune_episodes < 1) throw SchemaError("fine_tune_episodes must be >= 1");
        if (degradation_threshold && *degradation_threshold < 0.0) throw SchemaError("APR threshold must be >= 0");
    }
};

enum class AprDecision { Ok, FineTune };

/// Fine-tune iff the mean of the last `window` rewards falls below
/// reference - threshold. Fewer than `window` samples is always ok.
inline AprDecision apr_check(std::span<const double> rewards, const AprConfig& apr) {
    const auto w = static_cast<std::size_t>(apr.window);
    if (rewards.size() < w) return AprDecision::Ok;
    // Averaging offsets from the reference keeps a window equal to it at exactly zero.
    double offset = 0.0;
    for (auto it = rewards.end() - static_cast<std::ptrdiff_t>(w); it != rewards.end(); ++it) offset += *it - apr.reference_reward;
    return offset / static_cast<double>(w) < -apr.threshold() ? AprDecision::FineTune : AprDecision::Ok;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FineTuneResult {
    ddpg::AgentNets agent;
    bool reverted = false;
    std::vector<ddpg::EpisodeRecord> history;
};

/// Continues DDPG training from `agent` with a replay buffer pre-filled from
/// `recent`, exploration fixed at noise_sigma_end, and the critic frozen for
/// the first 20% of updates. Divergence reverts to the input agent.
inline FineTuneResult fine_tune(const ddpg::AgentNets& agent, const std::vector<ddpg::Transition>& recent,
                                const env::Environment& environment, const ScenarioSet& scenarios, int episodes,
                                ddpg::TrainConfig cfg) {
    if (recent.empty()) throw UsageError("fine_tune needs recent transitions");
    FineTuneResult out{agent, false, {}};
    if (episodes <= 0) return out;
    cfg.episodes = episodes;
    cfg.validate();
    ddpg::TrainerState st;
    st.nets = agent;
    st.rng.seed(cfg.seed);
    st.noise_rng.seed(cfg.seed ^ 0x5851f42d4c957f2dULL);
    st.actor_opt = nn::AdamState(cfg.actor_lr);
    st.critic_opt = nn::AdamState(cfg.critic_lr);
    st.buffer = ddpg::ReplayBuffer(cfg.buffer_capacity);
    for (const auto& t : recent) st.buffer.push(t);
    ddpg::TrainHooks hooks;
    hooks.fixed_sigma = cfg.noise_sigma_end;
    hooks.freeze_critic_updates = static_cast<std::uint64_t>(
        std::ceil(0.2 * static_cast<double>(episodes) * static_cast<double>(cfg.horizon)));
    try {
        ddpg::train_episodes(st, environment, scenarios, cfg, hooks);
    } catch (const TrainingError& e) {
        spdlog::warn("fine-tuning diverged, reverting to the previous agent: {}", e.what());
        out.reverted = true;
        return out;
    }
    out.agent = std::move(st.nets);
    out.history = std::move(st.history);
    return out;
}

// ---------------------------------------------------------------------------
// Oracle

struct OracleResult {
    double best_action = 0.0;
    double best_reward = 0.0;
    double baseline_reward = 0.0; // reward at a = 0
};

inline std::vector<double> oracle_grid(int points) {
    if (points < 3) throw UsageError("oracle grid needs at least 3 points");
    // Each point is one correctly rounded integer ratio, so nested grids share bit-identical points.
    std::vector<double> g(static_cast<std::size_t>(points));
    const double den = points - 1;
    for (int i = 0; i < points; ++i) g[static_cast<std::size_t>(i)] = static_cast<double>(2 * i - (points - 1)) / den;
    return g;
}

/// Number of grid points for spacing `delta` on [-1, 1].
inline int oracle_points(double delta) {
    if (!(delta > 0.0 && delta <= 1.0)) throw UsageError("oracle spacing must be in (0, 1]");
    return static_cast<int>(std::llround(2.0 / delta)) + 1;
}

/// Exhaustive single-zone search in perfect-state mode. Ties go to the
/// smaller |a|, and between +a and -a to the negative (absorbing) side.
inline OracleResult oracle_best_action(const env::Environment& environment, const Scenario& scenario, int points) {
    if (environment.zone_count() != 1) throw UsageError("oracle requires a single-zone configuration");
    auto grid = oracle_grid(points);
    std::stable_sort(grid.begin(), grid.end(), [](double a, double b) {
        return std::abs(a) < std::abs(b) || (std::abs(a) == std::abs(b) && a < b);
    });
    std::mt19937_64 unused(0);
    std::optional<OracleResult> best;
    for (double a : grid) {
        auto r = env::env_step(environment, scenario, MdpAction{{a}}, unused);
        if (r.info.diverged) continue;
        if (!best || r.reward > best->best_reward) best = OracleResult{a, r.reward, 0.0};
    }
    if (!best) throw DatasetError("scenario " + std::to_string(scenario.id) + " diverges at every grid point");
    const auto base = env::env_step(environment, scenario, env::zero_action(environment), unused);
    best->baseline_reward = base.info.diverged ? std::nan("") : base.reward;
    return *best;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
    int control_steps = 20; // closed-loop steps per scenario; the last one is reported
};

struct ScenarioEval {
    int scenario_id = 0;
    std::vector<double> action; // final action applied
    double baseline_reward = 0.0;
    double controlled_reward = 0.0;
    double baseline_deviation = 0.0;
    double controlled_deviation = 0.0;
    std::size_t baseline_violations = 0;
    std::size_t controlled_violations = 0;
    std::size_t baseline_upper_violations = 0;
    std::size_t controlled_upper_violations = 0;
    double baseline_max_v = 0.0;
    double controlled_max_v = 0.0;
    bool controlled_diverged = false;
    Eigen::VectorXd baseline_v;
    Eigen::VectorXd controlled_v;
    std::vector<double> pipeline_latency_seconds; // measurement -> estimate -> act, per control step
};

struct LatencyStats {
    double mean = 0.0;
    double p50 = 0.0;
    double p99 = 0.0;
    double max = 0.0;
    std::size_t count = 0;
};

inline LatencyStats latency_stats(std::vector<double> v) {
    LatencyStats s;
    if (v.empty()) return s;
    std::sort(v.begin(), v.end());
    s.count = v.size();
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    auto q = [&](double p) {
        const auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size()))) - 1;
        return v[std::min(k, v.size() - 1)];
    };
    s.p50 = q(0.5);
    s.p99 = q(0.99);
    s.max = v.back();
    return s;
}

struct EvalReport {
    std::size_t scenario_count = 0;
    std::size_t node_count = 0;
    Eigen::VectorXd baseline_mean, baseline_std;
    Eigen::VectorXd controlled_mean, controlled_std;
    std::size_t baseline_violations = 0; // scenario-node-phase pairs outside the band
    std::size_t controlled_violations = 0;
    std::size_t baseline_scenarios_over_upper = 0;
    std::size_t controlled_scenarios_over_upper = 0;
    double baseline_mean_deviation = 0.0;
    double controlled_mean_deviation = 0.0;
    double baseline_mean_reward = 0.0;
    double controlled_mean_reward = 0.0;
    LatencyStats latency;
    std::vector<ScenarioEval> scenarios;

    double controlled_in_band_fraction() const {
        const double total = static_cast<double>(scenario_count * node_count);
        return total > 0 ? 1.0 - static_cast<double>(controlled_violations) / total : 0.0;
    }
};

inline std::size_t upper_violations(const Eigen::VectorXd& v, const env::RewardConfig& cfg) {
    return static_cast<std::size_t>((v.array() > cfg.v_max).count());
}

/// One scenario: a = 0 baseline, then `control_steps` closed-loop steps where
/// the agent observes the (estimated) state produced by its previous action.
inline ScenarioEval evaluate_scenario(const ddpg::AgentNets& agent, const env::Environment& environment,
                                      const Scenario& s, const EvalOptions& opt, std::uint64_t noise_seed) {
    if (opt.control_steps < 1) throw UsageError("control_steps must be >= 1");
    const auto& rc = environment.reward_config;
    std::mt19937_64 rng(noise_seed);
    ScenarioEval e;
    e.scenario_id = s.id;
    auto base = env::env_reset(environment, s, rng);
    e.baseline_v = base.info.true_v_mag;
    e.baseline_reward = base.reward;
    auto obs = base.next_state;
    double observe_latency = base.info.observation_latency_seconds;
    env::StepResult last;
    for (int k = 0; k < opt.control_steps; ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        const MdpAction a = ddpg::act(agent, obs);
        const double act_latency = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        e.pipeline_latency_seconds.push_back(observe_latency + act_latency);
        last = env::env_step(environment, s, a, rng);
        e.action = a.coefficients;
        obs = last.next_state;
        observe_latency = last.info.observation_latency_seconds;
        if (last.terminal) break;
    }
    e.controlled_diverged = last.info.diverged;
    e.controlled_v = last.info.true_v_mag;
    e.controlled_reward = last.reward;
    e.baseline_deviation = env::objective_deviation(e.baseline_v, rc.v_nominal);
    e.controlled_deviation = env::objective_deviation(e.controlled_v, rc.v_nominal);
    e.baseline_violations = env::violation_count(e.baseline_v, rc);
    e.controlled_violations = last.info.diverged ? static_cast<std::size_t>(e.controlled_v.size())
                                                 : env::violation_count(e.controlled_v, rc);
    e.baseline_upper_violations = upper_violations(e.baseline_v, rc);
    e.controlled_upper_violations = upper_violations(e.controlled_v, rc);
    e.baseline_max_v = e.baseline_v.maxCoeff();
    e.controlled_max_v = e.controlled_v.maxCoeff();
    return e;
}

/// Aggregates per-scenario results; also used to recompute a report from logs.
inline EvalReport aggregate(std::vector<ScenarioEval> rows, std::size_t node_count) {
    EvalReport r;
    r.node_count = node_count;
    r.scenario_count = rows.size();
    const auto n = static_cast<Eigen::Index>(node_count);
    r.baseline_mean = r.baseline_std = r.controlled_mean = r.controlled_std = Eigen::VectorXd::Zero(n);
    std::vector<double> lat;
    for (const auto& e : rows) {
        r.baseline_mean += e.baseline_v;
        r.controlled_mean += e.controlled_v;
        r.baseline_violations += e.baseline_violations;
        r.controlled_violations += e.controlled_violations;
        r.baseline_scenarios_over_upper += e.baseline_upper_violations > 0;
        r.controlled_scenarios_over_upper += e.controlled_upper_violations > 0;
        r.baseline_mean_deviation += e.baseline_deviation;
        r.controlled_mean_deviation += e.controlled_deviation;
        r.baseline_mean_reward += e.baseline_reward;
        r.controlled_mean_reward += e.controlled_reward;
        lat.insert(lat.end(), e.pipeline_latency_seconds.begin(), e.pipeline_latency_seconds.end());
    }
    if (!rows.empty()) {
        const double k = static_cast<double>(rows.size());
        r.baseline_mean /= k;
        r.controlled_mean /= k;
        for (const auto& e : rows) {
            r.baseline_std += (e.baseline_v - r.baseline_mean).array().square().matrix();
            r.controlled_std += (e.controlled_v - r.controlled_mean).array().square().matrix();
        }
        r.baseline_std = (r.baseline_std / k).cwiseSqrt();
        r.controlled_std = (r.controlled_std / k).cwiseSqrt();
        r.baseline_mean_deviation /= k;
        r.controlled_mean_deviation /= k;
        r.baseline_mean_reward /= k;
        r.controlled_mean_reward /= k;
    }
    r.latency = latency_stats(std::move(lat));
    r.scenarios = std::move(rows);
    return r;
}

inline EvalReport evaluate(const ddpg::AgentNets& agent, const env::Environment& environment,
                           const ScenarioSet& test, const EvalOptions& opt = {}, std::uint64_t seed = 0) {
    if (test.scenarios.empty()) throw DatasetError("evaluation needs at least one scenario");
    if (agent.state_dim() != static_cast<Eigen::Index>(environment.node_count()) ||
        agent.action_dim() != static_cast<Eigen::Index>(environment.zone_count()))
        throw ShapeError("agent dimensions do not match the environment");
    std::vector<ScenarioEval> rows;
    rows.reserve(test.scenarios.size());
    for (const auto& s : test.scenarios)
        rows.push_back(evaluate_scenario(agent, environment, s, opt, dsse::mix_seed(seed, static_cast<std::uint64_t>(s.id))));
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.scenario_id < b.scenario_id; });
    return aggregate(std::move(rows), environment.node_count());
}

// Report files: per-scenario results, per-node-phase voltage profile and a
// JSON summary. Latencies are wall-clock and stay out of the CSVs so the
// files are reproducible byte for byte.
inline void write_eval_report(const EvalReport& r, const env::Environment& environment, const std::string& dir) {
    {
        std::ofstream out(dir + "/eval_scenarios.csv", std::ios::binary);
        if (!out) throw UsageError("cannot write into " + dir);
        out << "scenario_id,action,baseline_reward,controlled_reward,baseline_max_v,controlled_max_v,"
               "baseline_violations,controlled_violations,baseline_deviation,controlled_deviation\n";
        for (const auto& e : r.scenarios) {
            std::string acts;
            for (std::size_t i = 0; i < e.action.size(); ++i) acts += (i ? ";" : "") + format_double(e.action[i]);
            out << e.scenario_id << ',' << acts << ',' << format_double(e.baseline_reward) << ','
                << format_double(e.controlled_reward) << ',' << format_double(e.baseline_max_v) << ','
                << format_double(e.controlled_max_v) << ',' << e.baseline_violations << ',' << e.controlled_violations
                << ',' << format_double(e.baseline_deviation) << ',' << format_double(e.controlled_deviation) << '\n';
        }
    }
    {
        std::ofstream out(dir + "/voltage_profile.csv", std::ios::binary);
        if (!out) throw UsageError("cannot write into " + dir);
        out << "node,bus_id,phase,baseline_mean,baseline_std,controlled_mean,controlled_std\n";
        const auto& idx = environment.admittance().index_map;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto k = static_cast<Eigen::Index>(i);
            out << i << ',' << idx.bus_id_of(i) << ',' << phase_letter(idx.phase_of(i)) << ','
                << format_double(r.baseline_mean(k)) << ',' << format_double(r.baseline_std(k)) << ','
                << format_double(r.controlled_mean(k)) << ',' << format_double(r.controlled_std(k)) << '\n';
        }
    }
    nlohmann::json j = {{"scenario_count", r.scenario_count},
                        {"node_count", r.node_count},
                        {"baseline_violations", r.baseline_violations},
                        {"controlled_violations", r.controlled_violations},
                        {"baseline_scenarios_over_upper", r.baseline_scenarios_over_upper},
                        {"controlled_scenarios_over_upper", r.controlled_scenarios_over_upper},
                        {"controlled_in_band_fraction", r.controlled_in_band_fraction()},
                        {"baseline_mean_deviation", r.baseline_mean_deviation},
                        {"controlled_mean_deviation", r.controlled_mean_deviation},
                        {"baseline_mean_reward", r.baseline_mean_reward},
                        {"controlled_mean_reward", r.controlled_mean_reward}};
    std::ofstream out(dir + "/summary.json", std::ios::binary);
    out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Online loop

struct OnlineStep {
    int step = 0;
    int scenario_id = 0;
    MdpAction action;
    env::StepResult result;
    double trailing_mean = 0.0;
    bool apr_triggered = false;
    bool fine_tune_reverted = false;
    double pipeline_latency_seconds = 0.0;
};

struct RunLog {
    std::vector<OnlineStep> steps;
    std::size_t apr_triggers = 0;
    ddpg::AgentNets final_agent;
};

struct OnlineOptions {
    bool enable_fine_tune = true;
    std::size_t recent_capacity = 1000; // transitions kept for fine-tuning
    ddpg::TrainConfig fine_tune_config;
    std::uint64_t seed = 0;
};

/// Each stream element is one control interval. The inverters hold the
/// previous setpoint while the feeder head is measured; the agent acts on the
/// estimate without exploration and the new setpoint is applied.
inline RunLog run_online(const ddpg::AgentNets& agent, const env::Environment& environment, const ScenarioSet& stream,
                         const AprConfig& apr, const OnlineOptions& opt = {}) {
    apr.validate();
    if (agent.state_dim() != static_cast<Eigen::Index>(environment.node_count()) ||
        agent.action_dim() != static_cast<Eigen::Index>(environment.zone_count()))
        throw ShapeError("agent dimensions do not match the environment/DSSE output");
    RunLog log;
    log.final_agent = agent;
    std::mt19937_64 rng(opt.seed);
    std::vector<double> rewards;
    std::deque<ddpg::Transition> recent;
    std::vector<Scenario> recent_scenarios;
    MdpAction held = env::zero_action(environment);
    int step = 0;
    for (const auto& s : stream.scenarios) {
        auto pre = env::env_step(environment, s, held, rng);
        if (pre.info.diverged) {
            held = env::zero_action(environment);
            pre = env::env_reset(environment, s, rng);
        }
        const auto t0 = std::chrono::steady_clock::now();
        const MdpAction a = ddpg::act(log.final_agent, pre.next_state);
        const double act_latency = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        auto res = env::env_step(environment, s, a, rng);
        OnlineStep st{step, s.id, a, res, 0.0, false, false, pre.info.observation_latency_seconds + act_latency};
        rewards.push_back(res.reward);
        recent.push_back({pre.next_state, a, res.reward, res.next_state, res.terminal});
        if (recent.size() > opt.recent_capacity) recent.pop_front();
        recent_scenarios.push_back(s);
        if (recent_scenarios.size() > opt.recent_capacity) recent_scenarios.erase(recent_scenarios.begin());
        const auto w = std::min<std::size_t>(rewards.size(), static_cast<std::size_t>(apr.window));
        st.trailing_mean = std::accumulate(rewards.end() - static_cast<std::ptrdiff_t>(w), rewards.end(), 0.0) /
                           static_cast<double>(w);
        if (apr_check(rewards, apr) == AprDecision::FineTune) {
            st.apr_triggered = true;
            ++log.apr_triggers;
            spdlog::info("APR: trailing mean {:.6g} below reference {:.6g} - {:.6g} at step {}", st.trailing_mean,
                         apr.reference_reward, apr.threshold(), step);
            if (opt.enable_fine_tune) {
                ScenarioSet recent_set;
                recent_set.scenarios = recent_scenarios;
                auto ft = fine_tune(log.final_agent, {recent.begin(), recent.end()}, environment, recent_set,
                                    apr.fine_tune_episodes, opt.fine_tune_config);
                st.fine_tune_reverted = ft.reverted;
                log.final_agent = std::move(ft.agent);
            }
            rewards.clear(); // the window restarts after an intervention
        }
        held = res.info.diverged ? env::zero_action(environment) : a;
        log.steps.push_back(std::move(st));
        ++step;
    }
    return log;
}

inline void write_run_log(const RunLog& log, const env::Environment& environment, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path);
    env::write_step_log_header(out, environment.zone_count());
    for (const auto& s : log.steps)
        env::write_step_log_row(out, 0, s.step, s.scenario_id, s.action, s.result, environment.reward_config);
}

} // namespace gridpilot::runtime
