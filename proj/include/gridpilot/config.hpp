#pragma once

// Run configuration: one JSON document whose sections map onto the library's
// config structs. Unknown keys are rejected so typos do not pass silently.

#include <gridpilot/control_env.hpp>
#include <gridpilot/ddpg.hpp>
#include <gridpilot/dsse.hpp>
#include <gridpilot/error.hpp>
#include <gridpilot/runtime.hpp>
#include <gridpilot/scenario.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace gridpilot {

struct ScenarioSection {
    GenConfig generator;
    double train_fraction = 0.8;
    std::string household_csv; // optional external household data
};

struct DsseSection {
    dsse::Hyperparams hyper;
    double noise_pct = 1.0;
};

struct EnvSection {
    double measurement_noise_pct = 1.0;
    bool perfect_state = false;
    std::vector<int> zone_map; // empty: every PV unit in zone 0
    env::RewardConfig reward;
};

struct EvalSection {
    int control_steps = 20;
    double oracle_delta = 0.01;
};

struct OnlineSection {
    bool enable_fine_tune = true;
    std::size_t recent_capacity = 1000;
};

struct RunConfig {
    std::string feeder = "feeders/synth34.json";
    std::uint64_t seed = 1;
    ScenarioSection scenarios;
    DsseSection dsse;
    EnvSection env;
    ddpg::TrainConfig train;
    runtime::AprConfig apr;
    EvalSection eval;
    OnlineSection online;
};

namespace config_detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& section) {
    if (!j.is_object()) throw SchemaError("config section '" + section + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        bool known = false;
        for (const char* key : keys) known = known || k == key;
        if (!known) throw SchemaError("unknown config key '" + section + "." + k + "'");
    }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace config_detail

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json apr = {{"window", c.apr.window},
                          {"reference_reward", c.apr.reference_reward},
                          {"fine_tune_episodes", c.apr.fine_tune_episodes}};
    if (c.apr.degradation_threshold) apr["degradation_threshold"] = *c.apr.degradation_threshold;
    nlohmann::json dsse = c.dsse.hyper;
    dsse["noise_pct"] = c.dsse.noise_pct;
    return {{"feeder", c.feeder},
            {"seed", c.seed},
            {"scenarios",
             {{"generator", c.scenarios.generator},
              {"train_fraction", c.scenarios.train_fraction},
              {"household_csv", c.scenarios.household_csv}}},
            {"dsse", dsse},
            {"env",
             {{"measurement_noise_pct", c.env.measurement_noise_pct},
              {"perfect_state", c.env.perfect_state},
              {"zone_map", c.env.zone_map},
              {"reward", c.env.reward}}},
            {"train", c.train},
            {"apr", apr},
            {"eval", {{"control_steps", c.eval.control_steps}, {"oracle_delta", c.eval.oracle_delta}}},
            {"online", {{"enable_fine_tune", c.online.enable_fine_tune}, {"recent_capacity", c.online.recent_capacity}}}};
}

inline RunConfig parse_config(const nlohmann::json& j) {
    using config_detail::read;
    using config_detail::reject_unknown;
    RunConfig c;
    try {
        reject_unknown(j, {"feeder", "seed", "scenarios", "dsse", "env", "train", "apr", "eval", "online"}, "config");
        read(j, "feeder", c.feeder);
        read(j, "seed", c.seed);
        if (j.contains("scenarios")) {
            const auto& s = j.at("scenarios");
            reject_unknown(s, {"generator", "train_fraction", "household_csv"}, "scenarios");
            if (s.contains("generator")) {
                reject_unknown(s.at("generator"),
                               {"count", "pv_to_load_ratio_range", "load_scale_range", "power_factor_range",
                                "household_pool_size", "households_per_node", "profile_length"},
                               "scenarios.generator");
                c.scenarios.generator = s.at("generator").get<GenConfig>();
            }
            read(s, "train_fraction", c.scenarios.train_fraction);
            read(s, "household_csv", c.scenarios.household_csv);
        }
        if (j.contains("dsse")) {
            const auto& d = j.at("dsse");
            reject_unknown(d, {"hidden_layers", "hidden_units", "dropout_rate", "batch_norm", "learning_rate", "epochs",
                               "batch_size", "seed", "noise_pct"},
                           "dsse");
            auto& h = c.dsse.hyper;
            read(d, "hidden_layers", h.hidden_layers);
            read(d, "hidden_units", h.hidden_units);
            read(d, "dropout_rate", h.dropout_rate);
            read(d, "batch_norm", h.batch_norm);
            read(d, "learning_rate", h.learning_rate);
            read(d, "epochs", h.epochs);
            read(d, "batch_size", h.batch_size);
            read(d, "seed", h.seed);
            read(d, "noise_pct", c.dsse.noise_pct);
        }
        if (j.contains("env")) {
            const auto& e = j.at("env");
            reject_unknown(e, {"measurement_noise_pct", "perfect_state", "zone_map", "reward"}, "env");
            read(e, "measurement_noise_pct", c.env.measurement_noise_pct);
            read(e, "perfect_state", c.env.perfect_state);
            read(e, "zone_map", c.env.zone_map);
            if (e.contains("reward")) {
                const auto& r = e.at("reward");
                reject_unknown(r, {"lambda_weight", "eta_weight", "v_min", "v_max", "v_nominal"}, "env.reward");
                read(r, "lambda_weight", c.env.reward.lambda_weight);
                read(r, "eta_weight", c.env.reward.eta_weight);
                read(r, "v_min", c.env.reward.v_min);
                read(r, "v_max", c.env.reward.v_max);
                read(r, "v_nominal", c.env.reward.v_nominal);
            }
        }
        if (j.contains("train")) c.train = j.at("train").get<ddpg::TrainConfig>();
        if (j.contains("apr")) {
            const auto& a = j.at("apr");
            reject_unknown(a, {"window", "degradation_threshold", "reference_reward", "fine_tune_episodes"}, "apr");
            read(a, "window", c.apr.window);
            if (a.contains("degradation_threshold") && !a.at("degradation_threshold").is_null())
                c.apr.degradation_threshold = a.at("degradation_threshold").get<double>();
            read(a, "reference_reward", c.apr.reference_reward);
            read(a, "fine_tune_episodes", c.apr.fine_tune_episodes);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            reject_unknown(e, {"control_steps", "oracle_delta"}, "eval");
            read(e, "control_steps", c.eval.control_steps);
            read(e, "oracle_delta", c.eval.oracle_delta);
        }
        if (j.contains("online")) {
            const auto& o = j.at("online");
            reject_unknown(o, {"enable_fine_tune", "recent_capacity"}, "online");
            read(o, "enable_fine_tune", c.online.enable_fine_tune);
            read(o, "recent_capacity", c.online.recent_capacity);
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("config: ") + e.what());
    }
    c.scenarios.generator.validate();
    c.env.reward.validate();
    c.train.validate();
    c.apr.validate();
    if (c.env.measurement_noise_pct < 0.0 || c.dsse.noise_pct < 0.0) throw SchemaError("noise percentages must be >= 0");
    if (c.eval.control_steps < 1) throw SchemaError("eval.control_steps must be >= 1");
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError("config " + path + ": " + e.what());
    }
    RunConfig c = parse_config(j);
    // Relative paths resolve against the config file's directory.
    const auto base = std::filesystem::path(path).parent_path();
    auto resolve = [&](std::string& p) {
        if (!p.empty() && std::filesystem::path(p).is_relative() && !std::filesystem::exists(p)) p = (base / p).string();
    };
    resolve(c.feeder);
    resolve(c.scenarios.household_csv);
    return c;
}

/// Environment for a configuration; `estimator` is ignored in perfect-state mode.
inline env::Environment make_environment(const RunConfig& c, const Feeder& feeder,
                                         std::shared_ptr<const dsse::DsseModel> estimator) {
    env::Environment e(feeder, c.env.perfect_state ? nullptr : std::move(estimator));
    e.horizon = c.train.horizon;
    e.measurement_noise_pct = c.env.measurement_noise_pct;
    e.reward_config = c.env.reward;
    if (!c.env.zone_map.empty()) e.set_zone_map(c.env.zone_map);
    return e;
}

} // namespace gridpilot
