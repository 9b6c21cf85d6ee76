#pragma once

// Synthetic load/PV scenario generation.
//
// A household pool holds per-household time series of dimensionless factors
// sampled over a midday window: load as a fraction of a load point's nominal
// demand, PV output as a fraction of the same nominal demand, and a lagging
// power factor. Every time sample shares a feeder-wide irradiance draw, so
// scenarios differ in weather as well as in which households they combine.
// A scenario picks one time sample and, for each load point, a handful of
// households whose factors are averaged and scaled by the nominal demand.

#include <gridpilot/error.hpp>
#include <gridpilot/feeder.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace gridpilot {

struct Range {
    double low = 0.0;
    double high = 0.0;
    double width() const { return high - low; }
    bool valid() const { return low <= high; }
};

struct GenConfig {
    int count = 1000;
    Range pv_to_load_ratio_range{0.74, 1.05};
    Range load_scale_range{0.2, 0.75};
    Range power_factor_range{0.85, 1.0};
    int household_pool_size = 11;
    int households_per_node = 4;
    int profile_length = 372; // 31 days x 12 five-minute samples

    void validate() const {
        if (count < 1) throw UsageError("GenConfig.count must be >= 1");
        if (!pv_to_load_ratio_range.valid() || !load_scale_range.valid() || !power_factor_range.valid())
            throw UsageError("GenConfig ranges must satisfy low <= high");
        if (pv_to_load_ratio_range.low < 0.0 || load_scale_range.low < 0.0)
            throw UsageError("GenConfig factor ranges must be nonnegative");
        if (power_factor_range.low <= 0.0 || power_factor_range.high > 1.0)
            throw UsageError("GenConfig.power_factor_range must lie in (0, 1]");
        if (household_pool_size < 1 || households_per_node < 1 || profile_length < 1)
            throw UsageError("GenConfig pool sizes must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.low, r.high}); }
inline void from_json(const nlohmann::json& j, Range& r) {
    if (!j.is_array() || j.size() != 2) throw SchemaError("range must be a [low, high] pair");
    r.low = j[0].get<double>();
    r.high = j[1].get<double>();
}

inline void to_json(nlohmann::json& j, const GenConfig& c) {
    j = {{"count", c.count},
         {"pv_to_load_ratio_range", c.pv_to_load_ratio_range},
         {"load_scale_range", c.load_scale_range},
         {"power_factor_range", c.power_factor_range},
         {"household_pool_size", c.household_pool_size},
         {"households_per_node", c.households_per_node},
         {"profile_length", c.profile_length}};
}
inline void from_json(const nlohmann::json& j, GenConfig& c) {
    GenConfig d;
    c.count = j.value("count", d.count);
    c.pv_to_load_ratio_range = j.value("pv_to_load_ratio_range", d.pv_to_load_ratio_range);
    c.load_scale_range = j.value("load_scale_range", d.load_scale_range);
    c.power_factor_range = j.value("power_factor_range", d.power_factor_range);
    c.household_pool_size = j.value("household_pool_size", d.household_pool_size);
    c.households_per_node = j.value("households_per_node", d.households_per_node);
    c.profile_length = j.value("profile_length", d.profile_length);
}

struct HouseholdProfile {
    std::vector<double> load_factor;
    std::vector<double> pv_factor;
    std::vector<double> power_factor;

    std::size_t length() const { return load_factor.size(); }
};

using HouseholdPool = std::vector<HouseholdProfile>;

struct Scenario {
    int id = 0;
    std::vector<double> p_load; // p.u., one per load point
    std::vector<double> q_load;
    std::vector<double> p_pv; // p.u., one per PV unit
};

struct ScenarioSet {
    std::vector<Scenario> scenarios;
    std::uint64_t seed = 0;
    GenConfig generator_config;

    std::size_t size() const { return scenarios.size(); }
};

inline HouseholdPool generate_household_pool(const GenConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> std_normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto len = static_cast<std::size_t>(cfg.profile_length);

    // Feeder-wide midday irradiance per sample; cloudiness varies by day.
    std::vector<double> irradiance(len);
    double day_level = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
        if (t % 12 == 0) day_level = std::clamp(0.7 + 0.25 * std_normal(rng), 0.0, 1.0);
        irradiance[t] = std::clamp(day_level + 0.05 * std_normal(rng), 0.0, 1.0);
    }

    HouseholdPool pool(static_cast<std::size_t>(cfg.household_pool_size));
    for (auto& h : pool) {
        const double load_bias = 0.5 * std_normal(rng);
        const double pf_home = cfg.power_factor_range.low + cfg.power_factor_range.width() * unit(rng);
        h.load_factor.resize(len);
        h.pv_factor.resize(len);
        h.power_factor.resize(len);
        for (std::size_t t = 0; t < len; ++t) {
            // Lognormal demand squashed into (0, 1), then mapped onto the range.
            const double x = std::exp(load_bias + 0.5 * std_normal(rng));
            h.load_factor[t] = cfg.load_scale_range.low + cfg.load_scale_range.width() * (x / (1.0 + x));
            const double irr = std::clamp(irradiance[t] + 0.03 * std_normal(rng), 0.0, 1.0);
            h.pv_factor[t] = cfg.pv_to_load_ratio_range.low + cfg.pv_to_load_ratio_range.width() * irr;
            h.power_factor[t] = std::clamp(pf_home + 0.01 * std_normal(rng), cfg.power_factor_range.low,
                                           cfg.power_factor_range.high);
        }
    }
    return pool;
}

/// Reads externally supplied household data (`household_id,p_kw,pv_kw`, one
/// row per sample, samples in file order). Each column is normalized by its
/// pool-wide maximum and mapped onto the upper end of the configured ranges;
/// power factor is the midpoint of the configured range. Profiles are
/// truncated to the shortest household.
inline HouseholdPool ingest_household_csv(const std::string& path, const GenConfig& cfg) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open household profile file " + path);
    std::string line;
    if (!std::getline(in, line)) throw SchemaError(path + ": empty file");
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> raw;
    std::vector<std::string> order;
    std::size_t lineno = 1;
    double max_p = 0.0, max_pv = 0.0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string id, p, pv;
        if (!std::getline(ss, id, ',') || !std::getline(ss, p, ',') || !std::getline(ss, pv, ','))
            throw SchemaError(path + ": line " + std::to_string(lineno) + ": expected 3 columns");
        double pk = 0.0, pvk = 0.0;
        try {
            pk = std::stod(p);
            pvk = std::stod(pv);
        } catch (const std::exception&) {
            throw SchemaError(path + ": line " + std::to_string(lineno) + ": non-numeric value");
        }
        if (!raw.count(id)) order.push_back(id);
        raw[id].first.push_back(pk);
        raw[id].second.push_back(pvk);
        max_p = std::max(max_p, pk);
        max_pv = std::max(max_pv, pvk);
    }
    if (raw.empty()) throw SchemaError(path + ": no household rows");
    std::size_t len = SIZE_MAX;
    for (const auto& [id, cols] : raw) len = std::min(len, cols.first.size());
    const double pf = 0.5 * (cfg.power_factor_range.low + cfg.power_factor_range.high);
    HouseholdPool pool;
    for (const auto& id : order) {
        const auto& [p, pv] = raw[id];
        HouseholdProfile h;
        for (std::size_t t = 0; t < len; ++t) {
            h.load_factor.push_back(max_p > 0.0 ? cfg.load_scale_range.high * p[t] / max_p : 0.0);
            h.pv_factor.push_back(max_pv > 0.0 ? cfg.pv_to_load_ratio_range.high * pv[t] / max_pv : 0.0);
            h.power_factor.push_back(pf);
        }
        pool.push_back(std::move(h));
    }
    return pool;
}

/// Nominal demand a PV unit's factor is scaled by: the load at the same
/// bus and phase, or the unit's own rating when it has no co-located load.
inline double pv_reference_demand(const Feeder& feeder, const PvUnit& pv) {
    for (const auto& l : feeder.loads)
        if (l.bus_id == pv.bus_id && l.phase == pv.phase) return l.p_nominal;
    return pv.p_rated;
}

template <std::uniform_random_bit_generator Rng>
Scenario aggregate_profiles(const HouseholdPool& pool, const Feeder& feeder, const GenConfig& cfg, Rng& rng) {
    if (pool.empty()) throw UsageError("household pool is empty");
    std::size_t len = pool.front().length();
    for (const auto& h : pool) len = std::min(len, h.length());
    if (len == 0) throw UsageError("household profiles are empty");

    std::uniform_int_distribution<std::size_t> pick_time(0, len - 1);
    std::uniform_int_distribution<std::size_t> pick_house(0, pool.size() - 1);
    const std::size_t t = pick_time(rng);
    const auto per_node = static_cast<std::size_t>(cfg.households_per_node);

    // One draw of households per (bus, phase) location, shared by its load and PV.
    struct Mix {
        double load = 0.0, q_ratio_weighted = 0.0, pv = 0.0;
    };
    std::map<std::pair<std::string, Phase>, Mix> mixes;
    auto draw_mix = [&]() {
        Mix m;
        for (std::size_t k = 0; k < per_node; ++k) {
            const auto& h = pool[pick_house(rng)];
            const double pf = h.power_factor[t];
            m.load += h.load_factor[t];
            m.q_ratio_weighted += h.load_factor[t] * std::tan(std::acos(pf));
            m.pv += h.pv_factor[t];
        }
        m.load /= static_cast<double>(per_node);
        m.q_ratio_weighted /= static_cast<double>(per_node);
        m.pv /= static_cast<double>(per_node);
        return m;
    };
    auto mix_at = [&](const std::string& bus, Phase p) -> const Mix& {
        auto key = std::make_pair(bus, p);
        auto it = mixes.find(key);
        if (it == mixes.end()) it = mixes.emplace(key, draw_mix()).first;
        return it->second;
    };

    Scenario s;
    for (const auto& l : feeder.loads) {
        const Mix& m = mix_at(l.bus_id, l.phase);
        s.p_load.push_back(l.p_nominal * m.load);
        s.q_load.push_back(l.p_nominal * m.q_ratio_weighted);
    }
    for (const auto& pv : feeder.pv_units) {
        const Mix& m = mix_at(pv.bus_id, pv.phase);
        s.p_pv.push_back(std::clamp(pv_reference_demand(feeder, pv) * m.pv, 0.0, pv.p_rated));
    }
    return s;
}

inline Scenario aggregate_profiles(const HouseholdPool& pool, const Feeder& feeder, const GenConfig& cfg,
                                   std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return aggregate_profiles(pool, feeder, cfg, rng);
}

/// Pool seeded from `seed`, scenarios from an independent stream.
inline ScenarioSet generate_scenarios(const Feeder& feeder, const GenConfig& cfg, std::uint64_t seed,
                                      const HouseholdPool* external_pool = nullptr) {
    cfg.validate();
    ScenarioSet set;
    set.seed = seed;
    set.generator_config = cfg;
    const HouseholdPool pool = external_pool ? *external_pool : generate_household_pool(cfg, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    set.scenarios.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i) {
        Scenario s = aggregate_profiles(pool, feeder, cfg, rng);
        s.id = i;
        set.scenarios.push_back(std::move(s));
    }
    return set;
}

/// Random disjoint partition; ids are preserved and each side is sorted by id.
inline std::pair<ScenarioSet, ScenarioSet> split(const ScenarioSet& set, double train_fraction, std::uint64_t seed) {
    if (set.size() < 2) throw UsageError("split requires at least 2 scenarios");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw UsageError("train_fraction must be in (0, 1)");
    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(set.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, set.size() - 1);
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    ScenarioSet train, test;
    train.seed = test.seed = set.seed;
    train.generator_config = test.generator_config = set.generator_config;
    for (std::size_t k = 0; k < order.size(); ++k)
        (k < n_train ? train : test).scenarios.push_back(set.scenarios[order[k]]);
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_scenarios(const ScenarioSet& set, const std::string& csv_path, const std::string& meta_path) {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + csv_path);
    out << "scenario_id,element_type,element_id,p_pu,q_pu\n";
    for (const auto& s : set.scenarios) {
        for (std::size_t i = 0; i < s.p_load.size(); ++i)
            out << s.id << ",load," << i << ',' << format_double(s.p_load[i]) << ',' << format_double(s.q_load[i]) << '\n';
        for (std::size_t k = 0; k < s.p_pv.size(); ++k)
            out << s.id << ",pv," << k << ',' << format_double(s.p_pv[k]) << ",0\n";
    }
    nlohmann::json meta = {{"seed", set.seed}, {"count", set.size()}, {"generator_config", set.generator_config}};
    std::ofstream m(meta_path, std::ios::binary);
    if (!m) throw UsageError("cannot write " + meta_path);
    m << meta.dump(2) << '\n';
}

inline ScenarioSet read_scenarios(const std::string& csv_path, const std::string& meta_path = {}) {
    std::ifstream in(csv_path);
    if (!in) throw SchemaError("cannot open scenario file " + csv_path);
    std::string line;
    std::getline(in, line);
    if (line.rfind("scenario_id,element_type,element_id,p_pu,q_pu", 0) != 0)
        throw SchemaError(csv_path + ": unexpected header");
    ScenarioSet set;
    std::map<int, std::size_t> pos;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cols[5];
        for (auto& c : cols)
            if (!std::getline(ss, c, ',')) throw SchemaError(csv_path + ": line " + std::to_string(lineno) + ": expected 5 columns");
        int id = 0;
        std::size_t elem = 0;
        double p = 0.0, q = 0.0;
        try {
            id = std::stoi(cols[0]);
            elem = static_cast<std::size_t>(std::stoul(cols[2]));
            p = std::stod(cols[3]);
            q = std::stod(cols[4]);
        } catch (const std::exception&) {
            throw SchemaError(csv_path + ": line " + std::to_string(lineno) + ": malformed number");
        }
        auto it = pos.find(id);
        if (it == pos.end()) {
            it = pos.emplace(id, set.scenarios.size()).first;
            set.scenarios.push_back(Scenario{id, {}, {}, {}});
        }
        Scenario& s = set.scenarios[it->second];
        if (cols[1] == "load") {
            if (elem != s.p_load.size()) throw SchemaError(csv_path + ": line " + std::to_string(lineno) + ": load rows out of order");
            s.p_load.push_back(p);
            s.q_load.push_back(q);
        } else if (cols[1] == "pv") {
            if (elem != s.p_pv.size()) throw SchemaError(csv_path + ": line " + std::to_string(lineno) + ": pv rows out of order");
            s.p_pv.push_back(p);
        } else {
            throw SchemaError(csv_path + ": line " + std::to_string(lineno) + ": unknown element_type " + cols[1]);
        }
    }
    if (!meta_path.empty()) {
        std::ifstream m(meta_path);
        if (!m) throw SchemaError("cannot open scenario metadata " + meta_path);
        try {
            auto j = nlohmann::json::parse(m);
            set.seed = j.at("seed").get<std::uint64_t>();
            set.generator_config = j.at("generator_config").get<GenConfig>();
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(meta_path + ": " + e.what());
        }
    }
    return set;
}

/// Scenario-level checks against a feeder: vector sizes and the PV box bound.
inline void check_scenario(const Scenario& s, const Feeder& feeder) {
    if (s.p_load.size() != feeder.loads.size() || s.q_load.size() != feeder.loads.size() ||
        s.p_pv.size() != feeder.pv_units.size())
        throw ShapeError("scenario " + std::to_string(s.id) + " does not match the feeder's load/PV counts");
    for (std::size_t k = 0; k < s.p_pv.size(); ++k)
        if (s.p_pv[k] < 0.0 || s.p_pv[k] > feeder.pv_units[k].p_rated)
            throw NumericalError("scenario " + std::to_string(s.id) + ": PV output outside [0, p_rated]");
}

} // namespace gridpilot
