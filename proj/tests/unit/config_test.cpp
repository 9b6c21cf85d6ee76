#include <gridpilot/config.hpp>

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace gridpilot;
using nlohmann::json;

TEST(Config, DefaultsRoundTrip) {
    const RunConfig c;
    const json j = config_to_json(c);
    EXPECT_EQ(config_to_json(parse_config(j)), j);
    EXPECT_EQ(parse_config(json::object()).train.tau, 0.001);
}

TEST(Config, EveryFieldRoundTrips) {
    RunConfig c;
    c.seed = 42;
    c.scenarios.generator.count = 321;
    c.scenarios.train_fraction = 0.7;
    c.dsse.hyper.learning_rate = 1e-3;
    c.dsse.noise_pct = 2.5;
    c.env.perfect_state = true;
    c.env.zone_map = {0, 1, 0};
    c.env.reward.eta_weight = 0.25;
    c.train.gamma = 0.9;
    c.train.noise = ddpg::NoiseKind::OrnsteinUhlenbeck;
    c.apr.degradation_threshold = 3.0;
    c.apr.window = 7;
    c.eval.oracle_delta = 0.05;
    c.online.enable_fine_tune = false;
    const json j = config_to_json(c);
    const RunConfig back = parse_config(j);
    EXPECT_EQ(config_to_json(back), j);
    EXPECT_EQ(back.env.zone_map, c.env.zone_map);
    EXPECT_EQ(*back.apr.degradation_threshold, 3.0);
    EXPECT_EQ(back.train.noise, ddpg::NoiseKind::OrnsteinUhlenbeck);
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
    for (const char* text : {R"({"sed": 1})", R"({"dsse": {"lr": 0.1}})", R"({"env": {"reward": {"lambda": 1}}})",
                             R"({"train": {"gama": 0.9}})", R"({"apr": {"windw": 3}})", R"({"eval": {"steps": 3}})",
                             R"({"online": {"x": 1}})", R"({"scenarios": {"generator": {"cnt": 5}}})"})
        EXPECT_THROW(parse_config(json::parse(text)), SchemaError) << text;
}

TEST(Config, InvalidValuesRejected) {
    for (const char* text : {R"({"train": {"gamma": 2.0}})", R"({"env": {"reward": {"v_min": 1.2}}})",
                             R"({"apr": {"window": 0}})", R"({"eval": {"control_steps": 0}})",
                             R"({"dsse": {"noise_pct": -1}})", R"({"seed": "one"})"})
        EXPECT_THROW(parse_config(json::parse(text)), SchemaError) << text;
}

TEST(Config, LoadResolvesRelativePaths) {
    const auto dir = std::filesystem::temp_directory_path() / "gridpilot_cfg";
    std::filesystem::create_directories(dir / "feeders");
    std::filesystem::copy_file(oracle::fixture("4bus.json"), dir / "feeders" / "mine.json",
                               std::filesystem::copy_options::overwrite_existing);
    std::ofstream(dir / "run.json") << R"({"feeder": "feeders/mine.json", "seed": 9})";
    const auto c = load_config((dir / "run.json").string());
    EXPECT_EQ(c.seed, 9u);
    EXPECT_TRUE(std::filesystem::exists(c.feeder)) << c.feeder;
    std::ofstream(dir / "bad.json") << "{ not json";
    EXPECT_THROW(load_config((dir / "bad.json").string()), SchemaError);
    EXPECT_THROW(load_config((dir / "absent.json").string()), SchemaError);
}

TEST(Config, EnvironmentFromConfig) {
    RunConfig c;
    c.train.horizon = 7;
    c.env.measurement_noise_pct = 0.5;
    c.env.reward.v_max = 1.04;
    const Feeder f = load_feeder(oracle::fixture("4bus.json"));
    const auto e = make_environment(c, f, nullptr);
    EXPECT_EQ(e.horizon, 7);
    EXPECT_EQ(e.measurement_noise_pct, 0.5);
    EXPECT_EQ(e.reward_config.v_max, 1.04);
    EXPECT_TRUE(e.perfect_state());
}
