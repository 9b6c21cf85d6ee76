#include <gridpilot/runtime.hpp>

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace gridpilot;
using namespace gridpilot::runtime;

namespace {

ddpg::TrainConfig small_config() {
    ddpg::TrainConfig c;
    c.actor_hidden1 = c.critic_hidden1 = 16;
    c.actor_hidden2 = c.critic_hidden2 = 12;
    c.horizon = 4;
    c.batch_size = 8;
    c.seed = 3;
    return c;
}

Scenario fixed_scenario(const Feeder& f, double pv_ratio, double load_factor) {
    Scenario s;
    for (const auto& l : f.loads) {
        s.p_load.push_back(load_factor * l.p_nominal);
        s.q_load.push_back(load_factor * l.q_nominal);
    }
    for (const auto& pv : f.pv_units) s.p_pv.push_back(std::min(pv.p_rated, pv_ratio * pv_reference_demand(f, pv)));
    return s;
}

// Agent whose policy is exactly a = c everywhere.
ddpg::AgentNets constant_agent(const env::Environment& e, double c) {
    std::mt19937_64 rng(1);
    auto n = ddpg::make_agent(static_cast<Eigen::Index>(e.node_count()), 1, small_config(), rng);
    n.actor.layers.back().weights.setZero();
    n.actor.layers.back().biases.setConstant(std::atanh(c));
    n.actor_target = n.actor;
    return n;
}

ScenarioSet generated(const Feeder& f, int count, std::uint64_t seed) {
    GenConfig g;
    g.count = count;
    return generate_scenarios(f, g, seed);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string agent_bytes(const ddpg::AgentNets& n) {
    std::ostringstream os;
    ddpg::write_agent(os, n);
    return os.str();
}

} // namespace

TEST(Apr, TrivialCases) {
    AprConfig apr;
    apr.window = 4;
    apr.reference_reward = -2.0;
    EXPECT_DOUBLE_EQ(apr.threshold(), 0.5);
    const std::vector<double> at_ref(4, -2.0), low(4, -3.0), short_low(3, -30.0);
    EXPECT_EQ(apr_check(at_ref, apr), AprDecision::Ok);
    EXPECT_EQ(apr_check(low, apr), AprDecision::FineTune);
    EXPECT_EQ(apr_check(short_low, apr), AprDecision::Ok);
    apr.degradation_threshold = 2.0;
    EXPECT_EQ(apr_check(low, apr), AprDecision::Ok);
}

TEST(Apr, OnlyTrailingWindowCounts) {
    AprConfig apr;
    apr.window = 3;
    apr.reference_reward = -1.0;
    EXPECT_EQ(apr_check(std::vector<double>{-100.0, -1.0, -1.0, -1.0}, apr), AprDecision::Ok);
    EXPECT_EQ(apr_check(std::vector<double>{-1.0, -1.0, -1.0, -100.0}, apr), AprDecision::FineTune);
}

TEST(Apr, NeverTriggersAtReference) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> ref(-50.0, 0.0);
    for (int t = 0; t < 200; ++t) {
        AprConfig apr;
        apr.window = 1 + static_cast<int>(rng() % 60);
        apr.reference_reward = ref(rng);
        if (t % 2) apr.degradation_threshold = 0.0;
        EXPECT_EQ(apr_check(std::vector<double>(static_cast<std::size_t>(apr.window) + 3, apr.reference_reward), apr),
                  AprDecision::Ok);
    }
}

TEST(Apr, Validation) {
    AprConfig apr;
    apr.window = 0;
    EXPECT_THROW(apr.validate(), SchemaError);
    apr = {};
    apr.fine_tune_episodes = 0;
    EXPECT_THROW(apr.validate(), SchemaError);
}

TEST(Oracle, GridShape) {
    EXPECT_EQ(oracle_points(0.01), 201);
    EXPECT_EQ(oracle_points(1.0), 3);
    EXPECT_THROW(oracle_points(0.0), UsageError);
    EXPECT_THROW(oracle_grid(2), UsageError);
    const auto g = oracle_grid(201);
    EXPECT_EQ(g.front(), -1.0);
    EXPECT_EQ(g.back(), 1.0);
    EXPECT_EQ(g[100], 0.0);
    for (std::size_t i = 1; i < g.size(); ++i) EXPECT_NEAR(g[i] - g[i - 1], 0.01, 1e-15);
    const auto coarse = oracle_grid(21);
    for (std::size_t i = 0; i < coarse.size(); ++i) EXPECT_EQ(coarse[i], g[10 * i]);
}

TEST(Oracle, NominalScenarioPicksZero) {
    Feeder f = load_feeder(oracle::fixture("4bus.json"));
    f.source_voltage_pu = 1.0;
    const env::Environment e(f);
    const auto r = oracle_best_action(e, fixed_scenario(f, 0.0, 0.0), 21);
    EXPECT_EQ(r.best_action, 0.0);
    EXPECT_EQ(r.best_reward, 0.0);
    EXPECT_EQ(r.baseline_reward, 0.0);
}

TEST(Oracle, OverVoltageAbsorbs) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    const Scenario s = fixed_scenario(e.feeder(), 1.05, 0.2);
    std::mt19937_64 rng(1);
    ASSERT_GT(env::env_step(e, s, env::zero_action(e), rng).info.true_v_mag.maxCoeff(), 1.05);
    const auto r = oracle_best_action(e, s, oracle_points(0.01));
    EXPECT_LT(r.best_action, 0.0);
    EXPECT_GT(r.best_reward, r.baseline_reward);
    // Brute-force sweep over the same grid agrees on the best reward.
    double best = -std::numeric_limits<double>::infinity();
    for (double a : oracle_grid(201)) best = std::max(best, env::env_step(e, s, env::MdpAction{{a}}, rng).reward);
    EXPECT_EQ(r.best_reward, best);
}

TEST(Oracle, RefinementNeverLowersBestReward) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    const auto set = generated(e.feeder(), 15, 4);
    for (const auto& s : set.scenarios) {
        double prev = -std::numeric_limits<double>::infinity();
        for (int points : {3, 5, 9, 17, 33, 65, 129}) {
            const double r = oracle_best_action(e, s, points).best_reward;
            EXPECT_GE(r, prev) << "scenario " << s.id << " points " << points;
            prev = r;
        }
    }
}

TEST(Oracle, Errors) {
    env::Environment two(load_feeder(oracle::fixture("2bus.json")));
    Scenario s = fixed_scenario(two.feeder(), 0.0, 1.0);
    s.p_load[0] = 50.0;
    EXPECT_THROW(oracle_best_action(two, s, 5), DatasetError);
    env::Environment four(load_feeder(oracle::fixture("4bus.json")));
    four.set_zone_map({1});
    EXPECT_THROW(oracle_best_action(four, fixed_scenario(four.feeder(), 0.5, 0.5), 5), UsageError);
}

TEST(FineTune, ZeroEpisodesLeavesAgentUnchanged) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    const auto agent = constant_agent(e, 0.1);
    const auto set = generated(e.feeder(), 5, 1);
    std::vector<ddpg::Transition> recent(1);
    recent[0].s.v_mag = recent[0].s_next.v_mag = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(e.node_count()));
    recent[0].a.coefficients = {0.0};
    const auto out = fine_tune(agent, recent, e, set, 0, small_config());
    EXPECT_EQ(agent_bytes(out.agent), agent_bytes(agent));
    EXPECT_FALSE(out.reverted);
    EXPECT_THROW(fine_tune(agent, {}, e, set, 1, small_config()), UsageError);
}

TEST(FineTune, DeterministicAndChangesAgent) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    std::mt19937_64 rng(5);
    const auto agent = ddpg::make_agent(static_cast<Eigen::Index>(e.node_count()), 1, small_config(), rng);
    const auto set = generated(e.feeder(), 10, 2);
    std::vector<ddpg::Transition> recent;
    std::mt19937_64 noise(0);
    for (const auto& s : set.scenarios) {
        const auto r0 = env::env_reset(e, s, noise);
        const env::MdpAction a{{-0.3}};
        const auto r1 = env::env_step(e, s, a, noise);
        recent.push_back({r0.next_state, a, r1.reward, r1.next_state, false});
    }
    const auto a = fine_tune(agent, recent, e, set, 3, small_config());
    const auto b = fine_tune(agent, recent, e, set, 3, small_config());
    EXPECT_EQ(agent_bytes(a.agent), agent_bytes(b.agent));
    EXPECT_NE(agent_bytes(a.agent), agent_bytes(agent));
    EXPECT_EQ(a.history.size(), 3u);
    for (const auto& h : a.history) EXPECT_EQ(h.sigma, small_config().noise_sigma_end);
}

TEST(Evaluate, ZeroActionAgentReproducesBaseline) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    const auto agent = constant_agent(e, 0.0);
    const auto rep = evaluate(agent, e, generated(e.feeder(), 12, 6), {3});
    for (const auto& s : rep.scenarios) {
        EXPECT_EQ(s.controlled_v, s.baseline_v);
        EXPECT_EQ(s.controlled_reward, s.baseline_reward);
        EXPECT_EQ(s.action, std::vector<double>{0.0});
        EXPECT_EQ(s.pipeline_latency_seconds.size(), 3u);
    }
    EXPECT_EQ(rep.controlled_violations, rep.baseline_violations);
}

TEST(Evaluate, ReportMatchesBruteForceAggregation) {
    const env::Environment e(load_feeder(oracle::fixture("synth34.json")));
    const auto agent = constant_agent(e, -0.6);
    const auto set = generated(e.feeder(), 25, 7);
    const auto rep = evaluate(agent, e, set, {2}, 9);
    ASSERT_EQ(rep.scenario_count, 25u);
    const auto& rc = e.reward_config;
    const auto n = static_cast<Eigen::Index>(e.node_count());
    std::size_t viol_b = 0, viol_c = 0, over_b = 0;
    double dev_b = 0.0, dev_c = 0.0, rew_c = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        double sum = 0.0;
        for (const auto& s : rep.scenarios) sum += s.controlled_v(i);
        const double mean = sum / 25.0;
        double var = 0.0;
        for (const auto& s : rep.scenarios) var += (s.controlled_v(i) - mean) * (s.controlled_v(i) - mean);
        EXPECT_NEAR(rep.controlled_mean(i), mean, 1e-14);
        EXPECT_NEAR(rep.controlled_std(i), std::sqrt(var / 25.0), 1e-12);
    }
    for (const auto& s : rep.scenarios) {
        bool over = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            viol_b += s.baseline_v(i) < rc.v_min || s.baseline_v(i) > rc.v_max;
            viol_c += s.controlled_v(i) < rc.v_min || s.controlled_v(i) > rc.v_max;
            over = over || s.baseline_v(i) > rc.v_max;
            dev_b += std::fabs(s.baseline_v(i) - 1.0);
            dev_c += std::fabs(s.controlled_v(i) - 1.0);
        }
        over_b += over;
        rew_c += s.controlled_reward;
    }
    EXPECT_EQ(rep.baseline_violations, viol_b);
    EXPECT_EQ(rep.controlled_violations, viol_c);
    EXPECT_EQ(rep.baseline_scenarios_over_upper, over_b);
    EXPECT_NEAR(rep.baseline_mean_deviation, dev_b / 25.0, 1e-12);
    EXPECT_NEAR(rep.controlled_mean_deviation, dev_c / 25.0, 1e-12);
    EXPECT_NEAR(rep.controlled_mean_reward, rew_c / 25.0, 1e-12);
    EXPECT_NEAR(rep.controlled_in_band_fraction(), 1.0 - static_cast<double>(viol_c) / (25.0 * static_cast<double>(n)), 1e-15);

    const auto again = aggregate(rep.scenarios, e.node_count());
    EXPECT_EQ(again.controlled_mean, rep.controlled_mean);
    EXPECT_EQ(again.baseline_std, rep.baseline_std);
    EXPECT_EQ(again.controlled_violations, rep.controlled_violations);
}

TEST(Evaluate, ReportFilesAreReproducible) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    const auto agent = constant_agent(e, -0.2);
    const auto set = generated(e.feeder(), 8, 8);
    const auto root = std::filesystem::temp_directory_path() / "gridpilot_eval";
    for (const char* d : {"a", "b"}) {
        std::filesystem::create_directories(root / d);
        write_eval_report(evaluate(agent, e, set), e, (root / d).string());
    }
    for (const char* f : {"eval_scenarios.csv", "voltage_profile.csv", "summary.json"})
        EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
    EXPECT_THROW(evaluate(agent, e, ScenarioSet{}), DatasetError);
}

TEST(Latency, Stats) {
    std::vector<double> v;
    for (int i = 100; i >= 1; --i) v.push_back(i);
    const auto s = latency_stats(v);
    EXPECT_EQ(s.count, 100u);
    EXPECT_EQ(s.p50, 50.0);
    EXPECT_EQ(s.p99, 99.0);
    EXPECT_EQ(s.max, 100.0);
    EXPECT_DOUBLE_EQ(s.mean, 50.5);
    EXPECT_EQ(latency_stats({}).count, 0u);
}

TEST(Online, DeterministicLogs) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    std::mt19937_64 rng(10);
    const auto agent = ddpg::make_agent(static_cast<Eigen::Index>(e.node_count()), 1, small_config(), rng);
    const auto stream = generated(e.feeder(), 30, 11);
    AprConfig apr;
    apr.window = 5;
    apr.reference_reward = -1e-6;
    apr.degradation_threshold = 0.0;
    apr.fine_tune_episodes = 1;
    OnlineOptions opt;
    opt.fine_tune_config = small_config();
    const auto root = std::filesystem::temp_directory_path() / "gridpilot_online";
    std::filesystem::create_directories(root);
    const auto a = run_online(agent, e, stream, apr, opt);
    const auto b = run_online(agent, e, stream, apr, opt);
    write_run_log(a, e, (root / "a.csv").string());
    write_run_log(b, e, (root / "b.csv").string());
    EXPECT_EQ(slurp(root / "a.csv"), slurp(root / "b.csv"));
    EXPECT_EQ(agent_bytes(a.final_agent), agent_bytes(b.final_agent));
    EXPECT_EQ(a.steps.size(), 30u);
}

TEST(Online, AprWindowRestartsAfterTrigger) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    const auto agent = constant_agent(e, 0.0);
    const auto stream = generated(e.feeder(), 20, 12);
    AprConfig apr;
    apr.window = 5;
    apr.reference_reward = 0.0;
    apr.degradation_threshold = 0.0; // every negative window triggers
    OnlineOptions opt;
    opt.enable_fine_tune = false;
    const auto log = run_online(agent, e, stream, apr, opt);
    EXPECT_EQ(log.apr_triggers, 4u);
    for (const auto& s : log.steps) EXPECT_EQ(s.apr_triggered, s.step % 5 == 4) << s.step;
    EXPECT_EQ(agent_bytes(log.final_agent), agent_bytes(agent));
}

TEST(Online, BenignStreamNeverTriggers) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    const auto agent = constant_agent(e, 0.0);
    std::mt19937_64 rng(0);
    ScenarioSet benign;
    double total = 0.0;
    for (const auto& s : generated(e.feeder(), 200, 13).scenarios) {
        const auto r = env::env_step(e, s, env::zero_action(e), rng);
        if (env::violation_count(r.info.true_v_mag, e.reward_config) == 0) {
            benign.scenarios.push_back(s);
            total += r.reward;
        }
    }
    ASSERT_GE(benign.size(), 50u);
    AprConfig apr;
    apr.window = 10;
    apr.reference_reward = total / static_cast<double>(benign.size());
    const auto log = run_online(agent, e, benign, apr);
    EXPECT_EQ(log.apr_triggers, 0u);
    for (const auto& s : log.steps) EXPECT_EQ(env::violation_count(s.result.info.true_v_mag, e.reward_config), 0u);
}

TEST(Online, DimensionMismatchRejected) {
    const env::Environment e(load_feeder(oracle::fixture("4bus.json")));
    const env::Environment big(load_feeder(oracle::fixture("synth34.json")));
    const auto agent = constant_agent(big, 0.0);
    EXPECT_THROW(run_online(agent, e, generated(e.feeder(), 2, 1), AprConfig{}), ShapeError);
}
