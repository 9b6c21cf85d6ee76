#include <gridpilot/ddpg.hpp>

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace gridpilot;
using namespace gridpilot::ddpg;
using env::MdpAction;
using env::MdpState;
using nn::Matrix;

namespace {

TrainConfig small_config() {
    TrainConfig c;
    c.actor_hidden1 = c.critic_hidden1 = 16;
    c.actor_hidden2 = c.critic_hidden2 = 12;
    return c;
}

AgentNets small_agent(Eigen::Index state_dim, std::uint64_t seed, double final_init = 3e-3) {
    auto cfg = small_config();
    cfg.final_layer_init = final_init;
    std::mt19937_64 rng(seed);
    return make_agent(state_dim, 1, cfg, rng);
}

MdpState random_state(Eigen::Index n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.93, 1.07);
    MdpState s;
    s.v_mag.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) s.v_mag(i) = u(rng);
    return s;
}

std::vector<Transition> random_transitions(Eigen::Index n, int count, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> a(-1.0, 1.0), r(-2.0, 0.0);
    std::vector<Transition> ts;
    for (int i = 0; i < count; ++i) ts.push_back({random_state(n, rng), {{a(rng)}}, r(rng), random_state(n, rng), i % 3 == 0});
    return ts;
}

// Plain loop-based forward pass for dense networks without batch norm.
std::vector<double> loop_forward(const nn::MlpModel& m, std::vector<double> x) {
    for (const auto& l : m.layers) {
        std::vector<double> y(static_cast<std::size_t>(l.out_dim()));
        for (Eigen::Index o = 0; o < l.out_dim(); ++o) {
            double z = l.biases(o);
            for (Eigen::Index i = 0; i < l.in_dim(); ++i) z += x[static_cast<std::size_t>(i)] * l.weights(i, o);
            if (l.activation == nn::Activation::Relu) z = std::max(0.0, z);
            if (l.activation == nn::Activation::Tanh) z = std::tanh(z);
            y[static_cast<std::size_t>(o)] = z;
        }
        x = std::move(y);
    }
    return x;
}

std::vector<double> scaled(const AgentNets& n, const MdpState& s) {
    std::vector<double> out;
    for (Eigen::Index i = 0; i < s.v_mag.size(); ++i) out.push_back((s.v_mag(i) - n.scaling.center) / n.scaling.scale);
    return out;
}

double loop_q(const nn::MlpModel& critic, const AgentNets& n, const MdpState& s, double a) {
    auto in = scaled(n, s);
    in.push_back(a);
    return loop_forward(critic, in)[0];
}

std::string agent_bytes(const AgentNets& n) {
    std::ostringstream os;
    write_agent(os, n);
    return os.str();
}

void zero_final_weights(nn::MlpModel& m, double bias) {
    m.layers.back().weights.setZero();
    m.layers.back().biases.setConstant(bias);
}

// Q(s, a) = piecewise-linear interpolant of -(a - a_star)^2 on knots spaced 0.05 over [-1, 1].
nn::MlpModel quadratic_critic(Eigen::Index state_dim, double a_star) {
    std::vector<double> knots;
    for (int i = 0; i <= 40; ++i) knots.push_back(-1.0 + 0.05 * i);
    const auto f = [&](double a) { return -(a - a_star) * (a - a_star); };
    const auto h = static_cast<Eigen::Index>(knots.size() - 1);
    nn::DenseLayer hidden;
    hidden.weights = Matrix::Zero(state_dim + 1, h);
    hidden.biases.resize(h);
    hidden.activation = nn::Activation::Relu;
    nn::DenseLayer out;
    out.weights = Matrix::Zero(h, 1);
    out.biases = nn::RowVector::Constant(1, f(knots[0]));
    double prev_slope = 0.0;
    for (Eigen::Index j = 0; j < h; ++j) {
        const auto k = static_cast<std::size_t>(j);
        hidden.weights(state_dim, j) = 1.0;
        hidden.biases(j) = -knots[k];
        const double slope = (f(knots[k + 1]) - f(knots[k])) / (knots[k + 1] - knots[k]);
        out.weights(j, 0) = slope - prev_slope;
        prev_slope = slope;
    }
    nn::MlpModel m;
    m.layers = {hidden, out};
    m.mode = nn::Mode::Train;
    return m;
}

} // namespace

TEST(Agent, ArchitectureAndTargetsStartEqual) {
    TrainConfig cfg;
    std::mt19937_64 rng(1);
    const auto n = make_agent(135, 1, cfg, rng);
    ASSERT_EQ(n.actor.layers.size(), 3u);
    EXPECT_EQ(n.actor.layers[0].weights.rows(), 135);
    EXPECT_EQ(n.actor.layers[0].weights.cols(), 400);
    EXPECT_EQ(n.actor.layers[1].weights.cols(), 300);
    EXPECT_EQ(n.actor.layers[0].activation, nn::Activation::Relu);
    EXPECT_EQ(n.actor.layers[1].activation, nn::Activation::Tanh);
    EXPECT_EQ(n.actor.layers[2].activation, nn::Activation::Tanh);
    EXPECT_EQ(n.critic.input_dim(), 136);
    EXPECT_EQ(n.critic.output_dim(), 1);
    EXPECT_EQ(n.critic.layers[1].activation, nn::Activation::Relu);
    EXPECT_EQ(nn::flatten_parameters(n.actor), nn::flatten_parameters(n.actor_target));
    EXPECT_EQ(nn::flatten_parameters(n.critic), nn::flatten_parameters(n.critic_target));
    EXPECT_LE(n.actor.layers[2].weights.cwiseAbs().maxCoeff(), 3e-3);
    EXPECT_THROW(make_agent(0, 1, cfg, rng), ShapeError);
}

TEST(Act, DeterministicWithoutNoiseAndClamped) {
    auto n = small_agent(6, 2, 1.0);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 200; ++i) {
        const auto s = random_state(6, rng);
        EXPECT_EQ(act(n, s).coefficients, act(n, s).coefficients);
        EXPECT_EQ(act(n, s, 0.0, rng).coefficients, act(n, s).coefficients);
        const double a = act(n, s, 5.0, rng).coefficients[0];
        EXPECT_GE(a, -1.0);
        EXPECT_LE(a, 1.0);
    }
    MdpState wrong;
    wrong.v_mag = Eigen::VectorXd::Ones(5);
    EXPECT_THROW(act(n, wrong), ShapeError);
}

TEST(Act, GaussianNoiseHasRequestedSpread) {
    auto n = small_agent(4, 4);
    zero_final_weights(n.actor, 0.0); // pi(s) = 0 exactly
    std::mt19937_64 rng(5);
    MdpState s;
    s.v_mag = Eigen::VectorXd::Ones(4);
    std::vector<double> abs_a;
    for (int i = 0; i < 10000; ++i) abs_a.push_back(std::fabs(act(n, s, 0.5, rng).coefficients[0]));
    // The clamp at |a| = 1 (two sigma) leaves the median of |noise| intact: median = 0.6745 sigma.
    std::nth_element(abs_a.begin(), abs_a.begin() + 5000, abs_a.end());
    EXPECT_NEAR(abs_a[5000] / 0.6744897501960817, 0.5, 0.5 * 0.03);
}

TEST(Critic, ZeroFinalLayerGivesZero) {
    auto n = small_agent(5, 6);
    zero_final_weights(n.critic, 0.0);
    std::mt19937_64 rng(7);
    for (int i = 0; i < 20; ++i) EXPECT_EQ(critic_value(n, random_state(5, rng), {{0.3}}), 0.0);
}

TEST(Critic, DeterministicAndActionSensitive) {
    const auto n = small_agent(5, 8, 0.1);
    std::mt19937_64 rng(9);
    const auto s = random_state(5, rng);
    EXPECT_EQ(critic_value(n, s, {{0.2}}), critic_value(n, s, {{0.2}}));
    EXPECT_NEAR(critic_value(n, s, {{0.2}}), loop_q(n.critic, n, s, 0.2), 1e-14);
    const double h = 1e-4;
    EXPECT_GT(std::fabs(critic_value(n, s, {{0.2 + h}}) - critic_value(n, s, {{0.2 - h}})), 1e-9);
    EXPECT_THROW(critic_value(n, s, {{0.2, 0.1}}), ShapeError);
}

TEST(TdLoss, GammaZeroTargetsAreRewards) {
    const auto n = small_agent(4, 10, 0.1);
    std::mt19937_64 rng(11);
    const auto ts = random_transitions(4, 8, rng);
    const auto td = td_loss(n, make_batch(ts), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        EXPECT_EQ(td.targets(static_cast<Eigen::Index>(i)), ts[i].r);
        const double e = critic_value(n, ts[i].s, ts[i].a) - ts[i].r;
        loss += e * e;
    }
    EXPECT_NEAR(td.loss, loss / static_cast<double>(ts.size()), 1e-13);
}

TEST(TdLoss, ExactCriticGivesZeroLoss) {
    auto n = small_agent(4, 12);
    const double c = -0.75, gamma = 0.9;
    zero_final_weights(n.critic, c);
    zero_final_weights(n.critic_target, c);
    std::mt19937_64 rng(13);
    auto ts = random_transitions(4, 6, rng);
    for (auto& t : ts) t.r = t.terminal ? c : c * (1.0 - gamma);
    const auto td = td_loss(n, make_batch(ts), gamma);
    EXPECT_LT(td.loss, 1e-28);
    for (double g : nn::flatten_gradients(n.critic, td.critic_gradients)) EXPECT_LT(std::fabs(g), 1e-14);
}

TEST(TdLoss, MatchesBruteForce) {
    auto n = small_agent(4, 14, 0.1);
    std::mt19937_64 rng(15);
    {
        // Distinct target networks so the test sees which nets feed y.
        auto other = small_agent(4, 99, 0.1);
        n.actor_target = other.actor;
        n.critic_target = other.critic;
    }
    const auto ts = random_transitions(4, 7, rng);
    const double gamma = 0.95;
    const auto td = td_loss(n, make_batch(ts), gamma);
    double loss = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const double a_next = loop_forward(n.actor_target, scaled(n, ts[i].s_next))[0];
        const double y = ts[i].r + (ts[i].terminal ? 0.0 : gamma * loop_q(n.critic_target, n, ts[i].s_next, a_next));
        EXPECT_NEAR(td.targets(static_cast<Eigen::Index>(i)), y, 1e-13);
        const double e = loop_q(n.critic, n, ts[i].s, ts[i].a.coefficients[0]) - y;
        loss += e * e;
    }
    EXPECT_NEAR(td.loss, loss / static_cast<double>(ts.size()), 1e-13);

    // Critic gradient against central differences of the loss.
    auto params = nn::flatten_parameters(n.critic);
    const auto g = nn::flatten_gradients(n.critic, td.critic_gradients);
    std::mt19937_64 pick(16);
    std::uniform_int_distribution<std::size_t> u(0, params.size() - 1);
    const double h = 1e-6;
    for (int k = 0; k < 40; ++k) {
        const auto i = u(pick);
        auto probe = n;
        auto p = params;
        p[i] += h;
        nn::assign_parameters(probe.critic, p);
        const double up = td_loss(probe, make_batch(ts), gamma).loss;
        p[i] -= 2 * h;
        nn::assign_parameters(probe.critic, p);
        const double down = td_loss(probe, make_batch(ts), gamma).loss;
        const double fd = (up - down) / (2 * h);
        EXPECT_LE(std::fabs(fd - g[i]) / std::max({std::fabs(fd), std::fabs(g[i]), 1e-6}), 1e-4) << "param " << i;
    }
}

TEST(PolicyGradient, MatchesFiniteDifferences) {
    const auto n = small_agent(5, 17, 0.3);
    std::mt19937_64 rng(18);
    Matrix states(6, 5);
    for (Eigen::Index r = 0; r < states.rows(); ++r) states.row(r) = random_state(5, rng).v_mag.transpose();
    const auto pg = policy_gradient(n, states);
    const auto params = nn::flatten_parameters(n.actor);
    const auto g = nn::flatten_gradients(n.actor, pg.actor_gradients);
    const auto objective = [&](const std::vector<double>& p) {
        auto probe = n;
        nn::assign_parameters(probe.actor, p);
        return policy_gradient(probe, states).objective;
    };
    EXPECT_NEAR(objective(params), pg.objective, 0.0);
    const double h = 1e-6;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < params.size(); i += 3) {
        auto p = params;
        p[i] += h;
        const double up = objective(p);
        p[i] -= 2 * h;
        const double fd = (up - objective(p)) / (2 * h);
        EXPECT_LE(std::fabs(fd - g[i]) / std::max({std::fabs(fd), std::fabs(g[i]), 1e-6}), 1e-4) << "param " << i;
        ++checked;
    }
    EXPECT_GT(checked, 100u);
}

TEST(PolicyUpdate, ZeroCriticLeavesActorUnchanged) {
    auto n = small_agent(4, 19, 0.1);
    for (auto& l : n.critic.layers) {
        l.weights.setZero();
        l.biases.setZero();
    }
    std::mt19937_64 rng(20);
    const auto before = nn::flatten_parameters(n.actor);
    nn::AdamState opt(1e-2);
    for (int i = 0; i < 5; ++i) policy_update(n, make_batch(random_transitions(4, 8, rng)), opt);
    EXPECT_EQ(nn::flatten_parameters(n.actor), before);
}

TEST(PolicyUpdate, ConvergesToToyCriticMaximum) {
    auto n = small_agent(3, 21);
    const double a_star = 0.3;
    n.critic = quadratic_critic(3, a_star);
    std::mt19937_64 rng(22);
    const auto ts = random_transitions(3, 1, rng);
    ASSERT_NEAR(critic_value(n, ts[0].s, {{a_star}}), 0.0, 1e-12);
    ASSERT_NEAR(critic_value(n, ts[0].s, {{-0.5}}), -0.64, 1e-12);
    const auto b = make_batch(ts);
    nn::AdamState opt(1e-3);
    for (int i = 0; i < 3000; ++i) policy_update(n, b, opt);
    EXPECT_NEAR(act(n, ts[0].s).coefficients[0], a_star, 0.01);
}

TEST(SoftUpdate, Cases) {
    auto n = small_agent(3, 23);
    auto t = n.actor;
    auto learned = n.actor;
    std::vector<double> ones(nn::parameter_count(learned), 1.0), zeros(ones.size(), 0.0);
    nn::assign_parameters(learned, ones);
    nn::assign_parameters(t, zeros);
    nn::soft_update(learned, t, 0.001);
    for (double v : nn::flatten_parameters(t)) EXPECT_DOUBLE_EQ(v, 0.001);
    nn::soft_update(learned, t, 1.0);
    EXPECT_EQ(nn::flatten_parameters(t), ones);
    nn::assign_parameters(t, zeros);
    nn::soft_update(learned, t, 0.0);
    EXPECT_EQ(nn::flatten_parameters(t), zeros);
    EXPECT_THROW(nn::soft_update(n.critic, t, 0.5), ShapeError);
}

TEST(SoftUpdate, TargetLagBound) {
    std::mt19937_64 rng(24);
    for (int trial = 0; trial < 20; ++trial) {
        auto n = small_agent(4, 100 + static_cast<std::uint64_t>(trial), 0.5);
        auto other = small_agent(4, 200 + static_cast<std::uint64_t>(trial), 0.5);
        n.actor_target = other.actor;
        n.critic_target = other.critic;
        const double tau = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const auto prev_a = nn::flatten_parameters(n.actor_target);
        const auto prev_c = nn::flatten_parameters(n.critic_target);
        soft_update_targets(n, tau);
        for (const auto& [learned, prev, now] :
             {std::tuple{nn::flatten_parameters(n.actor), prev_a, nn::flatten_parameters(n.actor_target)},
              std::tuple{nn::flatten_parameters(n.critic), prev_c, nn::flatten_parameters(n.critic_target)}}) {
            double moved = 0.0, gap = 0.0;
            for (std::size_t i = 0; i < prev.size(); ++i) {
                moved = std::max(moved, std::fabs(now[i] - prev[i]));
                gap = std::max(gap, std::fabs(learned[i] - prev[i]));
            }
            EXPECT_LE(moved, tau * gap * (1.0 + 1e-12) + 1e-300);
        }
    }
}

TEST(Replay, EvictsOldestFirst) {
    ReplayBuffer buf(5);
    for (int i = 0; i < 8; ++i) {
        Transition t;
        t.r = i;
        buf.push(t);
        EXPECT_LE(buf.size(), 5u);
    }
    ASSERT_EQ(buf.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(buf.oldest(i).r, 3.0 + static_cast<double>(i));
    EXPECT_THROW(ReplayBuffer(0), UsageError);
    std::mt19937_64 rng(1);
    EXPECT_THROW(ReplayBuffer(3).sample_indices(1, rng), UsageError);
}

TEST(Replay, SamplingIsUniform) {
    const std::size_t cap = 64;
    ReplayBuffer buf(cap);
    for (std::size_t i = 0; i < cap + 10; ++i) buf.push({});
    std::mt19937_64 rng(25);
    const std::size_t draws = 100000;
    std::vector<std::size_t> counts(cap, 0);
    for (auto i : buf.sample_indices(draws, rng)) ++counts[i];
    const double p = 1.0 / static_cast<double>(cap);
    const double mean = static_cast<double>(draws) * p;
    const double sd = std::sqrt(static_cast<double>(draws) * p * (1.0 - p));
    for (std::size_t i = 0; i < cap; ++i) EXPECT_LE(std::fabs(static_cast<double>(counts[i]) - mean), 3.0 * sd) << "slot " << i;
}

TEST(Schedule, SigmaAnnealsLinearly) {
    TrainConfig c;
    EXPECT_EQ(sigma_for_episode(c, 0), 0.5);
    EXPECT_NEAR(sigma_for_episode(c, 99), 0.005, 1e-15);
    EXPECT_NEAR(sigma_for_episode(c, 33), 0.5 - 0.495 / 3.0, 1e-15);
}

TEST(TrainConfig, ValidationAndJson) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.gamma = 1.5;
    EXPECT_THROW(c.validate(), SchemaError);
    c = {};
    c.tau = 0.0;
    EXPECT_THROW(c.validate(), SchemaError);
    c = {};
    c.batch_size = 20000;
    EXPECT_THROW(c.validate(), SchemaError);
    c = {};
    c.noise = NoiseKind::OrnsteinUhlenbeck;
    const nlohmann::json j = c;
    EXPECT_EQ(j.at("noise"), "ou");
    EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
    EXPECT_THROW(nlohmann::json::parse(R"({"gama": 0.9})").get<TrainConfig>(), SchemaError);
}

namespace {

struct SmallRun {
    env::Environment environment{load_feeder(oracle::fixture("4bus.json"))};
    ScenarioSet scenarios;
    TrainConfig cfg = small_config();

    SmallRun() {
        GenConfig g;
        g.count = 20;
        scenarios = generate_scenarios(environment.feeder(), g, 30);
        environment.horizon = 5;
        cfg.horizon = 5;
        cfg.batch_size = 8;
        cfg.episodes = 6;
        cfg.seed = 31;
    }
};

} // namespace

TEST(Train, NoUpdatesUntilBufferHoldsABatch) {
    SmallRun run;
    run.cfg.batch_size = 64;
    run.cfg.episodes = 3;
    const auto init = make_trainer(run.environment, run.cfg);
    const auto out = train(run.environment, run.scenarios, run.cfg);
    EXPECT_EQ(agent_bytes(out.nets), agent_bytes(init.nets));
    EXPECT_EQ(out.history.size(), 3u);
}

TEST(Train, UpdatesChangeNetworks) {
    SmallRun run;
    const auto init = make_trainer(run.environment, run.cfg);
    const auto out = train(run.environment, run.scenarios, run.cfg);
    EXPECT_NE(nn::flatten_parameters(out.nets.actor), nn::flatten_parameters(init.nets.actor));
    EXPECT_NE(nn::flatten_parameters(out.nets.critic_target), nn::flatten_parameters(init.nets.critic_target));
    ASSERT_EQ(out.history.size(), 6u);
    for (std::size_t i = 0; i < out.history.size(); ++i) {
        EXPECT_EQ(out.history[i].episode, static_cast<int>(i));
        EXPECT_EQ(out.history[i].sigma, sigma_for_episode(run.cfg, static_cast<int>(i)));
        EXPECT_LE(out.history[i].cumulative_reward, 0.0);
    }
}

TEST(Train, DeterministicUnderSeed) {
    SmallRun run;
    const auto a = train(run.environment, run.scenarios, run.cfg);
    const auto b = train(run.environment, run.scenarios, run.cfg);
    EXPECT_EQ(agent_bytes(a.nets), agent_bytes(b.nets));
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        EXPECT_EQ(a.history[i].cumulative_reward, b.history[i].cumulative_reward);
        EXPECT_EQ(a.history[i].scenario_id, b.history[i].scenario_id);
    }
    run.cfg.seed = 32;
    EXPECT_NE(agent_bytes(train(run.environment, run.scenarios, run.cfg).nets), agent_bytes(a.nets));
}

TEST(Train, OuNoiseRunsAndIsDeterministic) {
    SmallRun run;
    run.cfg.noise = NoiseKind::OrnsteinUhlenbeck;
    const auto a = train(run.environment, run.scenarios, run.cfg);
    const auto b = train(run.environment, run.scenarios, run.cfg);
    EXPECT_EQ(agent_bytes(a.nets), agent_bytes(b.nets));
}

TEST(Train, ResumeFromCheckpointIsBitExact) {
    SmallRun run;
    TrainHooks hooks;
    hooks.fixed_sigma = 0.3;
    auto straight = make_trainer(run.environment, run.cfg);
    train_episodes(straight, run.environment, run.scenarios, run.cfg, hooks);

    auto first = run.cfg;
    first.episodes = 3;
    auto partial = make_trainer(run.environment, first);
    train_episodes(partial, run.environment, run.scenarios, first, hooks);
    std::stringstream ss;
    write_trainer(ss, partial, first);
    auto [resumed, cfg] = read_trainer(ss);
    EXPECT_EQ(cfg.episodes, 3);
    cfg.episodes = run.cfg.episodes;
    train_episodes(resumed, run.environment, run.scenarios, cfg, hooks);

    EXPECT_EQ(agent_bytes(resumed.nets), agent_bytes(straight.nets));
    EXPECT_EQ(resumed.updates, straight.updates);
    ASSERT_EQ(resumed.history.size(), straight.history.size());
    for (std::size_t i = 0; i < resumed.history.size(); ++i)
        EXPECT_EQ(resumed.history[i].cumulative_reward, straight.history[i].cumulative_reward);
    std::stringstream x, y;
    write_trainer(x, resumed, run.cfg);
    write_trainer(y, straight, run.cfg);
    EXPECT_EQ(x.str(), y.str());
}

TEST(Train, DimensionMismatchRejected) {
    SmallRun run;
    auto st = make_trainer(run.environment, run.cfg);
    env::Environment other(load_feeder(oracle::fixture("synth34.json")));
    EXPECT_THROW(train_episodes(st, other, run.scenarios, run.cfg), ShapeError);
    EXPECT_THROW(train_episodes(st, run.environment, ScenarioSet{}, run.cfg), DatasetError);
}

TEST(Checkpoint, AgentRoundTrip) {
    const auto n = small_agent(7, 40, 0.2);
    std::stringstream ss;
    write_agent(ss, n);
    const auto back = read_agent(ss);
    EXPECT_EQ(agent_bytes(back), agent_bytes(n));
    std::stringstream bad("GPXX");
    EXPECT_THROW(read_agent(bad), SchemaError);
}

TEST(RewardCsv, Format) {
    const auto path = (std::filesystem::temp_directory_path() / "gridpilot_reward.csv").string();
    write_reward_csv({{0, 3, -1.5, 0.5}, {1, 4, -0.25, 0.005}}, path);
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(ss.str(), "episode,cumulative_reward,sigma\n0,-1.5,0.5\n1,-0.25,0.0050000000000000001\n");
}
