#pragma once

// DDPG: deterministic actor, Q critic on [state, action], target networks,
// uniform replay and an annealed exploration schedule.

#include <gridpilot/control_env.hpp>
#include <gridpilot/error.hpp>
#include <gridpilot/nn.hpp>
#include <gridpilot/scenario.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace gridpilot::ddpg {

using env::MdpAction;
using env::MdpState;
using nn::Matrix;

/// Observation preprocessing applied inside the agent: (v - center) / scale.
struct StateScaling {
    double center = 1.0;
    double scale = 0.05;
};

struct AgentNets {
    nn::MlpModel actor;
    nn::MlpModel critic;
    nn::MlpModel actor_target;
    nn::MlpModel critic_target;
    StateScaling scaling;

    Eigen::Index state_dim() const { return actor.input_dim(); }
    Eigen::Index action_dim() const { return actor.output_dim(); }
};

struct Transition {
    MdpState s;
    MdpAction a;
    double r = 0.0;
    MdpState s_next;
    bool terminal = false;
};

enum class NoiseKind { Gaussian, OrnsteinUhlenbeck };
enum class UpdatesStart { Batch, Filled };

struct TrainConfig {
    int episodes = 100;
    int horizon = 20;
    double gamma = 0.95;
    double tau = 0.001;
    int batch_size = 64;
    double actor_lr = 1e-3;
    double critic_lr = 1e-3;
    double noise_sigma_start = 0.5;
    double noise_sigma_end = 0.005;
    double noise_mu = 0.1; // OU mean-reversion rate
    NoiseKind noise = NoiseKind::Gaussian;
    UpdatesStart updates_start = UpdatesStart::Batch;
    std::size_t buffer_capacity = 10000;
    int actor_hidden1 = 400;
    int actor_hidden2 = 300;
    int critic_hidden1 = 400;
    int critic_hidden2 = 300;
    double final_layer_init = 3e-3;
    int max_nonfinite_updates = 5;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw SchemaError("gamma must be in [0, 1]");
        if (!(tau > 0.0 && tau <= 1.0)) throw SchemaError("tau must be in (0, 1]");
        if (batch_size < 1 || static_cast<std::size_t>(batch_size) > buffer_capacity)
            throw SchemaError("batch_size must be in [1, buffer_capacity]");
        if (episodes < 0 || horizon < 1) throw SchemaError("episodes must be >= 0 and horizon >= 1");
        if (!(actor_lr > 0.0 && critic_lr > 0.0)) throw SchemaError("learning rates must be positive");
        if (noise_sigma_start < 0.0 || noise_sigma_end < 0.0) throw SchemaError("noise sigmas must be nonnegative");
    }
};

template <std::uniform_random_bit_generator Rng>
AgentNets make_agent(Eigen::Index state_dim, Eigen::Index action_dim, const TrainConfig& cfg, Rng& rng) {
    if (state_dim <= 0 || action_dim <= 0) throw ShapeError("agent dimensions must be positive");
    nn::MlpSpec a;
    a.input_dim = state_dim;
    a.layers = {{cfg.actor_hidden1, nn::Activation::Relu}, {cfg.actor_hidden2, nn::Activation::Tanh},
                {action_dim, nn::Activation::Tanh}};
    a.final_init_scale = cfg.final_layer_init;
    nn::MlpSpec c;
    c.input_dim = state_dim + action_dim;
    c.layers = {{cfg.critic_hidden1, nn::Activation::Relu}, {cfg.critic_hidden2, nn::Activation::Relu},
                {1, nn::Activation::Identity}};
    c.final_init_scale = cfg.final_layer_init;
    AgentNets n;
    n.actor = nn::make_mlp(a, rng);
    n.critic = nn::make_mlp(c, rng);
    n.actor.mode = n.critic.mode = nn::Mode::Train; // no dropout or batch norm, so modes coincide
    n.actor_target = n.actor;
    n.critic_target = n.critic;
    return n;
}

inline Matrix scaled_states(const AgentNets& nets, const Matrix& raw) {
    return (raw.array() - nets.scaling.center) / nets.scaling.scale;
}

inline Matrix state_row(const AgentNets& nets, const MdpState& s) {
    if (s.v_mag.size() != nets.state_dim())
        throw ShapeError("state has " + std::to_string(s.v_mag.size()) + " entries, agent expects " +
                         std::to_string(nets.state_dim()));
    return s.v_mag.transpose();
}

inline Matrix action_row(const AgentNets& nets, const MdpAction& a) {
    if (static_cast<Eigen::Index>(a.coefficients.size()) != nets.action_dim()) throw ShapeError("action dimension mismatch");
    return Eigen::Map<const Eigen::RowVectorXd>(a.coefficients.data(), static_cast<Eigen::Index>(a.coefficients.size()));
}

inline Matrix policy(const nn::MlpModel& actor, const AgentNets& nets, const Matrix& raw_states) {
    return nn::predict(actor, scaled_states(nets, raw_states));
}

inline Matrix q_values(const nn::MlpModel& critic, const AgentNets& nets, const Matrix& raw_states,
                       const Matrix& actions) {
    Matrix in(raw_states.rows(), raw_states.cols() + actions.cols());
    in << scaled_states(nets, raw_states), actions;
    return nn::predict(critic, in);
}

/// Deterministic action plus an explicit noise vector, clamped to [-1, 1].
inline MdpAction act_with_noise(const AgentNets& nets, const MdpState& s, const Eigen::RowVectorXd& noise) {
    Matrix a = policy(nets.actor, nets, state_row(nets, s));
    if (noise.size() != a.cols()) throw ShapeError("noise dimension mismatch");
    MdpAction out;
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.coefficients.push_back(std::clamp(a(0, j) + noise(j), -1.0, 1.0));
    return out;
}

template <std::uniform_random_bit_generator Rng>
MdpAction act(const AgentNets& nets, const MdpState& s, double sigma, Rng& rng) {
    Eigen::RowVectorXd noise = Eigen::RowVectorXd::Zero(nets.action_dim());
    if (sigma > 0.0) {
        std::normal_distribution<double> n(0.0, sigma);
        for (Eigen::Index j = 0; j < noise.size(); ++j) noise(j) = n(rng);
    }
    return act_with_noise(nets, s, noise);
}

inline MdpAction act(const AgentNets& nets, const MdpState& s) {
    return act_with_noise(nets, s, Eigen::RowVectorXd::Zero(nets.action_dim()));
}

inline double critic_value(const AgentNets& nets, const MdpState& s, const MdpAction& a) {
    return q_values(nets.critic, nets, state_row(nets, s), action_row(nets, a))(0, 0);
}

/// Mean-reverting exploration noise: x += mu * (0 - x) + sigma * N(0, 1).
struct OuNoise {
    double rate = 0.1;
    Eigen::RowVectorXd x;

    template <std::uniform_random_bit_generator Rng>
    Eigen::RowVectorXd sample(double sigma, Rng& rng) {
        std::normal_distribution<double> n(0.0, 1.0);
        for (Eigen::Index j = 0; j < x.size(); ++j) x(j) += -rate * x(j) + sigma * n(rng);
        return x;
    }
};

// ---------------------------------------------------------------------------
// Replay

class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 10000) : capacity_(capacity) {
        if (capacity == 0) throw UsageError("replay capacity must be positive");
        slots_.reserve(std::min<std::size_t>(capacity, 1 << 16));
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return slots_.size(); }
    bool empty() const { return slots_.empty(); }
    bool full() const { return slots_.size() == capacity_; }

    void push(Transition t) {
        if (slots_.size() < capacity_) {
            slots_.push_back(std::move(t));
        } else {
            slots_[next_] = std::move(t);
        }
        next_ = (next_ + 1) % capacity_;
    }

    /// i-th oldest stored transition.
    const Transition& oldest(std::size_t i) const {
        if (i >= slots_.size()) throw UsageError("replay index out of range");
        const std::size_t start = full() ? next_ : 0;
        return slots_[(start + i) % capacity_];
    }
    const Transition& slot(std::size_t i) const { return slots_.at(i); }

    template <std::uniform_random_bit_generator Rng>
    std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const {
        if (slots_.empty()) throw UsageError("cannot sample from an empty replay buffer");
        std::uniform_int_distribution<std::size_t> u(0, slots_.size() - 1);
        std::vector<std::size_t> out(n);
        for (auto& i : out) i = u(rng);
        return out;
    }

    std::size_t write_position() const { return next_; }
    void restore(std::vector<Transition> slots, std::size_t next) {
        if (slots.size() > capacity_ || next >= capacity_) throw SchemaError("inconsistent replay snapshot");
        slots_ = std::move(slots);
        next_ = next;
    }

private:
    std::size_t capacity_;
    std::size_t next_ = 0;
    std::vector<Transition> slots_;
};

struct Batch {
    Matrix s, a, s_next;
    Eigen::VectorXd r;
    Eigen::VectorXd terminal; // 1 for terminal transitions
};

inline Batch make_batch(const std::vector<const Transition*>& ts) {
    if (ts.empty()) throw UsageError("empty batch");
    const auto n = static_cast<Eigen::Index>(ts.size());
    const auto sd = ts.front()->s.v_mag.size();
    const auto ad = static_cast<Eigen::Index>(ts.front()->a.coefficients.size());
    Batch b{Matrix(n, sd), Matrix(n, ad), Matrix(n, sd), Eigen::VectorXd(n), Eigen::VectorXd(n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const Transition& t = *ts[static_cast<std::size_t>(i)];
        if (t.s.v_mag.size() != sd || t.s_next.v_mag.size() != sd || static_cast<Eigen::Index>(t.a.coefficients.size()) != ad)
            throw ShapeError("transition dimensions differ within a batch");
        b.s.row(i) = t.s.v_mag.transpose();
        b.s_next.row(i) = t.s_next.v_mag.transpose();
        for (Eigen::Index j = 0; j < ad; ++j) b.a(i, j) = t.a.coefficients[static_cast<std::size_t>(j)];
        b.r(i) = t.r;
        b.terminal(i) = t.terminal ? 1.0 : 0.0;
    }
    return b;
}

inline Batch make_batch(const std::vector<Transition>& ts) {
    std::vector<const Transition*> p;
    for (const auto& t : ts) p.push_back(&t);
    return make_batch(p);
}

// ---------------------------------------------------------------------------
// Updates

struct TdResult {
    double loss = 0.0;
    Eigen::VectorXd targets;
    nn::Gradients critic_gradients;
};

/// y = r + gamma * Q'(s', pi'(s')) (y = r for terminal transitions) and the
/// mean squared TD error with its critic gradient.
inline TdResult td_loss(const AgentNets& nets, const Batch& b, double gamma) {
    TdResult res;
    const Eigen::VectorXd q_next = q_values(nets.critic_target, nets, b.s_next, policy(nets.actor_target, nets, b.s_next)).col(0);
    res.targets = b.r + gamma * (1.0 - b.terminal.array()).matrix().cwiseProduct(q_next);
    Matrix in(b.s.rows(), b.s.cols() + b.a.cols());
    in << scaled_states(nets, b.s), b.a;
    nn::ForwardCache cache;
    const Matrix q = nn::forward(nets.critic, in, 0, &cache);
    const auto l = nn::mse_loss(q, res.targets);
    res.loss = l.value;
    res.critic_gradients = nn::backward(nets.critic, cache, l.gradient);
    return res;
}

struct PolicyGradient {
    double objective = 0.0; // -mean Q(s, pi(s)), the quantity descended
    nn::Gradients actor_gradients;
};

inline PolicyGradient policy_gradient(const AgentNets& nets, const Matrix& raw_states) {
    const auto n = raw_states.rows();
    if (n == 0) throw UsageError("empty batch");
    const Matrix s = scaled_states(nets, raw_states);
    nn::ForwardCache actor_cache;
    const Matrix a = nn::forward(nets.actor, s, 0, &actor_cache);
    Matrix in(n, s.cols() + a.cols());
    in << s, a;
    nn::ForwardCache critic_cache;
    const Matrix q = nn::forward(nets.critic, in, 0, &critic_cache);
    PolicyGradient pg;
    pg.objective = -q.mean();
    const Matrix dq = Matrix::Constant(n, 1, -1.0 / static_cast<double>(n));
    const auto cg = nn::backward(nets.critic, critic_cache, dq);
    pg.actor_gradients = nn::backward(nets.actor, actor_cache, cg.input.rightCols(a.cols()));
    return pg;
}

inline double policy_update(AgentNets& nets, const Batch& b, nn::AdamState& actor_opt) {
    auto pg = policy_gradient(nets, b.s);
    nn::adam_step(actor_opt, nets.actor, pg.actor_gradients);
    return pg.objective;
}

inline double critic_update(AgentNets& nets, const Batch& b, double gamma, nn::AdamState& critic_opt) {
    auto td = td_loss(nets, b, gamma);
    if (!std::isfinite(td.loss)) throw NumericalError("non-finite TD loss");
    nn::adam_step(critic_opt, nets.critic, td.critic_gradients);
    return td.loss;
}

inline void soft_update_targets(AgentNets& nets, double tau) {
    nn::soft_update(nets.actor, nets.actor_target, tau);
    nn::soft_update(nets.critic, nets.critic_target, tau);
}

// ---------------------------------------------------------------------------
// Training

inline double sigma_for_episode(const TrainConfig& cfg, int episode) {
    if (cfg.episodes <= 1) return cfg.noise_sigma_start;
    const double frac = static_cast<double>(episode) / static_cast<double>(cfg.episodes - 1);
    return cfg.noise_sigma_start + (cfg.noise_sigma_end - cfg.noise_sigma_start) * frac;
}

struct EpisodeRecord {
    int episode = 0;
    int scenario_id = 0;
    double cumulative_reward = 0.0;
    double sigma = 0.0;
};

/// Everything needed to resume training bit-exactly.
struct TrainerState {
    AgentNets nets;
    nn::AdamState actor_opt{1e-3};
    nn::AdamState critic_opt{1e-3};
    ReplayBuffer buffer{10000};
    std::mt19937_64 rng;       // episode sampling, exploration, minibatches
    std::mt19937_64 noise_rng; // measurement noise inside the environment
    int next_episode = 0;
    std::uint64_t updates = 0;
    std::vector<EpisodeRecord> history;
};

struct TrainHooks {
    // Called after every environment step (episode, step, scenario id, action, result).
    std::function<void(int, int, int, const MdpAction&, const env::StepResult&)> on_step;
    // Updates with index < freeze_critic_updates skip the critic step.
    std::uint64_t freeze_critic_updates = 0;
    // Sigma override (fixed exploration level), used by fine-tuning.
    std::optional<double> fixed_sigma;
};

inline TrainerState make_trainer(const env::Environment& environment, const TrainConfig& cfg) {
    cfg.validate();
    TrainerState st;
    st.rng.seed(cfg.seed);
    st.noise_rng.seed(cfg.seed ^ 0x5851f42d4c957f2dULL);
    st.nets = make_agent(static_cast<Eigen::Index>(environment.node_count()),
                         static_cast<Eigen::Index>(environment.zone_count()), cfg, st.rng);
    st.nets.scaling.center = environment.reward_config.v_nominal;
    st.nets.scaling.scale = (environment.reward_config.v_max - environment.reward_config.v_min) / 2.0;
    st.actor_opt = nn::AdamState(cfg.actor_lr);
    st.critic_opt = nn::AdamState(cfg.critic_lr);
    st.buffer = ReplayBuffer(cfg.buffer_capacity);
    return st;
}

inline void save_trainer(const TrainerState& st, const TrainConfig& cfg, const std::string& path);

/// Runs episodes [st.next_episode, cfg.episodes). Each episode holds one
/// uniformly drawn scenario fixed for the horizon; once the buffer holds a
/// batch (or is full, per cfg.updates_start) every step performs one critic
/// update, one actor update and the soft target updates.
inline void train_episodes(TrainerState& st, const env::Environment& environment, const ScenarioSet& scenarios,
                           const TrainConfig& cfg, const TrainHooks& hooks = {},
                           const std::string& abort_checkpoint = {}) {
    cfg.validate();
    if (scenarios.scenarios.empty()) throw DatasetError("training needs at least one scenario");
    if (st.nets.state_dim() != static_cast<Eigen::Index>(environment.node_count()) ||
        st.nets.action_dim() != static_cast<Eigen::Index>(environment.zone_count()))
        throw ShapeError("agent dimensions do not match the environment");
    std::uniform_int_distribution<std::size_t> pick(0, scenarios.scenarios.size() - 1);
    const std::size_t ready = cfg.updates_start == UpdatesStart::Batch ? static_cast<std::size_t>(cfg.batch_size)
                                                                      : st.buffer.capacity();
    TrainerState last_good;
    bool have_good = false;
    int nonfinite = 0;
    for (; st.next_episode < cfg.episodes; ++st.next_episode) {
        const int ep = st.next_episode;
        const double sigma = hooks.fixed_sigma ? *hooks.fixed_sigma : sigma_for_episode(cfg, ep);
        const Scenario& sc = scenarios.scenarios[pick(st.rng)];
        auto obs = env::env_reset(environment, sc, st.noise_rng).next_state;
        OuNoise ou{cfg.noise_mu, Eigen::RowVectorXd::Zero(st.nets.action_dim())};
        double total = 0.0;
        for (int t = 0; t < cfg.horizon; ++t) {
            MdpAction a;
            if (cfg.noise == NoiseKind::Gaussian) {
                a = act(st.nets, obs, sigma, st.rng);
            } else {
                a = act_with_noise(st.nets, obs, ou.sample(sigma, st.rng));
            }
            auto res = env::env_step(environment, sc, a, st.noise_rng);
            total += res.reward;
            if (hooks.on_step) hooks.on_step(ep, t, sc.id, a, res);
            st.buffer.push({obs, a, res.reward, res.next_state, res.terminal});
            obs = res.next_state;

            if (st.buffer.size() >= ready) {
                const auto idx = st.buffer.sample_indices(static_cast<std::size_t>(cfg.batch_size), st.rng);
                std::vector<const Transition*> ts;
                for (auto i : idx) ts.push_back(&st.buffer.slot(i));
                const Batch b = make_batch(ts);
                try {
                    if (st.updates >= hooks.freeze_critic_updates) critic_update(st.nets, b, cfg.gamma, st.critic_opt);
                    policy_update(st.nets, b, st.actor_opt);
                    soft_update_targets(st.nets, cfg.tau);
                    nonfinite = 0;
                } catch (const NumericalError& e) {
                    ++nonfinite;
                    spdlog::warn("episode {} step {}: skipped non-finite update ({})", ep, t, e.what());
                    if (have_good) {
                        st.nets = last_good.nets;
                        st.actor_opt = last_good.actor_opt;
                        st.critic_opt = last_good.critic_opt;
                    }
                    if (nonfinite >= cfg.max_nonfinite_updates) {
                        if (!abort_checkpoint.empty() && have_good) save_trainer(last_good, cfg, abort_checkpoint);
                        throw TrainingError("persistent non-finite updates at episode " + std::to_string(ep));
                    }
                }
                ++st.updates;
            }
            if (res.terminal) break;
        }
        st.history.push_back({ep, sc.id, total, sigma});
        spdlog::debug("episode {} scenario {} reward {:.6g} sigma {:.4g}", ep, sc.id, total, sigma);
        last_good = st;
        last_good.next_episode = ep + 1;
        have_good = true;
    }
}

struct TrainOutput {
    AgentNets nets;
    std::vector<EpisodeRecord> history;
};

inline TrainOutput train(const env::Environment& environment, const ScenarioSet& scenarios, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
    auto st = make_trainer(environment, cfg);
    train_episodes(st, environment, scenarios, cfg, hooks);
    return {std::move(st.nets), std::move(st.history)};
}

inline void write_reward_csv(const std::vector<EpisodeRecord>& h, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path);
    out << "episode,cumulative_reward,sigma\n";
    for (const auto& e : h) out << e.episode << ',' << format_double(e.cumulative_reward) << ',' << format_double(e.sigma) << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoints. Agent: "GPAG" + scaling + four networks. Trainer bundle:
// "GPTR" + config JSON + agent + optimizers + replay + RNG states + history.

namespace io = nn::detail;

inline void write_agent(std::ostream& os, const AgentNets& n) {
    os.write("GPAG", 4);
    io::put<std::uint32_t>(os, 1);
    io::put<double>(os, n.scaling.center);
    io::put<double>(os, n.scaling.scale);
    for (const nn::MlpModel* m : {&n.actor, &n.critic, &n.actor_target, &n.critic_target}) nn::write_mlp(os, *m);
}

inline AgentNets read_agent(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "GPAG") throw SchemaError("not an agent checkpoint");
    if (io::get<std::uint32_t>(is) != 1) throw SchemaError("unsupported agent checkpoint version");
    AgentNets n;
    n.scaling.center = io::get<double>(is);
    n.scaling.scale = io::get<double>(is);
    for (nn::MlpModel* m : {&n.actor, &n.critic, &n.actor_target, &n.critic_target}) {
        *m = nn::read_mlp(is);
        m->mode = nn::Mode::Train;
    }
    if (!nn::same_architecture(n.actor, n.actor_target) || !nn::same_architecture(n.critic, n.critic_target) ||
        n.critic.input_dim() != n.actor.input_dim() + n.actor.output_dim() || n.critic.output_dim() != 1)
        throw SchemaError("agent checkpoint networks are inconsistent");
    return n;
}

inline void save_agent(const AgentNets& n, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("cannot write " + path);
    write_agent(os, n);
}

inline AgentNets load_agent(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw SchemaError("cannot open agent checkpoint " + path);
    return read_agent(is);
}

namespace detail {

inline void put_string(std::ostream& os, const std::string& s) {
    io::put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
    const auto n = io::get<std::uint64_t>(is);
    if (n > (1ULL << 32)) throw SchemaError("implausible string length in checkpoint");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw SchemaError("truncated checkpoint");
    return s;
}

inline void put_adam(std::ostream& os, const nn::AdamState& a) {
    for (double v : {a.learning_rate, a.beta1, a.beta2, a.epsilon}) io::put<double>(os, v);
    io::put<std::uint64_t>(os, a.step);
    for (const auto* vec : {&a.first_moment, &a.second_moment}) {
        io::put<std::uint64_t>(os, vec->size());
        io::put_array(os, vec->data(), static_cast<Eigen::Index>(vec->size()));
    }
}

inline nn::AdamState get_adam(std::istream& is) {
    nn::AdamState a(io::get<double>(is));
    a.beta1 = io::get<double>(is);
    a.beta2 = io::get<double>(is);
    a.epsilon = io::get<double>(is);
    a.step = io::get<std::uint64_t>(is);
    for (auto* vec : {&a.first_moment, &a.second_moment}) {
        const auto n = io::get<std::uint64_t>(is);
        if (n > (1ULL << 28)) throw SchemaError("implausible optimizer size in checkpoint");
        vec->resize(n);
        io::get_array(is, vec->data(), static_cast<Eigen::Index>(n));
    }
    return a;
}

inline void put_vector(std::ostream& os, const Eigen::VectorXd& v) {
    io::put<std::uint64_t>(os, static_cast<std::uint64_t>(v.size()));
    io::put_array(os, v.data(), v.size());
}

inline Eigen::VectorXd get_vector(std::istream& is) {
    const auto n = io::get<std::uint64_t>(is);
    if (n > (1ULL << 24)) throw SchemaError("implausible vector size in checkpoint");
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    io::get_array(is, v.data(), v.size());
    return v;
}

inline void put_rng(std::ostream& os, const std::mt19937_64& r) {
    std::ostringstream ss;
    ss << r;
    put_string(os, ss.str());
}

inline void get_rng(std::istream& is, std::mt19937_64& r) {
    std::istringstream ss(get_string(is));
    ss >> r;
    if (!ss) throw SchemaError("corrupt RNG state in checkpoint");
}

} // namespace detail

inline void to_json(nlohmann::json& j, const TrainConfig& c);
inline void from_json(const nlohmann::json& j, TrainConfig& c);

inline void write_trainer(std::ostream& os, const TrainerState& st, const TrainConfig& cfg) {
    nlohmann::json cj = cfg;
    os.write("GPTR", 4);
    io::put<std::uint32_t>(os, 1);
    detail::put_string(os, cj.dump());
    write_agent(os, st.nets);
    detail::put_adam(os, st.actor_opt);
    detail::put_adam(os, st.critic_opt);
    io::put<std::uint64_t>(os, st.buffer.capacity());
    io::put<std::uint64_t>(os, st.buffer.write_position());
    io::put<std::uint64_t>(os, st.buffer.size());
    for (std::size_t i = 0; i < st.buffer.size(); ++i) {
        const auto& t = st.buffer.slot(i);
        detail::put_vector(os, t.s.v_mag);
        detail::put_vector(os, Eigen::Map<const Eigen::VectorXd>(t.a.coefficients.data(),
                                                                 static_cast<Eigen::Index>(t.a.coefficients.size())));
        io::put<double>(os, t.r);
        detail::put_vector(os, t.s_next.v_mag);
        io::put<std::uint8_t>(os, t.terminal ? 1 : 0);
    }
    detail::put_rng(os, st.rng);
    detail::put_rng(os, st.noise_rng);
    io::put<std::int64_t>(os, st.next_episode);
    io::put<std::uint64_t>(os, st.updates);
    io::put<std::uint64_t>(os, st.history.size());
    for (const auto& h : st.history) {
        io::put<std::int64_t>(os, h.episode);
        io::put<std::int64_t>(os, h.scenario_id);
        io::put<double>(os, h.cumulative_reward);
        io::put<double>(os, h.sigma);
    }
}

inline std::pair<TrainerState, TrainConfig> read_trainer(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "GPTR") throw SchemaError("not a training checkpoint");
    if (io::get<std::uint32_t>(is) != 1) throw SchemaError("unsupported training checkpoint version");
    TrainConfig cfg;
    try {
        cfg = nlohmann::json::parse(detail::get_string(is)).get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("corrupt config in training checkpoint: ") + e.what());
    }
    TrainerState st;
    st.nets = read_agent(is);
    st.actor_opt = detail::get_adam(is);
    st.critic_opt = detail::get_adam(is);
    const auto cap = io::get<std::uint64_t>(is);
    const auto pos = io::get<std::uint64_t>(is);
    const auto n = io::get<std::uint64_t>(is);
    if (cap == 0 || n > cap || cap > (1ULL << 24)) throw SchemaError("inconsistent replay snapshot");
    std::vector<Transition> slots(n);
    for (auto& t : slots) {
        t.s.v_mag = detail::get_vector(is);
        const Eigen::VectorXd a = detail::get_vector(is);
        t.a.coefficients.assign(a.data(), a.data() + a.size());
        t.r = io::get<double>(is);
        t.s_next.v_mag = detail::get_vector(is);
        t.terminal = io::get<std::uint8_t>(is) != 0;
    }
    st.buffer = ReplayBuffer(cap);
    st.buffer.restore(std::move(slots), pos);
    detail::get_rng(is, st.rng);
    detail::get_rng(is, st.noise_rng);
    st.next_episode = static_cast<int>(io::get<std::int64_t>(is));
    st.updates = io::get<std::uint64_t>(is);
    const auto hn = io::get<std::uint64_t>(is);
    if (hn > (1ULL << 28)) throw SchemaError("implausible history length");
    for (std::uint64_t i = 0; i < hn; ++i) {
        EpisodeRecord r;
        r.episode = static_cast<int>(io::get<std::int64_t>(is));
        r.scenario_id = static_cast<int>(io::get<std::int64_t>(is));
        r.cumulative_reward = io::get<double>(is);
        r.sigma = io::get<double>(is);
        st.history.push_back(r);
    }
    return {std::move(st), cfg};
}

inline void save_trainer(const TrainerState& st, const TrainConfig& cfg, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("cannot write " + path);
    write_trainer(os, st, cfg);
}

inline std::pair<TrainerState, TrainConfig> load_trainer(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw SchemaError("cannot open training checkpoint " + path);
    return read_trainer(is);
}

// ---------------------------------------------------------------------------
// Config serialization

NLOHMANN_JSON_SERIALIZE_ENUM(NoiseKind, {{NoiseKind::Gaussian, "gaussian"}, {NoiseKind::OrnsteinUhlenbeck, "ou"}})
NLOHMANN_JSON_SERIALIZE_ENUM(UpdatesStart, {{UpdatesStart::Batch, "batch"}, {UpdatesStart::Filled, "filled"}})

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"episodes", c.episodes},
         {"horizon", c.horizon},
         {"gamma", c.gamma},
         {"tau", c.tau},
         {"batch_size", c.batch_size},
         {"actor_lr", c.actor_lr},
         {"critic_lr", c.critic_lr},
         {"noise_sigma_start", c.noise_sigma_start},
         {"noise_sigma_end", c.noise_sigma_end},
         {"noise_mu", c.noise_mu},
         {"noise", c.noise},
         {"updates_start", c.updates_start},
         {"buffer_capacity", c.buffer_capacity},
         {"actor_hidden1", c.actor_hidden1},
         {"actor_hidden2", c.actor_hidden2},
         {"critic_hidden1", c.critic_hidden1},
         {"critic_hidden2", c.critic_hidden2},
         {"final_layer_init", c.final_layer_init},
         {"max_nonfinite_updates", c.max_nonfinite_updates},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    static const TrainConfig d;
    nlohmann::json base = d;
    for (const auto& [k, v] : j.items()) {
        if (!base.contains(k)) throw SchemaError("unknown train config key '" + k + "'");
        base[k] = v;
    }
    c.episodes = base["episodes"].get<int>();
    c.horizon = base["horizon"].get<int>();
    c.gamma = base["gamma"].get<double>();
    c.tau = base["tau"].get<double>();
    c.batch_size = base["batch_size"].get<int>();
    c.actor_lr = base["actor_lr"].get<double>();
    c.critic_lr = base["critic_lr"].get<double>();
    c.noise_sigma_start = base["noise_sigma_start"].get<double>();
    c.noise_sigma_end = base["noise_sigma_end"].get<double>();
    c.noise_mu = base["noise_mu"].get<double>();
    c.noise = base["noise"].get<NoiseKind>();
    c.updates_start = base["updates_start"].get<UpdatesStart>();
    c.buffer_capacity = base["buffer_capacity"].get<std::size_t>();
    c.actor_hidden1 = base["actor_hidden1"].get<int>();
    c.actor_hidden2 = base["actor_hidden2"].get<int>();
    c.critic_hidden1 = base["critic_hidden1"].get<int>();
    c.critic_hidden2 = base["critic_hidden2"].get<int>();
    c.final_layer_init = base["final_layer_init"].get<double>();
    c.max_nonfinite_updates = base["max_nonfinite_updates"].get<int>();
    c.seed = base["seed"].get<std::uint64_t>();
}

} // namespace gridpilot::ddpg
