// gridpilot command-line driver: scenario generation, DSSE training and
// evaluation, agent training, evaluation sweeps, online runs and the oracle.

#include <gridpilot/config.hpp>
#include <gridpilot/control_env.hpp>
#include <gridpilot/ddpg.hpp>
#include <gridpilot/dsse.hpp>
#include <gridpilot/runtime.hpp>
#include <gridpilot/scenario.hpp>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace gridpilot;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
};

struct Paths {
    std::string scenarios;
    std::string dsse;
    std::string agent;
    std::string resume;
};

struct Context {
    RunConfig cfg;
    Feeder feeder;
    fs::path out;
};

Context load_context(const Common& c) {
    Context ctx;
    if (!c.config_path.empty()) ctx.cfg = load_config(c.config_path);
    if (c.seed) {
        ctx.cfg.seed = *c.seed;
        ctx.cfg.dsse.hyper.seed = dsse::mix_seed(*c.seed, 4);
        ctx.cfg.train.seed = dsse::mix_seed(*c.seed, 5);
        ctx.cfg.train.validate();
    }
    ctx.feeder = load_feeder(ctx.cfg.feeder);
    ctx.out = c.out;
    fs::create_directories(ctx.out);
    return ctx;
}

std::string or_default(const std::string& given, const fs::path& fallback) {
    return given.empty() ? fallback.string() : given;
}

std::string meta_for(const std::string& csv) {
    auto p = fs::path(csv);
    return (p.parent_path() / (p.stem().string() + ".meta.json")).string();
}

ScenarioSet read_set(const std::string& csv) {
    const auto meta = meta_for(csv);
    return read_scenarios(csv, fs::exists(meta) ? meta : std::string{});
}

void write_set(const ScenarioSet& s, const fs::path& csv) { write_scenarios(s, csv.string(), meta_for(csv.string())); }

void write_json(const fs::path& p, const nlohmann::json& j) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw UsageError("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

std::shared_ptr<const dsse::DsseModel> maybe_dsse(const Context& ctx, const std::string& path) {
    if (ctx.cfg.env.perfect_state) return nullptr;
    return std::make_shared<const dsse::DsseModel>(dsse::load_dsse(path));
}

std::vector<dsse::TrainingPair> pairs_for(const Context& ctx, const ScenarioSet& set, std::uint64_t tag) {
    const auto y = build_admittance(ctx.feeder);
    return dsse::build_training_pairs(set, ctx.feeder, y, ctx.cfg.dsse.noise_pct, dsse::mix_seed(ctx.cfg.seed, tag))
        .pairs;
}

// ---------------------------------------------------------------------------

int cmd_gen_scenarios(const Context& ctx) {
    const auto& sc = ctx.cfg.scenarios;
    std::optional<HouseholdPool> pool;
    if (!sc.household_csv.empty()) pool = ingest_household_csv(sc.household_csv, sc.generator);
    const auto set = generate_scenarios(ctx.feeder, sc.generator, ctx.cfg.seed, pool ? &*pool : nullptr);
    const auto [train, test] = split(set, sc.train_fraction, dsse::mix_seed(ctx.cfg.seed, 1));
    write_set(set, ctx.out / "scenarios.csv");
    write_set(train, ctx.out / "train_scenarios.csv");
    write_set(test, ctx.out / "test_scenarios.csv");
    write_json(ctx.out / "gen_scenarios_summary.json",
               {{"count", set.size()}, {"train", train.size()}, {"test", test.size()}, {"seed", ctx.cfg.seed}});
    spdlog::info("wrote {} scenarios ({} train / {} test) to {}", set.size(), train.size(), test.size(), ctx.out.string());
    return 0;
}

int cmd_train_dsse(const Context& ctx, const Paths& p) {
    const auto set = read_set(or_default(p.scenarios, ctx.out / "train_scenarios.csv"));
    const auto pairs = pairs_for(ctx, set, 2);
    auto res = dsse::train_dsse(pairs, ctx.feeder, ctx.cfg.dsse.hyper);
    dsse::save_dsse(res.model, (ctx.out / "dsse.bin").string());
    std::ofstream loss(ctx.out / "dsse_loss.csv", std::ios::binary);
    loss << "epoch,train_loss\n";
    for (std::size_t i = 0; i < res.loss_history.size(); ++i) loss << i << ',' << format_double(res.loss_history[i]) << '\n';
    write_json(ctx.out / "train_dsse_summary.json", {{"pairs", pairs.size()},
                                                     {"initial_loss", res.initial_loss},
                                                     {"final_loss", res.final_loss},
                                                     {"hyperparams", ctx.cfg.dsse.hyper}});
    spdlog::info("DSSE trained on {} pairs: loss {:.6g} -> {:.6g}", pairs.size(), res.initial_loss, res.final_loss);
    return 0;
}

int cmd_eval_dsse(const Context& ctx, const Paths& p) {
    const auto model = dsse::load_dsse(or_default(p.dsse, ctx.out / "dsse.bin"));
    if (model.feeder_fingerprint != feeder_fingerprint(ctx.feeder))
        throw MismatchError("DSSE model was trained for a different feeder");
    const auto set = read_set(or_default(p.scenarios, ctx.out / "test_scenarios.csv"));
    const auto pairs = pairs_for(ctx, set, 3);
    const auto m = dsse::evaluate_dsse(model, pairs);
    dsse::write_metrics_csv(m, (ctx.out / "dsse_metrics.csv").string());
    for (std::size_t ph = 0; ph < 3; ++ph)
        if (m.samples_per_phase[ph])
            spdlog::info("phase {}: magnitude MAPE {:.4f}%, angle MAE {:.4f} deg", phase_letter(static_cast<Phase>(ph)),
                         m.mag_mape_per_phase[ph], m.angle_mae_per_phase[ph]);
    return 0;
}

int cmd_train_agent(const Context& ctx, const Paths& p) {
    const auto set = read_set(or_default(p.scenarios, ctx.out / "train_scenarios.csv"));
    const auto environment = make_environment(ctx.cfg, ctx.feeder, maybe_dsse(ctx, or_default(p.dsse, ctx.out / "dsse.bin")));
    ddpg::TrainerState st;
    ddpg::TrainConfig cfg = ctx.cfg.train;
    if (!p.resume.empty()) {
        auto [state, saved] = ddpg::load_trainer(p.resume);
        st = std::move(state);
        saved.episodes = cfg.episodes; // allow extending a finished run
        cfg = saved;
        spdlog::info("resuming at episode {}", st.next_episode);
    } else {
        st = ddpg::make_trainer(environment, cfg);
    }
    std::ofstream steps(ctx.out / "train_steps.csv", std::ios::binary);
    env::write_step_log_header(steps, environment.zone_count());
    ddpg::TrainHooks hooks;
    hooks.on_step = [&](int ep, int t, int sid, const env::MdpAction& a, const env::StepResult& r) {
        env::write_step_log_row(steps, ep, t, sid, a, r, environment.reward_config);
    };
    ddpg::train_episodes(st, environment, set, cfg, hooks, (ctx.out / "trainer_last_good.bin").string());
    ddpg::save_agent(st.nets, (ctx.out / "agent.bin").string());
    ddpg::save_trainer(st, cfg, (ctx.out / "trainer.bin").string());
    ddpg::write_reward_csv(st.history, (ctx.out / "reward_trajectory.csv").string());
    double tail = 0.0;
    const std::size_t k = std::min<std::size_t>(10, st.history.size());
    for (std::size_t i = st.history.size() - k; i < st.history.size(); ++i) tail += st.history[i].cumulative_reward;
    write_json(ctx.out / "train_agent_summary.json",
               {{"episodes", st.history.size()}, {"updates", st.updates},
                {"mean_reward_last10", k ? tail / static_cast<double>(k) : 0.0}, {"train_config", cfg}});
    spdlog::info("trained {} episodes ({} updates)", st.history.size(), st.updates);
    return 0;
}

int cmd_evaluate(const Context& ctx, const Paths& p) {
    const auto agent = ddpg::load_agent(or_default(p.agent, ctx.out / "agent.bin"));
    const auto set = read_set(or_default(p.scenarios, ctx.out / "test_scenarios.csv"));
    const auto environment = make_environment(ctx.cfg, ctx.feeder, maybe_dsse(ctx, or_default(p.dsse, ctx.out / "dsse.bin")));
    const auto report = runtime::evaluate(agent, environment, set, {ctx.cfg.eval.control_steps}, dsse::mix_seed(ctx.cfg.seed, 6));
    runtime::write_eval_report(report, environment, ctx.out.string());
    write_json(ctx.out / "evaluate_timing.json", {{"pipeline_latency_mean_s", report.latency.mean},
                                                  {"pipeline_latency_p99_s", report.latency.p99},
                                                  {"pipeline_latency_max_s", report.latency.max}});
    spdlog::info("baseline: {} scenarios over the upper limit; controlled: {:.4f}% of node-phases in band",
                 report.baseline_scenarios_over_upper, 100.0 * report.controlled_in_band_fraction());
    return 0;
}

int cmd_run_online(const Context& ctx, const Paths& p) {
    const auto agent = ddpg::load_agent(or_default(p.agent, ctx.out / "agent.bin"));
    const auto stream = read_set(or_default(p.scenarios, ctx.out / "test_scenarios.csv"));
    const auto environment = make_environment(ctx.cfg, ctx.feeder, maybe_dsse(ctx, or_default(p.dsse, ctx.out / "dsse.bin")));
    runtime::OnlineOptions opt;
    opt.enable_fine_tune = ctx.cfg.online.enable_fine_tune;
    opt.recent_capacity = ctx.cfg.online.recent_capacity;
    opt.fine_tune_config = ctx.cfg.train;
    opt.seed = dsse::mix_seed(ctx.cfg.seed, 7);
    const auto log = runtime::run_online(agent, environment, stream, ctx.cfg.apr, opt);
    runtime::write_run_log(log, environment, (ctx.out / "run_log.csv").string());
    ddpg::save_agent(log.final_agent, (ctx.out / "agent_online.bin").string());
    std::vector<double> lat;
    std::size_t viol = 0;
    for (const auto& s : log.steps) {
        lat.push_back(s.pipeline_latency_seconds);
        viol += env::violation_count(s.result.info.true_v_mag, environment.reward_config);
    }
    const auto ls = runtime::latency_stats(lat);
    write_json(ctx.out / "run_online_summary.json",
               {{"steps", log.steps.size()}, {"apr_triggers", log.apr_triggers}, {"violations", viol}});
    write_json(ctx.out / "run_online_timing.json", {{"pipeline_latency_mean_s", ls.mean}, {"pipeline_latency_p99_s", ls.p99}});
    spdlog::info("online: {} steps, {} APR triggers, p99 latency {:.3f} ms", log.steps.size(), log.apr_triggers, 1e3 * ls.p99);
    return 0;
}

int cmd_oracle(const Context& ctx, const Paths& p) {
    const auto set = read_set(or_default(p.scenarios, ctx.out / "test_scenarios.csv"));
    const auto environment = make_environment(ctx.cfg, ctx.feeder, nullptr);
    const int points = runtime::oracle_points(ctx.cfg.eval.oracle_delta);
    std::ofstream out(ctx.out / "oracle.csv", std::ios::binary);
    out << "scenario_id,best_action,best_reward,baseline_reward\n";
    double gain = 0.0;
    for (const auto& s : set.scenarios) {
        const auto r = runtime::oracle_best_action(environment, s, points);
        out << s.id << ',' << format_double(r.best_action) << ',' << format_double(r.best_reward) << ','
            << format_double(r.baseline_reward) << '\n';
        gain += r.best_reward - r.baseline_reward;
    }
    spdlog::info("oracle: mean reward improvement over a = 0: {:.6g}", gain / static_cast<double>(set.size()));
    return 0;
}

void configure_logging() {
    auto logger = spdlog::stderr_color_mt("gridpilot");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const char* env = std::getenv("GRIDPILOT_LOG");
    spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
}

} // namespace

int main(int argc, char** argv) {
    configure_logging();
    CLI::App app{"Volt-VAr control with learned state estimation and DDPG"};
    app.require_subcommand(1);
    Common common;
    Paths paths;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--seed", common.seed, "master seed (overrides the config)");
        sub->add_option("--out", common.out, "output directory")->capture_default_str();
        return sub;
    };
    auto* gen = add_common(app.add_subcommand("gen-scenarios", "generate and split a scenario set"));
    auto* tds = add_common(app.add_subcommand("train-dsse", "train the state estimator"));
    auto* eds = add_common(app.add_subcommand("eval-dsse", "per-phase estimator metrics on a test set"));
    auto* tag = add_common(app.add_subcommand("train-agent", "train the DDPG agent"));
    auto* evl = add_common(app.add_subcommand("evaluate", "baseline vs controlled evaluation sweep"));
    auto* onl = add_common(app.add_subcommand("run-online", "online loop with the performance recorder"));
    auto* orc = add_common(app.add_subcommand("oracle", "grid-search best action per scenario"));
    for (auto* s : {tds, eds, tag, evl, onl, orc}) s->add_option("--scenarios", paths.scenarios, "scenario CSV");
    for (auto* s : {eds, tag, evl, onl}) s->add_option("--dsse", paths.dsse, "DSSE checkpoint");
    for (auto* s : {evl, onl}) s->add_option("--agent", paths.agent, "agent checkpoint");
    tag->add_option("--resume", paths.resume, "training checkpoint to resume from");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : UsageError("").exit_code();
    }

    try {
        const Context ctx = load_context(common);
        if (gen->parsed()) return cmd_gen_scenarios(ctx);
        if (tds->parsed()) return cmd_train_dsse(ctx, paths);
        if (eds->parsed()) return cmd_eval_dsse(ctx, paths);
        if (tag->parsed()) return cmd_train_agent(ctx, paths);
        if (evl->parsed()) return cmd_evaluate(ctx, paths);
        if (onl->parsed()) return cmd_run_online(ctx, paths);
        if (orc->parsed()) return cmd_oracle(ctx, paths);
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
