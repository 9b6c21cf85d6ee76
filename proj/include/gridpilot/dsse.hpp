#pragma once

// Learned state estimator: 12 feeder-head measurements in, magnitude (p.u.)
// and angle (degrees) of every node-phase out.

#include <gridpilot/error.hpp>
#include <gridpilot/feeder.hpp>
#include <gridpilot/injection.hpp>
#include <gridpilot/nn.hpp>
#include <gridpilot/powerflow.hpp>
#include <gridpilot/scenario.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace gridpilot::dsse {

struct TrainingPair {
    int scenario_id = 0;
    MeasurementVector input;
    Eigen::VectorXd target; // magnitudes (p.u.) then angles (degrees)
};

struct Dataset {
    std::vector<TrainingPair> pairs;
    std::size_t diverged = 0;
};

/// Per-feature standardization. Features with (near) zero spread keep unit
/// scale so constant columns pass through as zeros.
struct Normalizer {
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd stddev;

    static Normalizer fit(const Eigen::MatrixXd& data) {
        Normalizer n;
        n.mean = data.colwise().mean();
        n.stddev = ((data.rowwise() - n.mean).array().square().colwise().mean()).sqrt().matrix();
        for (Eigen::Index i = 0; i < n.stddev.size(); ++i)
            if (!(n.stddev(i) > 1e-12)) n.stddev(i) = 1.0;
        return n;
    }
    Eigen::MatrixXd normalize(const Eigen::MatrixXd& x) const {
        return ((x.rowwise() - mean).array().rowwise() / stddev.array()).matrix();
    }
    Eigen::MatrixXd denormalize(const Eigen::MatrixXd& z) const {
        return ((z.array().rowwise() * stddev.array()).rowwise() + mean.array()).matrix();
    }
};

struct DsseModel {
    nn::MlpModel net;
    Normalizer input_normalizer;
    Normalizer output_normalizer;
    std::uint64_t feeder_fingerprint = 0;
    std::vector<Phase> row_phases; // phase letter of each node-phase row

    std::size_t node_count() const { return row_phases.size(); }
};

struct StateEstimate {
    Eigen::VectorXd v_mag;
    Eigen::VectorXd v_angle; // degrees
    bool clamped = false;
    double latency_seconds = 0.0;
};

struct DsseMetrics {
    std::array<double, 3> mag_mape_per_phase{};   // %
    std::array<double, 3> angle_mae_per_phase{};  // degrees
    std::array<std::size_t, 3> samples_per_phase{};
};

struct Hyperparams {
    int hidden_layers = 5;
    int hidden_units = 200;
    double dropout_rate = 0.5;
    bool batch_norm = true;
    double learning_rate = 0.095;
    int epochs = 100;
    int batch_size = 64;
    std::uint64_t seed = 1;
};

inline void to_json(nlohmann::json& j, const Hyperparams& h) {
    j = {{"hidden_layers", h.hidden_layers}, {"hidden_units", h.hidden_units}, {"dropout_rate", h.dropout_rate},
         {"batch_norm", h.batch_norm},       {"learning_rate", h.learning_rate}, {"epochs", h.epochs},
         {"batch_size", h.batch_size},       {"seed", h.seed}};
}

struct TrainResult {
    DsseModel model;
    std::vector<double> loss_history; // mean train-mode minibatch loss per epoch
    double initial_loss = 0.0;        // eval-mode loss before the first update
    double final_loss = 0.0;          // eval-mode loss after the last epoch
};

inline double wrap_degrees(double d) {
    if (d >= -180.0 && d < 180.0) return d;
    d = std::fmod(d + 180.0, 360.0);
    if (d < 0) d += 360.0;
    return d - 180.0;
}

inline Eigen::Index state_width(std::size_t node_count) { return 2 * static_cast<Eigen::Index>(node_count); }

/// True magnitudes and angles; angles are measured relative to the source
/// phasor of the same phase and reported around that phase's nominal angle.
inline Eigen::VectorXd state_target(const PowerFlowSolution& sol, const NodeIndex& idx, const SlackVoltage& slack) {
    const auto n = static_cast<Eigen::Index>(idx.size());
    Eigen::VectorXd t(2 * n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Phase p = idx.phase_of(static_cast<std::size_t>(i));
        const Complex v{sol.v_real(i), sol.v_imag(i)};
        const Complex ref = slack[static_cast<std::size_t>(p)];
        const double rel = std::arg(v * std::conj(ref)) * 180.0 / M_PI;
        const double nominal = nominal_phase_angle_deg(p);
        const double source = nominal + wrap_degrees(std::arg(ref) * 180.0 / M_PI - nominal);
        t(i) = sol.v_mag(i);
        t(n + i) = source + rel;
    }
    return t;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// One (noisy measurement, true state) pair per power-flow-feasible scenario
/// at unity power factor. More than 10% divergent scenarios is a dataset error.
inline Dataset build_training_pairs(const ScenarioSet& scenarios, const Feeder& feeder, const AdmittanceMatrix& y,
                                    double noise_pct, std::uint64_t seed) {
    Dataset ds;
    const auto slack = balanced_slack(feeder.source_voltage_pu);
    for (const auto& s : scenarios.scenarios) {
        PowerFlowSolution sol;
        try {
            sol = solve_power_flow(feeder, y, build_injections(feeder, y.index_map, s), slack);
        } catch (const DivergedError&) {
            ++ds.diverged;
            continue;
        } catch (const NumericalError&) {
            ++ds.diverged;
            continue;
        }
        TrainingPair tp;
        tp.scenario_id = s.id;
        tp.input = feeder_head_measurement(sol, feeder, y, noise_pct, mix_seed(seed, static_cast<std::uint64_t>(s.id)));
        tp.target = state_target(sol, y.index_map, slack);
        ds.pairs.push_back(std::move(tp));
    }
    if (ds.diverged > 0) spdlog::warn("dsse dataset: dropped {} divergent scenarios", ds.diverged);
    if (!scenarios.scenarios.empty() &&
        static_cast<double>(ds.diverged) > 0.1 * static_cast<double>(scenarios.scenarios.size()))
        throw DatasetError(std::to_string(ds.diverged) + " of " + std::to_string(scenarios.scenarios.size()) +
                           " scenarios diverged");
    return ds;
}

inline Eigen::MatrixXd input_matrix(const std::vector<TrainingPair>& pairs) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(pairs.size()), static_cast<Eigen::Index>(MeasurementVector::kSize));
    for (std::size_t r = 0; r < pairs.size(); ++r)
        for (std::size_t c = 0; c < MeasurementVector::kSize; ++c)
            x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = pairs[r].input.values[c];
    return x;
}

inline Eigen::MatrixXd target_matrix(const std::vector<TrainingPair>& pairs) {
    if (pairs.empty()) return {};
    Eigen::MatrixXd t(static_cast<Eigen::Index>(pairs.size()), pairs.front().target.size());
    for (std::size_t r = 0; r < pairs.size(); ++r) t.row(static_cast<Eigen::Index>(r)) = pairs[r].target.transpose();
    return t;
}

inline nn::MlpSpec network_spec(const Hyperparams& hp, Eigen::Index outputs) {
    nn::MlpSpec spec;
    spec.input_dim = static_cast<Eigen::Index>(MeasurementVector::kSize);
    for (int i = 0; i < hp.hidden_layers; ++i)
        spec.layers.push_back({hp.hidden_units, nn::Activation::Relu, hp.dropout_rate, hp.batch_norm});
    spec.layers.push_back({outputs, nn::Activation::Identity, 0.0, false});
    return spec;
}

inline TrainResult train_dsse(const std::vector<TrainingPair>& pairs, const Feeder& feeder, const Hyperparams& hp) {
    if (pairs.size() < 100) throw DatasetError("DSSE training needs at least 100 pairs, got " + std::to_string(pairs.size()));
    if (hp.batch_size < 2 || hp.epochs < 0) throw UsageError("invalid DSSE hyperparameters");
    const NodeIndex idx(feeder);
    const Eigen::Index outputs = state_width(idx.size());
    for (const auto& p : pairs)
        if (p.target.size() != outputs) throw ShapeError("DSSE target width does not match feeder");

    std::mt19937_64 rng(hp.seed);
    TrainResult res;
    DsseModel& model = res.model;
    model.feeder_fingerprint = feeder_fingerprint(feeder);
    for (std::size_t i = 0; i < idx.size(); ++i) model.row_phases.push_back(idx.phase_of(i));
    const Eigen::MatrixXd x_raw = input_matrix(pairs);
    const Eigen::MatrixXd t_raw = target_matrix(pairs);
    model.input_normalizer = Normalizer::fit(x_raw);
    model.output_normalizer = Normalizer::fit(t_raw);
    const Eigen::MatrixXd x = model.input_normalizer.normalize(x_raw);
    const Eigen::MatrixXd t = model.output_normalizer.normalize(t_raw);
    model.net = nn::make_mlp(network_spec(hp, outputs), rng);

    res.initial_loss = nn::mse_loss(nn::predict(model.net, x), t).value;
    nn::AdamState adam(hp.learning_rate);
    std::vector<Eigen::Index> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    const auto bs = static_cast<std::size_t>(hp.batch_size);
    model.net.mode = nn::Mode::Train;
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(order.size(), start + bs);
            if (end - start < 2) continue; // batch norm needs two rows
            std::vector<Eigen::Index> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            const Eigen::MatrixXd xb = x(rows, Eigen::all);
            const Eigen::MatrixXd tb = t(rows, Eigen::all);
            nn::ForwardCache cache;
            const Eigen::MatrixXd out = nn::forward(model.net, xb, rng, &cache);
            auto loss = nn::mse_loss(out, tb);
            if (!std::isfinite(loss.value))
                throw TrainingError("DSSE training diverged (non-finite loss) at epoch " + std::to_string(epoch));
            auto grads = nn::backward(model.net, cache, loss.gradient);
            nn::update_running_stats(model.net, cache);
            try {
                nn::adam_step(adam, model.net, grads);
            } catch (const NumericalError& e) {
                throw TrainingError("DSSE training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
            sum += loss.value;
            ++batches;
        }
        res.loss_history.push_back(batches ? sum / static_cast<double>(batches) : 0.0);
        spdlog::debug("dsse epoch {} loss {:.6g}", epoch, res.loss_history.back());
    }
    model.net.mode = nn::Mode::Eval;
    res.final_loss = nn::mse_loss(nn::predict(model.net, x), t).value;
    if (!std::isfinite(res.final_loss)) throw TrainingError("DSSE training ended with a non-finite loss");
    return res;
}

inline Eigen::MatrixXd predict_states(const DsseModel& model, const Eigen::MatrixXd& raw_inputs) {
    return model.output_normalizer.denormalize(nn::predict(model.net, model.input_normalizer.normalize(raw_inputs)));
}

inline StateEstimate estimate_states(const DsseModel& model, const MeasurementVector& m,
                                     std::uint64_t active_fingerprint) {
    if (active_fingerprint != model.feeder_fingerprint)
        throw MismatchError("DSSE model was trained for a different feeder");
    const auto t0 = std::chrono::steady_clock::now();
    Eigen::MatrixXd in(1, static_cast<Eigen::Index>(MeasurementVector::kSize));
    for (std::size_t c = 0; c < MeasurementVector::kSize; ++c) in(0, static_cast<Eigen::Index>(c)) = m.values[c];
    const Eigen::MatrixXd out = predict_states(model, in);
    const auto n = static_cast<Eigen::Index>(model.node_count());
    StateEstimate est;
    est.v_mag = out.row(0).head(n).transpose();
    est.v_angle = out.row(0).tail(n).transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
        const double v = est.v_mag(i);
        if (!(v > 0.5 && v < 1.5)) {
            est.clamped = true;
            est.v_mag(i) = std::isfinite(v) ? std::clamp(v, 0.5, 1.5) : 1.0;
        }
    }
    est.latency_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return est;
}

/// Per-phase MAPE (%) of magnitudes and MAE (degrees) of angles from raw
/// predictions, aggregated over every node-phase of each phase letter.
inline DsseMetrics metrics_from_predictions(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth,
                                            const std::vector<Phase>& row_phases) {
    const auto n = static_cast<Eigen::Index>(row_phases.size());
    if (pred.rows() != truth.rows() || pred.cols() != 2 * n || truth.cols() != 2 * n)
        throw ShapeError("metrics: prediction/target shapes do not match");
    DsseMetrics m;
    std::array<double, 3> mape{}, mae{};
    for (Eigen::Index r = 0; r < pred.rows(); ++r)
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto p = static_cast<std::size_t>(row_phases[static_cast<std::size_t>(i)]);
            mape[p] += std::abs(pred(r, i) - truth(r, i)) / std::abs(truth(r, i));
            mae[p] += std::abs(wrap_degrees(pred(r, n + i) - truth(r, n + i)));
            ++m.samples_per_phase[p];
        }
    for (std::size_t p = 0; p < 3; ++p) {
        if (m.samples_per_phase[p] == 0) continue;
        const auto k = static_cast<double>(m.samples_per_phase[p]);
        m.mag_mape_per_phase[p] = 100.0 * mape[p] / k;
        m.angle_mae_per_phase[p] = mae[p] / k;
    }
    return m;
}

inline DsseMetrics evaluate_dsse(const DsseModel& model, const std::vector<TrainingPair>& test) {
    if (test.empty()) throw DatasetError("evaluate_dsse needs a nonempty test set");
    return metrics_from_predictions(predict_states(model, input_matrix(test)), target_matrix(test), model.row_phases);
}

inline void write_metrics_csv(const DsseMetrics& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path);
    out << "phase,mag_mape_pct,angle_mae_deg\n";
    for (std::size_t p = 0; p < 3; ++p) {
        if (m.samples_per_phase[p] == 0) continue;
        out << phase_letter(static_cast<Phase>(p)) << ',' << format_double(m.mag_mape_per_phase[p]) << ','
            << format_double(m.angle_mae_per_phase[p]) << '\n';
    }
}

// Checkpoint: "GPDS", version, fingerprint, row phases, normalizers, network.
inline void write_dsse(std::ostream& os, const DsseModel& m) {
    os.write("GPDS", 4);
    nn::detail::put<std::uint32_t>(os, 1);
    nn::detail::put<std::uint64_t>(os, m.feeder_fingerprint);
    nn::detail::put<std::uint64_t>(os, m.row_phases.size());
    for (Phase p : m.row_phases) nn::detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(p));
    for (const Normalizer* n : {&m.input_normalizer, &m.output_normalizer}) {
        nn::detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(n->mean.size()));
        nn::detail::put_array(os, n->mean.data(), n->mean.size());
        nn::detail::put_array(os, n->stddev.data(), n->stddev.size());
    }
    nn::write_mlp(os, m.net);
}

inline DsseModel read_dsse(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "GPDS") throw SchemaError("not a DSSE checkpoint");
    if (nn::detail::get<std::uint32_t>(is) != 1) throw SchemaError("unsupported DSSE checkpoint version");
    DsseModel m;
    m.feeder_fingerprint = nn::detail::get<std::uint64_t>(is);
    const auto n = nn::detail::get<std::uint64_t>(is);
    if (n > (1u << 20)) throw SchemaError("implausible node count in DSSE checkpoint");
    for (std::uint64_t i = 0; i < n; ++i) {
        const auto p = nn::detail::get<std::uint8_t>(is);
        if (p > 2) throw SchemaError("bad phase in DSSE checkpoint");
        m.row_phases.push_back(static_cast<Phase>(p));
    }
    for (Normalizer* nz : {&m.input_normalizer, &m.output_normalizer}) {
        const auto k = static_cast<Eigen::Index>(nn::detail::get<std::uint64_t>(is));
        if (k < 0 || k > (1 << 20)) throw SchemaError("bad normalizer size in DSSE checkpoint");
        nz->mean.resize(k);
        nz->stddev.resize(k);
        nn::detail::get_array(is, nz->mean.data(), k);
        nn::detail::get_array(is, nz->stddev.data(), k);
    }
    m.net = nn::read_mlp(is);
    if (m.net.input_dim() != static_cast<Eigen::Index>(MeasurementVector::kSize) ||
        m.net.output_dim() != state_width(m.row_phases.size()))
        throw SchemaError("DSSE checkpoint network shape inconsistent with its feeder");
    return m;
}

inline void save_dsse(const DsseModel& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("cannot write " + path);
    write_dsse(os, m);
}

inline DsseModel load_dsse(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw SchemaError("cannot open DSSE checkpoint " + path);
    return read_dsse(is);
}

} // namespace gridpilot::dsse
