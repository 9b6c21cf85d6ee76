#pragma once

// Small dense-network toolkit: fully connected layers with optional batch
// normalization and inverted dropout, hand-written backprop, Adam, MSE and a
// bit-exact binary checkpoint format. Batches are row-per-sample matrices.

#include <gridpilot/error.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace gridpilot::nn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

enum class Activation : std::uint8_t { Identity = 0, Relu = 1, Tanh = 2 };
enum class Mode : std::uint8_t { Train, Eval };

struct BatchNorm {
    RowVector scale;
    RowVector shift;
    RowVector running_mean;
    RowVector running_var;
    double momentum = 0.9;
    double epsilon = 1e-5;
};

struct DenseLayer {
    Matrix weights; // in x out
    RowVector biases;
    Activation activation = Activation::Identity;
    double dropout_rate = 0.0;
    std::optional<BatchNorm> batch_norm;

    Eigen::Index in_dim() const { return weights.rows(); }
    Eigen::Index out_dim() const { return weights.cols(); }
};

struct MlpModel {
    std::vector<DenseLayer> layers;
    Mode mode = Mode::Eval;
    // Bumped by every parameter update; forward caches record it.
    std::uint64_t version = 0;

    Eigen::Index input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
    Eigen::Index output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
};

struct LayerSpec {
    Eigen::Index units = 0;
    Activation activation = Activation::Relu;
    double dropout_rate = 0.0;
    bool batch_norm = false;
};

struct MlpSpec {
    Eigen::Index input_dim = 0;
    std::vector<LayerSpec> layers;
    // Uniform half-width for the last layer; defaults to 1/sqrt(fan_in).
    std::optional<double> final_init_scale;
};

template <std::uniform_random_bit_generator Rng>
MlpModel make_mlp(const MlpSpec& spec, Rng& rng) {
    if (spec.input_dim <= 0 || spec.layers.empty()) throw ShapeError("MLP needs a positive input and at least one layer");
    MlpModel m;
    Eigen::Index fan_in = spec.input_dim;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const auto& ls = spec.layers[li];
        if (ls.units <= 0) throw ShapeError("layer width must be positive");
        if (ls.dropout_rate < 0.0 || ls.dropout_rate >= 1.0) throw ShapeError("dropout rate must be in [0, 1)");
        const bool last = li + 1 == spec.layers.size();
        const double a = (last && spec.final_init_scale) ? *spec.final_init_scale : 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-a, a);
        DenseLayer l;
        l.weights = Matrix::NullaryExpr(fan_in, ls.units, [&] { return u(rng); });
        l.biases = RowVector::NullaryExpr(ls.units, [&] { return u(rng); });
        l.activation = ls.activation;
        l.dropout_rate = ls.dropout_rate;
        if (ls.batch_norm) {
            BatchNorm bn;
            bn.scale = RowVector::Ones(ls.units);
            bn.shift = RowVector::Zero(ls.units);
            bn.running_mean = RowVector::Zero(ls.units);
            bn.running_var = RowVector::Ones(ls.units);
            l.batch_norm = bn;
        }
        m.layers.push_back(std::move(l));
        fan_in = ls.units;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct LayerCache {
    Matrix input;
    Matrix normalized; // x-hat of batch norm, empty if none
    RowVector inv_std;  // per-feature 1/sqrt(var + eps) used by batch norm
    RowVector batch_mean;
    RowVector batch_var;
    Matrix activated; // after the nonlinearity, before dropout
    Matrix mask;      // inverted-dropout multiplier, empty if inactive
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Mode mode = Mode::Eval;
    std::uint64_t model_version = 0;
    const MlpModel* model = nullptr;
    bool valid = false;
};

struct LayerGrads {
    Matrix weights;
    RowVector biases;
    RowVector scale;
    RowVector shift;
};

struct Gradients {
    std::vector<LayerGrads> layers;
    Matrix input;
};

inline Matrix activate(const Matrix& z, Activation a) {
    switch (a) {
    case Activation::Relu: return z.cwiseMax(0.0);
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Identity: break;
    }
    return z;
}

template <std::uniform_random_bit_generator Rng>
Matrix forward(const MlpModel& model, const Matrix& batch, Rng& rng, ForwardCache* cache = nullptr) {
    if (batch.cols() != model.input_dim())
        throw ShapeError("batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                         std::to_string(model.input_dim()));
    if (cache) {
        cache->layers.clear();
        cache->layers.reserve(model.layers.size());
        cache->mode = model.mode;
        cache->model_version = model.version;
        cache->model = &model;
        cache->valid = true;
    }
    const bool train = model.mode == Mode::Train;
    Matrix x = batch;
    for (const auto& l : model.layers) {
        LayerCache lc;
        if (cache) lc.input = x;
        Matrix z = (x * l.weights).rowwise() + l.biases;
        if (l.batch_norm) {
            const auto& bn = *l.batch_norm;
            RowVector mean, var;
            if (train) {
                if (z.rows() < 2) throw ShapeError("batch norm in train mode needs at least 2 rows");
                mean = z.colwise().mean();
                var = (z.rowwise() - mean).array().square().colwise().mean().matrix();
            } else {
                mean = bn.running_mean;
                var = bn.running_var;
            }
            RowVector inv_std = (var.array() + bn.epsilon).rsqrt().matrix();
            Matrix xhat = (z.rowwise() - mean).array().rowwise() * inv_std.array();
            z = (xhat.array().rowwise() * bn.scale.array()).rowwise() + bn.shift.array();
            if (cache) {
                lc.normalized = std::move(xhat);
                lc.inv_std = inv_std;
                lc.batch_mean = mean;
                lc.batch_var = var;
            }
        }
        Matrix a = activate(z, l.activation);
        if (cache) lc.activated = a;
        if (train && l.dropout_rate > 0.0) {
            const double keep = 1.0 - l.dropout_rate;
            std::bernoulli_distribution bern(keep);
            Matrix mask(a.rows(), a.cols());
            for (Eigen::Index c = 0; c < mask.cols(); ++c)
                for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, c) = bern(rng) ? 1.0 / keep : 0.0;
            a = a.cwiseProduct(mask);
            if (cache) lc.mask = std::move(mask);
        }
        if (cache) cache->layers.push_back(std::move(lc));
        x = std::move(a);
    }
    return x;
}

inline Matrix forward(const MlpModel& model, const Matrix& batch, std::uint64_t rng_seed = 0,
                      ForwardCache* cache = nullptr) {
    std::mt19937_64 rng(rng_seed);
    return forward(model, batch, rng, cache);
}

/// Eval-mode forward that ignores the model's mode flag.
inline Matrix predict(const MlpModel& model, const Matrix& batch) {
    if (model.mode == Mode::Eval) return forward(model, batch, 0);
    MlpModel copy = model;
    copy.mode = Mode::Eval;
    return forward(copy, batch, 0);
}

inline Gradients backward(const MlpModel& model, ForwardCache& cache, const Matrix& output_gradient) {
    if (!cache.valid || cache.model != &model || cache.model_version != model.version ||
        cache.layers.size() != model.layers.size())
        throw UsageError("backward called with a stale or missing forward cache");
    if (cache.layers.empty() || output_gradient.rows() != cache.layers.back().activated.rows() ||
        output_gradient.cols() != model.output_dim())
        throw ShapeError("output gradient shape does not match the forward pass");

    Gradients g;
    g.layers.resize(model.layers.size());
    Matrix d = output_gradient;
    for (std::size_t i = model.layers.size(); i-- > 0;) {
        const auto& l = model.layers[i];
        const auto& lc = cache.layers[i];
        if (lc.mask.size() > 0) d = d.cwiseProduct(lc.mask);
        switch (l.activation) {
        case Activation::Relu: d = d.cwiseProduct((lc.activated.array() > 0.0).cast<double>().matrix()); break;
        case Activation::Tanh: d = d.cwiseProduct((1.0 - lc.activated.array().square()).matrix()); break;
        case Activation::Identity: break;
        }
        auto& lg = g.layers[i];
        if (l.batch_norm) {
            const auto& bn = *l.batch_norm;
            lg.scale = d.cwiseProduct(lc.normalized).colwise().sum();
            lg.shift = d.colwise().sum();
            Matrix dxhat = d.array().rowwise() * bn.scale.array();
            if (cache.mode == Mode::Train) {
                const double n = static_cast<double>(d.rows());
                RowVector sum_dxhat = dxhat.colwise().sum();
                RowVector sum_dxhat_xhat = dxhat.cwiseProduct(lc.normalized).colwise().sum();
                Matrix t = (dxhat * n).rowwise() - sum_dxhat;
                t -= (lc.normalized.array().rowwise() * sum_dxhat_xhat.array()).matrix();
                d = (t.array().rowwise() * (lc.inv_std.array() / n)).matrix();
            } else {
                d = (dxhat.array().rowwise() * lc.inv_std.array()).matrix();
            }
        } else {
            lg.scale.resize(0);
            lg.shift.resize(0);
        }
        lg.weights = lc.input.transpose() * d;
        lg.biases = d.colwise().sum();
        d = d * l.weights.transpose();
    }
    g.input = std::move(d);
    return g;
}

/// Copies batch statistics from a train-mode cache into the running
/// averages: running = momentum * running + (1 - momentum) * batch.
inline void update_running_stats(MlpModel& model, const ForwardCache& cache) {
    if (cache.mode != Mode::Train || cache.layers.size() != model.layers.size()) return;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        auto& l = model.layers[i];
        if (!l.batch_norm) continue;
        auto& bn = *l.batch_norm;
        const auto& lc = cache.layers[i];
        bn.running_mean = bn.momentum * bn.running_mean + (1.0 - bn.momentum) * lc.batch_mean;
        bn.running_var = bn.momentum * bn.running_var + (1.0 - bn.momentum) * lc.batch_var;
    }
}

// ---------------------------------------------------------------------------
// Parameter access

/// Visits trainable parameters in a fixed order: per layer W, b, then the
/// batch-norm scale and shift.
template <class Fn>
void for_each_parameter(MlpModel& m, Fn&& fn) {
    for (auto& l : m.layers) {
        fn(l.weights.data(), l.weights.size());
        fn(l.biases.data(), l.biases.size());
        if (l.batch_norm) {
            fn(l.batch_norm->scale.data(), l.batch_norm->scale.size());
            fn(l.batch_norm->shift.data(), l.batch_norm->shift.size());
        }
    }
}

template <class Fn>
void for_each_parameter(const MlpModel& m, Fn&& fn) {
    for (const auto& l : m.layers) {
        fn(l.weights.data(), l.weights.size());
        fn(l.biases.data(), l.biases.size());
        if (l.batch_norm) {
            fn(l.batch_norm->scale.data(), l.batch_norm->scale.size());
            fn(l.batch_norm->shift.data(), l.batch_norm->shift.size());
        }
    }
}

template <class Fn>
void for_each_gradient(const MlpModel& m, const Gradients& g, Fn&& fn) {
    if (g.layers.size() != m.layers.size()) throw ShapeError("gradient layer count mismatch");
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto& lg = g.layers[i];
        fn(lg.weights.data(), lg.weights.size());
        fn(lg.biases.data(), lg.biases.size());
        if (m.layers[i].batch_norm) {
            fn(lg.scale.data(), lg.scale.size());
            fn(lg.shift.data(), lg.shift.size());
        }
    }
}

inline std::size_t parameter_count(const MlpModel& m) {
    std::size_t n = 0;
    for_each_parameter(m, [&](const double*, Eigen::Index k) { n += static_cast<std::size_t>(k); });
    return n;
}

inline std::vector<double> flatten_parameters(const MlpModel& m) {
    std::vector<double> out;
    out.reserve(parameter_count(m));
    for_each_parameter(m, [&](const double* p, Eigen::Index k) { out.insert(out.end(), p, p + k); });
    return out;
}

inline std::vector<double> flatten_gradients(const MlpModel& m, const Gradients& g) {
    std::vector<double> out;
    for_each_gradient(m, g, [&](const double* p, Eigen::Index k) { out.insert(out.end(), p, p + k); });
    return out;
}

inline void assign_parameters(MlpModel& m, const std::vector<double>& flat) {
    if (flat.size() != parameter_count(m)) throw ShapeError("flat parameter vector has wrong length");
    std::size_t off = 0;
    for_each_parameter(m, [&](double* p, Eigen::Index k) {
        std::memcpy(p, flat.data() + off, static_cast<std::size_t>(k) * sizeof(double));
        off += static_cast<std::size_t>(k);
    });
    ++m.version;
}

inline bool same_architecture(const MlpModel& a, const MlpModel& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const auto &x = a.layers[i], &y = b.layers[i];
        if (x.in_dim() != y.in_dim() || x.out_dim() != y.out_dim() || x.activation != y.activation ||
            x.dropout_rate != y.dropout_rate || x.batch_norm.has_value() != y.batch_norm.has_value())
            return false;
    }
    return true;
}

/// target <- tau * source + (1 - tau) * target, elementwise over all parameters
/// (and batch-norm running statistics, so eval-mode targets track too).
inline void soft_update(const MlpModel& source, MlpModel& target, double tau) {
    if (!same_architecture(source, target)) throw ShapeError("soft_update on mismatched architectures");
    for (std::size_t i = 0; i < source.layers.size(); ++i) {
        const auto& s = source.layers[i];
        auto& t = target.layers[i];
        t.weights = tau * s.weights + (1.0 - tau) * t.weights;
        t.biases = tau * s.biases + (1.0 - tau) * t.biases;
        if (s.batch_norm) {
            auto& tb = *t.batch_norm;
            const auto& sb = *s.batch_norm;
            tb.scale = tau * sb.scale + (1.0 - tau) * tb.scale;
            tb.shift = tau * sb.shift + (1.0 - tau) * tb.shift;
            tb.running_mean = tau * sb.running_mean + (1.0 - tau) * tb.running_mean;
            tb.running_var = tau * sb.running_var + (1.0 - tau) * tb.running_var;
        }
    }
    ++target.version;
}

// ---------------------------------------------------------------------------
// Optimizer and loss

struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<double> first_moment;
    std::vector<double> second_moment;

    explicit AdamState(double lr = 1e-3) : learning_rate(lr) {}
};

inline void adam_step(AdamState& st, MlpModel& model, const Gradients& grads) {
    const std::vector<double> g = flatten_gradients(model, grads);
    const std::size_t n = parameter_count(model);
    if (g.size() != n) throw ShapeError("gradients do not match model parameters");
    for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(g[i]))
            throw NumericalError("non-finite gradient at parameter " + std::to_string(i) + " (step " +
                                 std::to_string(st.step) + ")");
    if (st.first_moment.empty()) {
        st.first_moment.assign(n, 0.0);
        st.second_moment.assign(n, 0.0);
    } else if (st.first_moment.size() != n) {
        throw ShapeError("Adam state does not match model parameters");
    }
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    std::size_t off = 0;
    for_each_parameter(model, [&](double* p, Eigen::Index k) {
        for (Eigen::Index j = 0; j < k; ++j, ++off) {
            double& m = st.first_moment[off];
            double& v = st.second_moment[off];
            m = st.beta1 * m + (1.0 - st.beta1) * g[off];
            v = st.beta2 * v + (1.0 - st.beta2) * g[off] * g[off];
            p[j] -= st.learning_rate * (m / c1) / (std::sqrt(v / c2) + st.epsilon);
        }
    });
    ++model.version;
}

struct LossResult {
    double value = 0.0;
    Matrix gradient;
};

inline LossResult mse_loss(const Matrix& pred, const Matrix& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("mse_loss shape mismatch");
    if (pred.size() == 0) throw ShapeError("mse_loss on empty matrices");
    const Matrix diff = pred - target;
    const double n = static_cast<double>(diff.size());
    return {diff.squaredNorm() / n, diff * (2.0 / n)};
}

// ---------------------------------------------------------------------------
// Checkpoints: "GPNN" magic, format version, architecture, raw little-endian
// doubles. Reading back reproduces every bit.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw SchemaError("truncated checkpoint");
    return v;
}
inline void put_array(std::ostream& os, const double* p, Eigen::Index n) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * static_cast<Eigen::Index>(sizeof(double))));
}
inline void get_array(std::istream& is, double* p, Eigen::Index n) {
    is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * static_cast<Eigen::Index>(sizeof(double))));
    if (!is) throw SchemaError("truncated checkpoint");
}
} // namespace detail

inline void write_mlp(std::ostream& os, const MlpModel& m) {
    os.write("GPNN", 4);
    detail::put<std::uint32_t>(os, kCheckpointVersion);
    detail::put<std::uint64_t>(os, m.layers.size());
    for (const auto& l : m.layers) {
        detail::put<std::int64_t>(os, l.in_dim());
        detail::put<std::int64_t>(os, l.out_dim());
        detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(l.activation));
        detail::put<double>(os, l.dropout_rate);
        detail::put<std::uint8_t>(os, l.batch_norm ? 1 : 0);
        detail::put_array(os, l.weights.data(), l.weights.size());
        detail::put_array(os, l.biases.data(), l.biases.size());
        if (l.batch_norm) {
            const auto& bn = *l.batch_norm;
            detail::put<double>(os, bn.momentum);
            detail::put<double>(os, bn.epsilon);
            for (const RowVector* v : {&bn.scale, &bn.shift, &bn.running_mean, &bn.running_var})
                detail::put_array(os, v->data(), v->size());
        }
    }
}

inline MlpModel read_mlp(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "GPNN", 4) != 0) throw SchemaError("not a network checkpoint");
    if (auto v = detail::get<std::uint32_t>(is); v != kCheckpointVersion)
        throw SchemaError("unsupported checkpoint version " + std::to_string(v));
    const auto n = detail::get<std::uint64_t>(is);
    if (n > 1024) throw SchemaError("implausible layer count in checkpoint");
    MlpModel m;
    for (std::uint64_t i = 0; i < n; ++i) {
        DenseLayer l;
        const auto in = detail::get<std::int64_t>(is);
        const auto out = detail::get<std::int64_t>(is);
        if (in <= 0 || out <= 0 || in > (1 << 20) || out > (1 << 20)) throw SchemaError("bad layer shape in checkpoint");
        const auto act = detail::get<std::uint8_t>(is);
        if (act > 2) throw SchemaError("unknown activation in checkpoint");
        l.activation = static_cast<Activation>(act);
        l.dropout_rate = detail::get<double>(is);
        const bool has_bn = detail::get<std::uint8_t>(is) != 0;
        l.weights.resize(in, out);
        l.biases.resize(out);
        detail::get_array(is, l.weights.data(), l.weights.size());
        detail::get_array(is, l.biases.data(), l.biases.size());
        if (has_bn) {
            BatchNorm bn;
            bn.momentum = detail::get<double>(is);
            bn.epsilon = detail::get<double>(is);
            for (RowVector* v : {&bn.scale, &bn.shift, &bn.running_mean, &bn.running_var}) {
                v->resize(out);
                detail::get_array(is, v->data(), out);
            }
            l.batch_norm = bn;
        }
        if (!m.layers.empty() && m.layers.back().out_dim() != in) throw SchemaError("layer dimensions do not chain");
        m.layers.push_back(std::move(l));
    }
    return m;
}

} // namespace gridpilot::nn
