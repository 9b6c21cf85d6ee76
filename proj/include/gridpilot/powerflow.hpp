#pragma once

// Full Newton-Raphson power flow in rectangular coordinates. The mismatch
// functions are the nodal active/reactive balance equations written with
// G, B and V = V_R + jV_I, where P and Q are the net consumption at a
// node-phase (load minus PV). The feeder head is the slack.

#include <gridpilot/error.hpp>
#include <gridpilot/feeder.hpp>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <concepts>
#include <random>
#include <span>
#include <vector>

namespace gridpilot {

struct InjectionSet {
    Eigen::VectorXd p; // net consumption per node-phase, slack entries ignored
    Eigen::VectorXd q;

    static InjectionSet zeros(std::size_t n) {
        return {Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n)), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))};
    }
};

struct PowerFlowSolution {
    Eigen::VectorXd v_real;
    Eigen::VectorXd v_imag;
    Eigen::VectorXd v_mag;
    double feeder_head_p = 0.0;
    double feeder_head_q = 0.0;
    int iterations = 0;
    bool converged = false;
    double residual = 0.0;

    Eigen::VectorXcd voltage() const {
        Eigen::VectorXcd v(v_real.size());
        v.real() = v_real;
        v.imag() = v_imag;
        return v;
    }
};

/// Rectangular components of the three source voltages followed by the three
/// feeder-head current injections: [VaR VaI VbR VbI VcR VcI IaR IaI IbR IbI IcR IcI].
struct MeasurementVector {
    static constexpr std::size_t kSize = 12;
    std::array<double, kSize> values{};
};

using SlackVoltage = std::array<Complex, 3>;

inline SlackVoltage balanced_slack(double magnitude = 1.0) {
    SlackVoltage v;
    for (int k = 0; k < 3; ++k)
        v[static_cast<std::size_t>(k)] = std::polar(magnitude, nominal_phase_angle_deg(static_cast<Phase>(k)) * M_PI / 180.0);
    return v;
}

struct SolverOptions {
    double tolerance = 1e-8;
    int max_iterations = 50;
};

/// Rows of the slack (source bus) node-phases.
inline std::vector<std::size_t> slack_rows(const Feeder& feeder, const NodeIndex& idx) {
    std::vector<std::size_t> rows;
    const Bus* src = feeder.find_bus(feeder.source_bus_id);
    if (!src) throw ReferenceError("source bus " + feeder.source_bus_id + " not found");
    for (Phase p : src->phases) rows.push_back(idx.at(src->id, p));
    return rows;
}

namespace detail {

struct Mismatch {
    Eigen::VectorXd dp; // full length, slack entries meaningless
    Eigen::VectorXd dq;
    Eigen::VectorXd ir; // real part of Y*V
    Eigen::VectorXd ii; // imaginary part of Y*V
};

inline Mismatch mismatch(const AdmittanceMatrix& y, const Eigen::VectorXd& e, const Eigen::VectorXd& f,
                         const InjectionSet& inj) {
    Mismatch m;
    m.ir = y.g * e - y.b * f;
    m.ii = y.g * f + y.b * e;
    m.dp = e.cwiseProduct(m.ir) + f.cwiseProduct(m.ii) + inj.p;
    m.dq = f.cwiseProduct(m.ir) - e.cwiseProduct(m.ii) + inj.q;
    return m;
}

} // namespace detail

inline void check_dimensions(const AdmittanceMatrix& y, const InjectionSet& inj) {
    const auto n = static_cast<Eigen::Index>(y.size());
    if (y.g.rows() != n || y.b.rows() != n || inj.p.size() != n || inj.q.size() != n)
        throw ShapeError("injection/admittance dimensions inconsistent with node-phase count");
}

inline PowerFlowSolution solve_power_flow(const Feeder& feeder, const AdmittanceMatrix& y, const InjectionSet& inj,
                                          const SlackVoltage& slack, const SolverOptions& opts = {}) {
    check_dimensions(y, inj);
    for (const auto& v : slack)
        if (!(std::abs(v) > 0.5 && std::abs(v) < 1.5))
            throw UsageError("slack voltage magnitude outside (0.5, 1.5) p.u.");

    const auto& idx = y.index_map;
    const std::size_t n = idx.size();
    const auto slack_set = slack_rows(feeder, idx);
    std::vector<bool> is_slack(n, false);
    for (auto r : slack_set) is_slack[r] = true;
    std::vector<Eigen::Index> pq;
    for (std::size_t i = 0; i < n; ++i)
        if (!is_slack[i]) pq.push_back(static_cast<Eigen::Index>(i));
    const auto m = static_cast<Eigen::Index>(pq.size());

    // Flat start: every node-phase at its phase's slack phasor.
    Eigen::VectorXd e(static_cast<Eigen::Index>(n)), f(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const Complex v0 = slack[static_cast<std::size_t>(idx.phase_of(i))];
        e(static_cast<Eigen::Index>(i)) = v0.real();
        f(static_cast<Eigen::Index>(i)) = v0.imag();
    }

    PowerFlowSolution sol;
    Eigen::MatrixXd jac(2 * m, 2 * m);
    Eigen::VectorXd rhs(2 * m);
    double resid = 0.0;
    int it = 0;
    for (;; ++it) {
        auto mm = detail::mismatch(y, e, f, inj);
        resid = 0.0;
        for (Eigen::Index k = 0; k < m; ++k) {
            rhs(k) = mm.dp(pq[static_cast<std::size_t>(k)]);
            rhs(m + k) = mm.dq(pq[static_cast<std::size_t>(k)]);
        }
        resid = m > 0 ? rhs.cwiseAbs().maxCoeff() : 0.0;
        if (!std::isfinite(resid)) throw DivergedError("power flow produced non-finite residual", resid);
        if (resid <= opts.tolerance) break;
        if (it >= opts.max_iterations)
            throw DivergedError("power flow did not converge in " + std::to_string(opts.max_iterations) +
                                    " iterations (residual " + std::to_string(resid) + ")",
                                resid);

        for (Eigen::Index r = 0; r < m; ++r) {
            const Eigen::Index i = pq[static_cast<std::size_t>(r)];
            const double ei = e(i), fi = f(i);
            for (Eigen::Index c = 0; c < m; ++c) {
                const Eigen::Index j = pq[static_cast<std::size_t>(c)];
                const double g = y.g(i, j), b = y.b(i, j);
                jac(r, c) = ei * g + fi * b;
                jac(r, m + c) = -ei * b + fi * g;
                jac(m + r, c) = fi * g - ei * b;
                jac(m + r, m + c) = -fi * b - ei * g;
            }
            jac(r, r) += mm.ir(i);
            jac(r, m + r) += mm.ii(i);
            jac(m + r, r) -= mm.ii(i);
            jac(m + r, m + r) += mm.ir(i);
        }
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
        if (!(lu.rcond() > 1e-14)) throw NumericalError("singular power-flow Jacobian");
        const Eigen::VectorXd dx = lu.solve(rhs);
        for (Eigen::Index k = 0; k < m; ++k) {
            e(pq[static_cast<std::size_t>(k)]) -= dx(k);
            f(pq[static_cast<std::size_t>(k)]) -= dx(m + k);
        }
    }

    sol.v_real = e;
    sol.v_imag = f;
    sol.v_mag = (e.array().square() + f.array().square()).sqrt().matrix();
    sol.iterations = it;
    sol.converged = true;
    sol.residual = resid;
    const Eigen::VectorXd ir = y.g * e - y.b * f;
    const Eigen::VectorXd ii = y.g * f + y.b * e;
    for (auto r : slack_set) {
        const auto i = static_cast<Eigen::Index>(r);
        sol.feeder_head_p += e(i) * ir(i) + f(i) * ii(i);
        sol.feeder_head_q += f(i) * ir(i) - e(i) * ii(i);
    }
    return sol;
}

/// Largest absolute active or reactive balance residual over the non-slack
/// node-phases, evaluated term by term from the balance equations.
inline double residual_norm(const Feeder& feeder, const AdmittanceMatrix& y, const PowerFlowSolution& sol,
                            const InjectionSet& inj) {
    check_dimensions(y, inj);
    const auto slack = slack_rows(feeder, y.index_map);
    const auto n = static_cast<Eigen::Index>(y.size());
    double worst = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (std::find(slack.begin(), slack.end(), static_cast<std::size_t>(i)) != slack.end()) continue;
        double sum_re = 0.0, sum_im = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
            sum_re += y.g(i, k) * sol.v_real(k) - y.b(i, k) * sol.v_imag(k);
            sum_im += y.g(i, k) * sol.v_imag(k) + y.b(i, k) * sol.v_real(k);
        }
        const double dp = sol.v_real(i) * sum_re + sol.v_imag(i) * sum_im + inj.p(i);
        const double dq = sol.v_imag(i) * sum_re - sol.v_real(i) * sum_im + inj.q(i);
        worst = std::max({worst, std::abs(dp), std::abs(dq)});
    }
    return worst;
}

/// Noise-free source voltages and feeder-head current injections.
inline MeasurementVector exact_feeder_head_phasors(const PowerFlowSolution& sol, const Feeder& feeder,
                                                   const AdmittanceMatrix& y) {
    MeasurementVector mv;
    const Bus* src = feeder.find_bus(feeder.source_bus_id);
    if (!src) throw ReferenceError("source bus " + feeder.source_bus_id + " not found");
    for (Phase p : src->phases) {
        const auto i = static_cast<Eigen::Index>(y.index_map.at(src->id, p));
        double ir = 0.0, ii = 0.0;
        for (Eigen::Index k = 0; k < y.g.cols(); ++k) {
            ir += y.g(i, k) * sol.v_real(k) - y.b(i, k) * sol.v_imag(k);
            ii += y.g(i, k) * sol.v_imag(k) + y.b(i, k) * sol.v_real(k);
        }
        const auto ph = static_cast<std::size_t>(p);
        mv.values[2 * ph] = sol.v_real(i);
        mv.values[2 * ph + 1] = sol.v_imag(i);
        mv.values[6 + 2 * ph] = ir;
        mv.values[6 + 2 * ph + 1] = ii;
    }
    return mv;
}

/// Feeder-head phasors with multiplicative Gaussian noise, one independent
/// factor (1 + eps), eps ~ N(0, noise_pct/100), per component.
template <std::uniform_random_bit_generator Rng>
MeasurementVector feeder_head_measurement(const PowerFlowSolution& sol, const Feeder& feeder,
                                          const AdmittanceMatrix& y, double noise_pct, Rng& rng) {
    if (noise_pct < 0.0) throw UsageError("noise_pct must be nonnegative");
    MeasurementVector mv = exact_feeder_head_phasors(sol, feeder, y);
    if (noise_pct > 0.0) {
        std::normal_distribution<double> eps(0.0, noise_pct / 100.0);
        for (auto& v : mv.values) v *= 1.0 + eps(rng);
    }
    return mv;
}

inline MeasurementVector feeder_head_measurement(const PowerFlowSolution& sol, const Feeder& feeder,
                                                 const AdmittanceMatrix& y, double noise_pct,
                                                 std::uint64_t rng_seed) {
    std::mt19937_64 rng(rng_seed);
    return feeder_head_measurement(sol, feeder, y, noise_pct, rng);
}

} // namespace gridpilot
