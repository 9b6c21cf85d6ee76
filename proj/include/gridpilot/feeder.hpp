#pragma once

// Three-phase unbalanced radial feeder model and nodal admittance assembly.
//
// All quantities held by a Feeder are per-unit on a single system-wide base:
// base_voltage_kv is line-to-neutral, base_power_kva is per phase, so
// Z_base = kV_ln^2 * 1000 / kVA.

#include <gridpilot/error.hpp>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <complex>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace gridpilot {

using Complex = std::complex<double>;

enum class Phase : std::uint8_t { A = 0, B = 1, C = 2 };

inline char phase_letter(Phase p) { return static_cast<char>('A' + static_cast<int>(p)); }

inline std::optional<Phase> parse_phase(char c) {
    switch (c) {
    case 'A': case 'a': return Phase::A;
    case 'B': case 'b': return Phase::B;
    case 'C': case 'c': return Phase::C;
    default: return std::nullopt;
    }
}

/// Nominal angle of each phase's source voltage, in degrees.
inline double nominal_phase_angle_deg(Phase p) {
    constexpr std::array<double, 3> angles{0.0, -120.0, 120.0};
    return angles[static_cast<int>(p)];
}

struct Bus {
    std::string id;
    std::vector<Phase> phases; // sorted, unique, nonempty

    bool has_phase(Phase p) const {
        return std::find(phases.begin(), phases.end(), p) != phases.end();
    }
};

struct Line {
    std::string from_bus;
    std::string to_bus;
    // p.u., rows/cols ordered like the to-bus phases
    Eigen::MatrixXcd phase_impedance;
};

struct LoadPoint {
    std::string bus_id;
    Phase phase = Phase::A;
    double p_nominal = 0.0; // p.u.
    double q_nominal = 0.0; // p.u.
};

struct PvUnit {
    std::string bus_id;
    Phase phase = Phase::A;
    double s_rated = 0.0;
    double p_rated = 0.0;
    double q_rated = 0.0;

    /// q_rated defaults to the reactive headroom left at rated active output.
    static PvUnit make(std::string bus_id, Phase phase, double s_rated, double p_rated,
                       std::optional<double> q_rated_override = std::nullopt) {
        PvUnit pv;
        pv.bus_id = std::move(bus_id);
        pv.phase = phase;
        pv.s_rated = s_rated;
        pv.p_rated = p_rated;
        pv.q_rated = q_rated_override
                         ? *q_rated_override
                         : std::sqrt(std::max(0.0, s_rated * s_rated - p_rated * p_rated));
        return pv;
    }
};

struct Feeder {
    std::vector<Bus> buses;
    std::vector<Line> lines;
    std::vector<LoadPoint> loads;
    std::vector<PvUnit> pv_units;
    std::string source_bus_id;
    double base_voltage_kv = 1.0;
    double base_power_kva = 1.0;
    double source_voltage_pu = 1.0;

    double impedance_base_ohm() const {
        return base_voltage_kv * base_voltage_kv * 1000.0 / base_power_kva;
    }

    const Bus* find_bus(const std::string& id) const {
        for (const auto& b : buses)
            if (b.id == id) return &b;
        return nullptr;
    }
};

// Per-unit conversions on the feeder power base.
inline double kw_to_pu(double kw, double base_kva) { return kw / base_kva; }
inline double pu_to_kw(double pu, double base_kva) { return pu * base_kva; }
inline Complex ohm_to_pu(Complex z, double z_base) { return z / z_base; }
inline Complex pu_to_ohm(Complex z, double z_base) { return z * z_base; }

/// Maps (bus, phase) to a dense node-phase row. Rows follow the bus order of
/// the feeder, phases A..C within each bus.
class NodeIndex {
public:
    NodeIndex() = default;

    explicit NodeIndex(const Feeder& feeder) {
        for (std::size_t b = 0; b < feeder.buses.size(); ++b) {
            for (Phase p : feeder.buses[b].phases) {
                rows_.emplace(key(feeder.buses[b].id, p), bus_of_.size());
                bus_of_.push_back(b);
                phase_of_.push_back(p);
                bus_id_of_.push_back(feeder.buses[b].id);
            }
        }
    }

    std::size_t size() const { return bus_of_.size(); }

    std::optional<std::size_t> row(const std::string& bus_id, Phase p) const {
        auto it = rows_.find(key(bus_id, p));
        if (it == rows_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t at(const std::string& bus_id, Phase p) const {
        auto r = row(bus_id, p);
        if (!r) throw ReferenceError("no node-phase " + bus_id + "." + phase_letter(p));
        return *r;
    }

    std::size_t bus_of(std::size_t row) const { return bus_of_.at(row); }
    Phase phase_of(std::size_t row) const { return phase_of_.at(row); }
    const std::string& bus_id_of(std::size_t row) const { return bus_id_of_.at(row); }

private:
    static std::string key(const std::string& bus, Phase p) {
        return bus + '\x1f' + phase_letter(p);
    }

    std::unordered_map<std::string, std::size_t> rows_;
    std::vector<std::size_t> bus_of_;
    std::vector<Phase> phase_of_;
    std::vector<std::string> bus_id_of_;
};

struct AdmittanceMatrix {
    Eigen::MatrixXd g;
    Eigen::MatrixXd b;
    NodeIndex index_map;

    std::size_t size() const { return index_map.size(); }
    Eigen::MatrixXcd complex() const {
        Eigen::MatrixXcd y(g.rows(), g.cols());
        y.real() = g;
        y.imag() = b;
        return y;
    }
};

/// Series admittance of one line with the node-phase rows it connects.
struct BranchAdmittance {
    std::size_t line = 0;
    std::vector<std::size_t> from_rows;
    std::vector<std::size_t> to_rows;
    Eigen::MatrixXcd y;
};

// ---------------------------------------------------------------------------
// Validation

enum class DiagnosticKind { Schema, Topology, Reference, Rating };

struct Diagnostic {
    DiagnosticKind kind;
    std::string entity;
    std::string message;
};

inline std::vector<Diagnostic> validate_feeder(const Feeder& f) {
    std::vector<Diagnostic> out;
    auto add = [&](DiagnosticKind k, std::string entity, std::string msg) {
        out.push_back({k, std::move(entity), std::move(msg)});
    };

    if (!(f.base_voltage_kv > 0.0)) add(DiagnosticKind::Rating, "feeder", "base_voltage_kv must be positive");
    if (!(f.base_power_kva > 0.0)) add(DiagnosticKind::Rating, "feeder", "base_power_kva must be positive");

    std::map<std::string, std::size_t> bus_pos;
    for (std::size_t i = 0; i < f.buses.size(); ++i) {
        const auto& b = f.buses[i];
        if (!bus_pos.emplace(b.id, i).second)
            add(DiagnosticKind::Schema, b.id, "duplicate bus id");
        if (b.phases.empty()) add(DiagnosticKind::Schema, b.id, "bus has no phases");
    }
    if (!bus_pos.count(f.source_bus_id)) {
        add(DiagnosticKind::Reference, f.source_bus_id, "source bus does not exist");
    }

    // Line references, impedance shape and phase nesting.
    std::vector<int> incoming(f.buses.size(), 0);
    std::vector<std::vector<std::size_t>> children(f.buses.size());
    for (std::size_t li = 0; li < f.lines.size(); ++li) {
        const auto& l = f.lines[li];
        const std::string name = "line " + l.from_bus + "->" + l.to_bus;
        auto from = bus_pos.find(l.from_bus);
        auto to = bus_pos.find(l.to_bus);
        if (from == bus_pos.end() || to == bus_pos.end()) {
            add(DiagnosticKind::Reference, name, "line references a nonexistent bus");
            continue;
        }
        ++incoming[to->second];
        children[from->second].push_back(to->second);
        const Bus& tb = f.buses[to->second];
        const Bus& fb = f.buses[from->second];
        for (Phase p : tb.phases)
            if (!fb.has_phase(p))
                add(DiagnosticKind::Topology, tb.id,
                    std::string("phase ") + phase_letter(p) + " not present at parent bus " + fb.id);
        const auto n = static_cast<Eigen::Index>(tb.phases.size());
        if (l.phase_impedance.rows() != n || l.phase_impedance.cols() != n) {
            add(DiagnosticKind::Schema, name, "impedance dimension does not match to-bus phases");
            continue;
        }
        for (Eigen::Index r = 0; r < n; ++r) {
            if (l.phase_impedance(r, r).real() < 0.0)
                add(DiagnosticKind::Rating, name, "negative resistance on diagonal");
            for (Eigen::Index c = r + 1; c < n; ++c)
                if (std::abs(l.phase_impedance(r, c) - l.phase_impedance(c, r)) > 1e-12)
                    add(DiagnosticKind::Schema, name, "impedance matrix not symmetric");
        }
    }

    // Radial and connected: every non-source bus has one parent and is
    // reachable from the source.
    if (auto src = bus_pos.find(f.source_bus_id); src != bus_pos.end()) {
        std::vector<bool> seen(f.buses.size(), false);
        std::vector<std::size_t> stack{src->second};
        seen[src->second] = true;
        while (!stack.empty()) {
            auto b = stack.back();
            stack.pop_back();
            for (auto c : children[b])
                if (!seen[c]) {
                    seen[c] = true;
                    stack.push_back(c);
                }
        }
        for (std::size_t i = 0; i < f.buses.size(); ++i) {
            const auto& id = f.buses[i].id;
            if (i == src->second) {
                if (incoming[i] != 0)
                    add(DiagnosticKind::Topology, id, "source bus has an incoming line");
            } else if (!seen[i]) {
                add(DiagnosticKind::Topology, id, "bus is not connected to the source");
            } else if (incoming[i] > 1) {
                add(DiagnosticKind::Topology, id, "bus has more than one incoming line (loop)");
            }
        }
    }

    auto check_point = [&](const std::string& bus, Phase p, const std::string& what) {
        auto it = bus_pos.find(bus);
        if (it == bus_pos.end()) {
            add(DiagnosticKind::Reference, what, "references nonexistent bus " + bus);
            return;
        }
        if (!f.buses[it->second].has_phase(p))
            add(DiagnosticKind::Reference, what,
                std::string("references phase ") + phase_letter(p) + " absent at bus " + bus);
    };
    for (std::size_t i = 0; i < f.loads.size(); ++i) {
        const auto& l = f.loads[i];
        const std::string what = "load " + std::to_string(i);
        check_point(l.bus_id, l.phase, what);
        if (l.p_nominal < 0.0) add(DiagnosticKind::Rating, what, "p_nominal must be nonnegative");
    }
    for (std::size_t i = 0; i < f.pv_units.size(); ++i) {
        const auto& pv = f.pv_units[i];
        const std::string what = "pv " + std::to_string(i);
        check_point(pv.bus_id, pv.phase, what);
        if (!(pv.p_rated > 0.0 && pv.p_rated <= pv.s_rated))
            add(DiagnosticKind::Rating, what, "requires 0 < p_rated <= s_rated");
        if (pv.q_rated < 0.0 || pv.q_rated > pv.s_rated)
            add(DiagnosticKind::Rating, what, "requires 0 <= q_rated <= s_rated");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Admittance

inline std::vector<BranchAdmittance> branch_admittances(const Feeder& f, const NodeIndex& idx) {
    std::vector<BranchAdmittance> out;
    out.reserve(f.lines.size());
    for (std::size_t li = 0; li < f.lines.size(); ++li) {
        const auto& l = f.lines[li];
        const Bus* to = f.find_bus(l.to_bus);
        if (!to) throw ReferenceError("line references nonexistent bus " + l.to_bus);
        BranchAdmittance br;
        br.line = li;
        for (Phase p : to->phases) {
            br.from_rows.push_back(idx.at(l.from_bus, p));
            br.to_rows.push_back(idx.at(l.to_bus, p));
        }
        Eigen::FullPivLU<Eigen::MatrixXcd> lu(l.phase_impedance);
        if (l.phase_impedance.size() == 0 || l.phase_impedance.norm() == 0.0 || !lu.isInvertible())
            throw NumericalError("singular impedance on line " + l.from_bus + "->" + l.to_bus);
        br.y = lu.inverse();
        out.push_back(std::move(br));
    }
    return out;
}

inline AdmittanceMatrix build_admittance(const Feeder& f) {
    AdmittanceMatrix out;
    out.index_map = NodeIndex(f);
    const auto n = static_cast<Eigen::Index>(out.index_map.size());
    Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
    for (const auto& br : branch_admittances(f, out.index_map)) {
        const auto k = br.from_rows.size();
        for (std::size_t r = 0; r < k; ++r)
            for (std::size_t c = 0; c < k; ++c) {
                const Complex v = br.y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
                const auto fr = static_cast<Eigen::Index>(br.from_rows[r]);
                const auto fc = static_cast<Eigen::Index>(br.from_rows[c]);
                const auto tr = static_cast<Eigen::Index>(br.to_rows[r]);
                const auto tc = static_cast<Eigen::Index>(br.to_rows[c]);
                y(fr, fc) += v;
                y(tr, tc) += v;
                y(fr, tc) -= v;
                y(tr, fc) -= v;
            }
    }
    out.g = y.real();
    out.b = y.imag();
    return out;
}

// ---------------------------------------------------------------------------
// File I/O

namespace detail {

inline std::vector<Phase> parse_phase_list(const nlohmann::json& j, const std::string& where) {
    std::string letters;
    if (j.is_string()) {
        letters = j.get<std::string>();
    } else if (j.is_array()) {
        for (const auto& e : j) letters += e.get<std::string>();
    } else {
        throw SchemaError(where + ".phases: expected string or array");
    }
    std::vector<Phase> out;
    for (char c : letters) {
        auto p = parse_phase(c);
        if (!p) throw SchemaError(where + ".phases: invalid phase '" + std::string(1, c) + "'");
        out.push_back(*p);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

inline Phase parse_single_phase(const nlohmann::json& j, const std::string& where) {
    auto s = j.get<std::string>();
    if (s.size() != 1 || !parse_phase(s[0])) throw SchemaError(where + ".phase: expected A, B or C");
    return *parse_phase(s[0]);
}

template <class T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw SchemaError(where + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(where + "." + key + ": " + e.what());
    }
}

inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
    offset = std::min(offset, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

} // namespace detail

/// Parses the feeder JSON text; values in the text are physical units
/// (kW, kvar, kVA, ohms) and are converted to per-unit here.
inline Feeder parse_feeder(const std::string& text) {
    using nlohmann::json;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SchemaError("feeder parse error at line " +
                          std::to_string(detail::line_of_offset(text, e.byte)) + ": " + e.what());
    }
    for (const char* key : {"buses", "lines", "loads", "pv_units", "source_bus_id", "base_voltage_kv", "base_power_kva"})
        if (!j.contains(key)) throw SchemaError(std::string("feeder: missing top-level field '") + key + "'");

    Feeder f;
    f.source_bus_id = detail::field<std::string>(j, "source_bus_id", "feeder");
    f.base_voltage_kv = detail::field<double>(j, "base_voltage_kv", "feeder");
    f.base_power_kva = detail::field<double>(j, "base_power_kva", "feeder");
    if (j.contains("source_voltage_pu")) f.source_voltage_pu = detail::field<double>(j, "source_voltage_pu", "feeder");
    if (!(f.base_voltage_kv > 0.0) || !(f.base_power_kva > 0.0))
        throw SchemaError("feeder: base quantities must be strictly positive");
    const double zb = f.impedance_base_ohm();
    const double sb = f.base_power_kva;

    for (std::size_t i = 0; i < j["buses"].size(); ++i) {
        const auto& jb = j["buses"][i];
        const std::string where = "buses[" + std::to_string(i) + "]";
        Bus b;
        b.id = detail::field<std::string>(jb, "id", where);
        if (!jb.contains("phases")) throw SchemaError(where + ": missing field 'phases'");
        b.phases = detail::parse_phase_list(jb["phases"], where);
        f.buses.push_back(std::move(b));
    }
    for (std::size_t i = 0; i < j["lines"].size(); ++i) {
        const auto& jl = j["lines"][i];
        const std::string where = "lines[" + std::to_string(i) + "]";
        Line l;
        l.from_bus = detail::field<std::string>(jl, "from_bus", where);
        l.to_bus = detail::field<std::string>(jl, "to_bus", where);
        if (!jl.contains("phase_impedance") || !jl["phase_impedance"].is_array())
            throw SchemaError(where + ": missing field 'phase_impedance'");
        const auto& jz = jl["phase_impedance"];
        const auto n = static_cast<Eigen::Index>(jz.size());
        l.phase_impedance = Eigen::MatrixXcd::Zero(n, n);
        for (Eigen::Index r = 0; r < n; ++r) {
            const auto& row = jz[static_cast<std::size_t>(r)];
            if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n)
                throw SchemaError(where + ".phase_impedance: matrix must be square");
            for (Eigen::Index c = 0; c < n; ++c) {
                const auto& e = row[static_cast<std::size_t>(c)];
                const std::string ew = where + ".phase_impedance[" + std::to_string(r) + "][" + std::to_string(c) + "]";
                Complex z{detail::field<double>(e, "re", ew), detail::field<double>(e, "im", ew)};
                l.phase_impedance(r, c) = ohm_to_pu(z, zb);
            }
        }
        f.lines.push_back(std::move(l));
    }
    for (std::size_t i = 0; i < j["loads"].size(); ++i) {
        const auto& jl = j["loads"][i];
        const std::string where = "loads[" + std::to_string(i) + "]";
        LoadPoint lp;
        lp.bus_id = detail::field<std::string>(jl, "bus_id", where);
        if (!jl.contains("phase")) throw SchemaError(where + ": missing field 'phase'");
        lp.phase = detail::parse_single_phase(jl["phase"], where);
        lp.p_nominal = kw_to_pu(detail::field<double>(jl, "p_nominal", where), sb);
        lp.q_nominal = kw_to_pu(detail::field<double>(jl, "q_nominal", where), sb);
        f.loads.push_back(std::move(lp));
    }
    for (std::size_t i = 0; i < j["pv_units"].size(); ++i) {
        const auto& jp = j["pv_units"][i];
        const std::string where = "pv_units[" + std::to_string(i) + "]";
        if (!jp.contains("phase")) throw SchemaError(where + ": missing field 'phase'");
        std::optional<double> q;
        if (jp.contains("q_rated")) q = kw_to_pu(detail::field<double>(jp, "q_rated", where), sb);
        f.pv_units.push_back(PvUnit::make(detail::field<std::string>(jp, "bus_id", where),
                                          detail::parse_single_phase(jp["phase"], where),
                                          kw_to_pu(detail::field<double>(jp, "s_rated", where), sb),
                                          kw_to_pu(detail::field<double>(jp, "p_rated", where), sb), q));
    }

    auto diags = validate_feeder(f);
    // Report the most structural problem first.
    for (auto kind : {DiagnosticKind::Schema, DiagnosticKind::Reference, DiagnosticKind::Topology, DiagnosticKind::Rating}) {
        for (const auto& d : diags) {
            if (d.kind != kind) continue;
            const std::string msg = d.entity + ": " + d.message;
            switch (kind) {
            case DiagnosticKind::Schema: throw SchemaError(msg);
            case DiagnosticKind::Reference: throw ReferenceError(msg);
            case DiagnosticKind::Topology: throw TopologyError(msg);
            case DiagnosticKind::Rating: throw SchemaError(msg);
            }
        }
    }
    return f;
}

inline Feeder load_feeder(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SchemaError("cannot open feeder file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_feeder(ss.str());
}

/// FNV-1a over the canonical per-unit content of a feeder. Stable across
/// formatting changes of the source file; changes with any electrical value.
inline std::uint64_t feeder_fingerprint(const Feeder& f) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix_bytes = [&](const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 1099511628211ULL;
        }
    };
    auto mix_str = [&](const std::string& s) { mix_bytes(s.data(), s.size()); mix_bytes("\0", 1); };
    auto mix_d = [&](double d) { mix_bytes(&d, sizeof d); };
    mix_str(f.source_bus_id);
    mix_d(f.base_voltage_kv);
    mix_d(f.base_power_kva);
    mix_d(f.source_voltage_pu);
    for (const auto& b : f.buses) {
        mix_str(b.id);
        for (Phase p : b.phases) mix_bytes(&p, 1);
    }
    for (const auto& l : f.lines) {
        mix_str(l.from_bus);
        mix_str(l.to_bus);
        for (Eigen::Index i = 0; i < l.phase_impedance.size(); ++i) {
            mix_d(l.phase_impedance(i).real());
            mix_d(l.phase_impedance(i).imag());
        }
    }
    for (const auto& l : f.loads) {
        mix_str(l.bus_id);
        mix_bytes(&l.phase, 1);
        mix_d(l.p_nominal);
        mix_d(l.q_nominal);
    }
    for (const auto& pv : f.pv_units) {
        mix_str(pv.bus_id);
        mix_bytes(&pv.phase, 1);
        mix_d(pv.s_rated);
        mix_d(pv.p_rated);
        mix_d(pv.q_rated);
    }
    return h;
}

} // namespace gridpilot
