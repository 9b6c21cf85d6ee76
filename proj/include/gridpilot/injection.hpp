#pragma once

#include <gridpilot/feeder.hpp>
#include <gridpilot/powerflow.hpp>
#include <gridpilot/scenario.hpp>

#include <span>

namespace gridpilot {

/// Net consumption per node-phase for one scenario: P = P_load - P_PV and
/// Q = Q_load - Q_PV, with `q_pv` the inverter reactive setpoints (p.u.,
/// positive = injecting). An empty span means unity power factor.
inline InjectionSet build_injections(const Feeder& feeder, const NodeIndex& idx, const Scenario& s,
                                     std::span<const double> q_pv = {}) {
    check_scenario(s, feeder);
    if (!q_pv.empty() && q_pv.size() != feeder.pv_units.size())
        throw ShapeError("reactive setpoint count does not match PV units");
    auto inj = InjectionSet::zeros(idx.size());
    for (std::size_t i = 0; i < feeder.loads.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(idx.at(feeder.loads[i].bus_id, feeder.loads[i].phase));
        inj.p(r) += s.p_load[i];
        inj.q(r) += s.q_load[i];
    }
    for (std::size_t k = 0; k < feeder.pv_units.size(); ++k) {
        const auto r = static_cast<Eigen::Index>(idx.at(feeder.pv_units[k].bus_id, feeder.pv_units[k].phase));
        inj.p(r) -= s.p_pv[k];
        if (!q_pv.empty()) inj.q(r) -= q_pv[k];
    }
    return inj;
}

} // namespace gridpilot
