#!/usr/bin/env python3
"""Regenerates the bundled feeder fixtures under feeders/.

The fixtures are synthetic. synth34 stands in for a 34-node class radial
feeder: a three-phase trunk with three-phase, two-phase and single-phase
laterals, 135 node-phases in total, a load on every non-source node-phase
and a rooftop-PV aggregate next to every load.
"""
import json
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "..", "feeders")

BASE_KV_LN = 24.9 / 3 ** 0.5
BASE_KVA = 1000.0
SRATIO = 1.03


def z(re, im):
    return {"re": round(re, 6), "im": round(im, 6)}


def phase_matrix(phases, length, r_self=0.55, x_self=0.95, r_mut=0.12, x_mut=0.35):
    n = len(phases)
    return [[z(r_self * length, x_self * length) if i == j else z(r_mut * length, x_mut * length)
             for j in range(n)] for i in range(n)]


def two_bus():
    zb = BASE_KV_LN ** 2 * 1000 / BASE_KVA
    return {
        "source_bus_id": "src",
        "base_voltage_kv": BASE_KV_LN,
        "base_power_kva": BASE_KVA,
        "buses": [{"id": "src", "phases": "A"}, {"id": "b1", "phases": "A"}],
        "lines": [{"from_bus": "src", "to_bus": "b1", "phase_impedance": [[z(0.0, 0.1 * zb)]]}],
        "loads": [{"bus_id": "b1", "phase": "A", "p_nominal": 500.0, "q_nominal": 0.0}],
        "pv_units": [],
    }


def four_bus():
    # Single-phase chain src - b1 - b2 - b3, loads on b1..b3, one PV at the end.
    zb = BASE_KV_LN ** 2 * 1000 / BASE_KVA
    seg = [[z(0.08 * zb, 0.06 * zb)]]
    buses = [{"id": b, "phases": "A"} for b in ("src", "b1", "b2", "b3")]
    lines = [{"from_bus": a, "to_bus": b, "phase_impedance": seg}
             for a, b in (("src", "b1"), ("b1", "b2"), ("b2", "b3"))]
    loads = [{"bus_id": b, "phase": "A", "p_nominal": p, "q_nominal": 0.25 * p}
             for b, p in (("b1", 50.0), ("b2", 50.0), ("b3", 600.0))]
    pv = [{"bus_id": "b3", "phase": "A", "s_rated": 1.2 * 630.0, "p_rated": 630.0}]
    return {
        "source_bus_id": "src",
        "base_voltage_kv": BASE_KV_LN,
        "base_power_kva": BASE_KVA,
        "source_voltage_pu": 1.02,
        "buses": buses,
        "lines": lines,
        "loads": loads,
        "pv_units": pv,
    }


def synth34(zscale):
    buses = [("sourcebus", "ABC", None, 0.0)]

    def chain(prefix, count, phases, parent, length):
        prev = parent
        names = []
        for i in range(1, count + 1):
            name = f"{prefix}{i:02d}"
            buses.append((name, phases, prev, length))
            names.append(name)
            prev = name
        return names

    trunk = chain("t", 24, "ABC", "sourcebus", 1.6)
    chain("la", 5, "ABC", trunk[5], 1.0)
    chain("lb", 10, "ABC", trunk[11], 1.1)
    m = chain("m", 2, "AB", trunk[15], 0.9)
    chain("n", 1, "BC", trunk[19], 0.9)
    chain("sa", 3, "A", trunk[7], 0.8)
    chain("sb", 2, "B", trunk[13], 0.8)
    chain("sc", 2, "C", trunk[17], 0.8)
    chain("sd", 1, "A", trunk[21], 0.8)
    chain("se", 1, "B", m[1], 0.8)

    phase_weight = {"A": 1.12, "B": 0.88, "C": 1.0}
    out_buses, lines, loads, pvs = [], [], [], []
    for k, (name, phases, parent, length) in enumerate(buses):
        out_buses.append({"id": name, "phases": phases})
        if parent is None:
            continue
        lines.append({"from_bus": parent, "to_bus": name,
                      "phase_impedance": phase_matrix(phases, zscale * length)})
        for ph in phases:
            # deterministic spread of nominal demand, 18..42 kW per node-phase
            p = round((18.0 + (k * 7 + ord(ph) * 3) % 25) * phase_weight[ph], 3)
            loads.append({"bus_id": name, "phase": ph, "p_nominal": p, "q_nominal": round(0.3 * p, 3)})
            p_rated = round(1.05 * p, 4)
            pvs.append({"bus_id": name, "phase": ph, "s_rated": round(SRATIO * p_rated, 4), "p_rated": p_rated})

    return {
        "source_bus_id": "sourcebus",
        "base_voltage_kv": BASE_KV_LN,
        "base_power_kva": BASE_KVA,
        "source_voltage_pu": 1.02,
        "buses": out_buses,
        "lines": lines,
        "loads": loads,
        "pv_units": pvs,
    }


def dump(obj, name):
    with open(os.path.join(OUT, name), "w") as f:
        json.dump(obj, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    zscale = float(sys.argv[1]) if len(sys.argv) > 1 else 2.5
    os.makedirs(OUT, exist_ok=True)
    dump(two_bus(), "2bus.json")
    dump(four_bus(), "4bus.json")
    dump(synth34(zscale), "synth34.json")
