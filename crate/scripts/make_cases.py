"""Regenerate the bundled IEEE cases in the native JSON schema (and a CDF copy
of the 30-bus case) from the PYPOWER / pandapower test-case libraries.

    python3 scripts/make_cases.py data/

The voltages written to `vm`/`va_deg` come from a tightly converged AC power
flow so that the stored state is consistent with the stored admittances.
"""
import json
import sys

import numpy as np
import pandapower as pp
import pandapower.networks as pn
from pypower.api import case118, ppoption, runpf

# pandapower's case118 carries transformer magnetizing losses that the two-port model here omits
CASES = {"ieee9": "case9", "ieee30": "case_ieee30", "ieee57": "case57", "ieee118": case118}


def ybus(base, bus, branch):
    n = bus.shape[0]
    y = np.zeros((n, n), dtype=complex)
    for br in branch:
        if br[10].real == 0:
            continue
        f, t = int(br[0].real), int(br[1].real)
        ys = 1.0 / complex(br[2].real, br[3].real)
        bc = br[4].real
        k = br[8].real if br[8].real != 0 else 1.0
        y[f, f] += (ys + 0.5j * bc) / k**2
        y[t, t] += ys + 0.5j * bc
        y[f, t] -= ys / k
        y[t, f] -= ys / k
    for i in range(n):
        y[i, i] += complex(bus[i, 4].real, bus[i, 5].real) / base
    return y


def solve_pypower(fn):
    res, ok = runpf(fn(), ppoption(VERBOSE=0, OUT_ALL=0, PF_TOL=1e-12))
    assert ok
    base = float(res["baseMVA"])
    bus = res["bus"].copy()
    ext = {int(b): i for i, b in enumerate(bus[:, 0])}
    bus[:, 0] = np.arange(bus.shape[0])
    branch = res["branch"].copy()
    branch[:, 0] = [ext[int(b)] for b in branch[:, 0]]
    branch[:, 1] = [ext[int(b)] for b in branch[:, 1]]
    s_ref = -(bus[:, 2] + 1j * bus[:, 3]) / base
    for g in res["gen"]:
        if g[7] > 0:
            s_ref[ext[int(g[0])]] += (g[1] + 1j * g[2]) / base
    return base, bus, branch, s_ref


def solve_pandapower(fn):
    net = getattr(pn, fn)()
    pp.runpp(net, tolerance_mva=1e-11, max_iteration=50, init="flat")
    ppc = net._ppc
    base = float(ppc["baseMVA"])
    bus = ppc["bus"]
    branch = ppc["branch"]
    lookup = net._pd2ppc_lookups["bus"]
    s_pp = np.zeros(bus.shape[0], dtype=complex)
    for idx in net.bus.index:
        s_pp[lookup[idx]] = -(net.res_bus.p_mw[idx] + 1j * net.res_bus.q_mvar[idx]) / base
    # pandapower books shunt consumption as bus load; here shunts live in Y
    for idx in net.shunt.index:
        b = lookup[net.shunt.bus[idx]]
        s_pp[b] += (net.res_shunt.p_mw[idx] + 1j * net.res_shunt.q_mvar[idx]) / base
    return base, bus, branch, s_pp


def convert(name, fn):
    base, bus, branch, s_ref = solve_pypower(fn) if callable(fn) else solve_pandapower(fn)
    assert np.all(np.abs(branch[:, 9].real) == 0), "phase shifters present"
    vm = bus[:, 7].real
    va = np.deg2rad(bus[:, 8].real)
    u = vm * np.exp(1j * va)
    y = ybus(base, bus, branch)
    s = u * np.conj(y @ u)
    err = np.abs(s - s_ref).max()
    assert err < 1e-8, (name, err)
    buses = []
    for i in range(bus.shape[0]):
        pd_, qd_ = bus[i, 2].real, bus[i, 3].real
        buses.append({
            "id": i + 1,
            "slack": int(bus[i, 1].real) == 3,
            "gs": bus[i, 4].real / base,
            "bs": bus[i, 5].real / base,
            "vm": float(vm[i]),
            "va_deg": float(bus[i, 8].real),
            "pd": pd_,
            "qd": qd_,
            "pg": float(s[i].real * base + pd_),
            "qg": float(s[i].imag * base + qd_),
        })
    branches = []
    for br in branch:
        if br[10].real == 0:
            continue
        k = br[8].real if br[8].real != 0 else 1.0
        branches.append({
            "from": int(br[0].real) + 1,
            "to": int(br[1].real) + 1,
            "r": br[2].real,
            "x": br[3].real,
            "b": br[4].real,
            "tap": k,
        })
    return {"name": name, "base_mva": base, "buses": buses, "branches": branches}


def write_cdf(case, path):
    lines = ["10/15/26 PANDAPOWER      %6.1f 2026 S IEEE %d Bus Test Case" % (case["base_mva"], len(case["buses"]))]
    lines.append("BUS DATA FOLLOWS                            %d ITEMS" % len(case["buses"]))
    for b in case["buses"]:
        typ = 3 if b["slack"] else (2 if abs(b["pg"]) > 1e-6 or abs(b["qg"]) > 1e-6 else 0)
        lines.append(
            "%4d %-12s %2d%3d %2d %6.4f%7.2f%9.1f%9.1f%9.1f%8.1f %7.2f %6.4f%8.1f%8.1f%8.4f%8.4f %4d"
            % (b["id"], "Bus %d" % b["id"], 1, 1, typ, b["vm"], b["va_deg"], b["pd"], b["qd"],
               b["pg"], b["qg"], 132.0, b["vm"] if typ else 0.0, 0.0, 0.0, b["gs"], b["bs"], 0)
        )
    lines.append("-999")
    lines.append("BRANCH DATA FOLLOWS                         %d ITEMS" % len(case["branches"]))
    for br in case["branches"]:
        typ = 0 if br["tap"] == 1.0 else 1
        ratio = 0.0 if br["tap"] == 1.0 else br["tap"]
        lines.append(
            "%4d %4d %2d%2d  1 %1d%10.6f%11.6f%10.5f%5d%5d%5d   %4d %1d  %6.4f %7.2f%7.4f%7.4f %6.4f %7.4f%7.4f"
            % (br["from"], br["to"], 1, 1, typ, br["r"], br["x"], br["b"], 0, 0, 0, 0, 0, ratio, 0.0,
               0.0, 0.0, 0.0, 0.0, 0.0)
        )
    lines.append("-999")
    lines.append("LOSS ZONES FOLLOWS                     1 ITEMS")
    lines.append("  1 IEEE %d" % len(case["buses"]))
    lines.append("-99")
    lines.append("END OF DATA")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def main(out):
    for name, fn in CASES.items():
        case = convert(name, fn)
        with open(f"{out}/{name}.json", "w") as f:
            json.dump(case, f, indent=1)
        if name == "ieee30":
            write_cdf(case, f"{out}/ieee30.cdf")
        print(name, len(case["buses"]), len(case["branches"]))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data")
