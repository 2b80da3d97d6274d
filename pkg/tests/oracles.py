"""Independent reference computations used only by the tests."""
from __future__ import annotations

import math

import numpy as np

from multigraph_pf.dss import CircuitSpec
from multigraph_pf.grid import MultiGraph, NodeKind

SOURCE_ANGLES = np.array([0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0])


def random_feeder_text(rng: np.random.Generator, max_buses: int = 6) -> str:
    """Random radial feeder with 1/2/3-phase laterals, loads and an optional regulator."""
    n_bus = int(rng.integers(2, max_buses + 1))
    lines = ["New Circuit.rand basekv=4.16 pu=1.0 phases=3 bus1=b0"]
    # one linecode per phase count
    for n in (1, 2, 3):
        r = rng.uniform(0.2, 0.6, size=(n, n))
        x = rng.uniform(0.4, 1.2, size=(n, n))
        r = 0.5 * (r + r.T) * 0.3 + np.eye(n) * 0.4
        x = 0.5 * (x + x.T) * 0.3 + np.eye(n) * 0.8
        fmt = lambda m: "(" + " | ".join(" ".join(f"{m[i, j]:.6f}" for j in range(i + 1)) for i in range(n)) + ")"
        lines.append(f"New LineCode.c{n} nphases={n} units=mi rmatrix={fmt(r)} xmatrix={fmt(x)}")
    phases = {"b0": (1, 2, 3)}
    for k in range(1, n_bus):
        parent = f"b{int(rng.integers(0, k))}"
        avail = phases[parent]
        n = int(rng.integers(1, len(avail) + 1))
        ph = tuple(sorted(rng.choice(avail, size=n, replace=False).tolist()))
        phases[f"b{k}"] = ph
        term = ".".join(map(str, ph))
        if n == 3 and rng.random() < 0.3:
            tap = 1 + 0.00625 * int(rng.integers(-16, 17))
            lines.append(f"New Transformer.t{k} phases=3 windings=2 buses=({parent} b{k}) kvs=(4.16 4.16) "
                         f"kvas=(2000 2000) xhl={rng.uniform(1, 6):.4f} %rs=(0.4 0.4) taps=(1.0 {tap:.5f})")
        else:
            lines.append(f"New Line.l{k} phases={n} bus1={parent}.{term} bus2=b{k}.{term} linecode=c{n} "
                         f"length={rng.uniform(0.05, 0.5):.4f} units=mi")
        for p in ph:
            if rng.random() < 0.7:
                lines.append(f"New Load.d{k}_{p} bus1=b{k}.{p} phases=1 kW={rng.uniform(10, 300):.3f} "
                             f"kvar={rng.uniform(-20, 150):.3f}")
    return "\n".join(lines) + "\n"


def newton_solve(g: MultiGraph, spec: CircuitSpec, tol: float = 1e-13, max_iter: int = 50) -> np.ndarray:
    """Nodal Newton-Raphson in rectangular coordinates on the bus network.

    Demand is taken straight from the circuit records in kW / S_base, not from
    the multigraph load nodes.  Returns (N, 3) complex bus voltages.
    """
    buses = [n for n in g.nodes if n.kind != NodeKind.LOAD]
    index = {}
    for n in buses:
        for k in range(3):
            if n.phases[k]:
                index[(n.id, k)] = len(index)
    m = len(index)
    y = np.zeros((m, m), dtype=complex)
    for b, br in enumerate(g.branches):
        ph = br.phases
        t = g.branch_tap(b)
        yb = np.linalg.inv(br.z[np.ix_(ph, ph)])
        fi = [index[(br.from_node, k)] for k in ph]
        ti = [index[(br.to_node, k)] for k in ph]
        y[np.ix_(fi, fi)] += yb / t**2
        y[np.ix_(fi, ti)] -= yb / t
        y[np.ix_(ti, fi)] -= yb / t
        y[np.ix_(ti, ti)] += yb

    by_name = {n.name: n.id for n in buses}
    demand = np.zeros(m, dtype=complex)
    for ld in spec.loads:
        bus = by_name[ld.bus.bus_name]
        for k in range(3):
            if ld.p_kw[k] or ld.q_kvar[k]:
                demand[index[(bus, k)]] += (ld.p_kw[k] + 1j * ld.q_kvar[k]) / g.s_base_kva
    for cap, on in zip(spec.capacitors, g.control.cap_states):
        if on:
            bus = by_name[cap.bus.bus_name]
            for k in range(3):
                if cap.q_kvar[k]:
                    demand[index[(bus, k)]] -= 1j * cap.q_kvar[k] / g.s_base_kva

    src = [index[(g.substation, k)] for k in range(3)]
    unk = [i for i in range(m) if i not in src]
    v = np.ones(m, dtype=complex)
    # flat start with the phase angle of each node's phase
    for (node, k), i in index.items():
        v[i] = g.source_pu * np.exp(1j * SOURCE_ANGLES[k])
    yuu = y[np.ix_(unk, unk)]
    for _ in range(max_iter):
        i_inj = y @ v
        f = v[unk] * np.conj(i_inj[unk]) + demand[unk]
        if np.max(np.abs(f), initial=0.0) < tol:
            break
        a = np.diag(np.conj(i_inj[unk]))  # d f / d V
        bm = np.diag(v[unk]) @ np.conj(yuu)  # d f / d conj(V)
        jx = a + bm
        jy = 1j * (a - bm)
        jac = np.block([[jx.real, jy.real], [jx.imag, jy.imag]])
        step = np.linalg.solve(jac, -np.concatenate([f.real, f.imag]))
        v[unk] += step[: len(unk)] + 1j * step[len(unk):]
    else:
        raise RuntimeError("newton oracle did not converge")
    out = np.zeros((len(g.nodes), 3), dtype=complex)
    for (node, k), i in index.items():
        out[node, k] = v[i]
    return out


def two_bus_closed_form(vs: float, r: float, x: float, p: float, q: float) -> float:
    """Receiving-end |V| of a single-phase line from the biquadratic in |V|^2."""
    b = vs**2 - 2.0 * (p * r + q * x)
    c = (p**2 + q**2) * (r**2 + x**2)
    u = (b + math.sqrt(b * b - 4.0 * c)) / 2.0
    return math.sqrt(u)
