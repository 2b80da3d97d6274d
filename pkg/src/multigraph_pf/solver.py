"""Backward/forward sweep power flow for radial unbalanced feeders.

Transformers are an ideal tap ``t`` followed by a series impedance on the
secondary side, so a branch maps ``V_child = V_parent / t - Z I`` and
refers its current to the primary as ``I / t``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .grid import MultiGraph, NodeKind

SOLUTION_SCHEMA = "pf-solution/1"
SOURCE_ANGLES = (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)


class PowerFlowError(RuntimeError):
    pass


class MeshError(PowerFlowError):
    def __init__(self, branch: str):
        self.branch = branch
        super().__init__(f"mesh unsupported: branch {branch!r} closes a cycle")


class ConvergenceError(PowerFlowError):
    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"power flow did not converge in {iterations} iterations (last |dV| = {residual:.3e})")


class VoltageCollapseError(PowerFlowError):
    def __init__(self, node: str):
        super().__init__(f"voltage collapse: zero voltage at {node!r}")


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-6
    max_iter: int = 100

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class OrientedBranch:
    branch: int
    parent: int
    child: int


@dataclass(frozen=True, eq=False)
class PFSolution:
    voltages: np.ndarray  # (N, 3) complex pu, every node; zero on absent phases
    p_sub: np.ndarray  # (3,) pu
    q_sub: np.ndarray  # (3,) pu
    branch_currents: np.ndarray  # (B, 3) complex pu, secondary side, oriented parent -> child
    iterations: int
    converged: bool
    residual: float

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.voltages)

    @property
    def v_angle(self) -> np.ndarray:
        ang = np.angle(self.voltages)
        return np.where(np.abs(self.voltages) > 0, ang, 0.0)

    def targets(self, g: MultiGraph) -> tuple[np.ndarray, np.ndarray]:
        """Substation ``[P_abc, Q_abc]`` and per bus/load node ``[V_abc, angle_abc]``."""
        y_g = np.concatenate([self.p_sub, self.q_sub])
        rows = [n.id for n in g.nodes if n.kind != NodeKind.SUBSTATION]
        y_b = np.concatenate([self.v_mag[rows], self.v_angle[rows]], axis=1)
        return y_g, y_b

    def to_json(self, g: MultiGraph) -> dict:
        buses = {}
        for n in g.nodes:
            if n.kind == NodeKind.LOAD:
                continue
            buses[n.name] = {
                ph: {"V_pu": float(self.v_mag[n.id, k]), "angle_rad": float(self.v_angle[n.id, k])}
                for k, ph in enumerate("abc") if n.phases[k]
            }
        return {
            "schema": SOLUTION_SCHEMA,
            "buses": buses,
            "substation": {
                ph: {"P_pu": float(self.p_sub[k]), "Q_pu": float(self.q_sub[k])} for k, ph in enumerate("abc")
            },
            "iterations": self.iterations,
            "converged": self.converged,
            "residual": self.residual,
        }


def radial_order(g: MultiGraph) -> list[OrientedBranch]:
    """Branches oriented away from the substation, parents before children.

    Ties are broken by branch declaration order.  A branch that closes a
    loop on any phase raises :class:`MeshError`.
    """
    parent = {(n.id, k): (n.id, k) for n in g.nodes for k in range(3)}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for br in g.branches:
        for k in br.phases:
            a, b = find((br.from_node, k)), find((br.to_node, k))
            if a == b:
                raise MeshError(br.name)
            parent[a] = b

    known = {(g.substation, k) for k in range(3)}
    pending = list(range(len(g.branches)))
    order: list[OrientedBranch] = []
    while pending:
        progressed = False
        rest = []
        for b in pending:
            br = g.branches[b]
            ph = br.phases
            if all((br.from_node, k) in known for k in ph):
                src, dst = br.from_node, br.to_node
            elif all((br.to_node, k) in known for k in ph):
                if br.tap_index >= 0:
                    raise PowerFlowError(f"transformer {br.name} is fed from its secondary side")
                src, dst = br.to_node, br.from_node
            else:
                rest.append(b)
                continue
            order.append(OrientedBranch(b, src, dst))
            known.update((dst, k) for k in ph)
            progressed = True
        if not progressed:
            raise PowerFlowError(f"branch {g.branches[rest[0]].name!r} is not connected to the substation")
        pending = rest
    return order


def source_voltages(g: MultiGraph) -> np.ndarray:
    return g.source_pu * np.exp(1j * np.array(SOURCE_ANGLES))


def net_demand(g: MultiGraph) -> np.ndarray:
    """Per node and phase: load S minus switched-in capacitor injection (pu)."""
    s = np.zeros((len(g.nodes), 3), dtype=complex)
    for n in g.nodes:
        if n.kind == NodeKind.LOAD:
            s[n.bus] += np.array(n.p) + 1j * np.array(n.q)
    for c, on in zip(g.capacitors, g.control.cap_states):
        if on:
            s[c.node] -= 1j * np.array(c.q)
    return s


class _Compiled:
    """Flat arrays for the sweep loops."""

    def __init__(self, g: MultiGraph):
        self.order = radial_order(g)
        self.n = len(g.nodes)
        self.energized = np.array([n.phases for n in g.nodes], dtype=bool)
        self.bus_of = np.array([n.bus if n.kind == NodeKind.LOAD else n.id for n in g.nodes])
        self.steps = []
        for ob in self.order:
            br = g.branches[ob.branch]
            ph = np.array(br.phases)
            z = br.z[np.ix_(ph, ph)]
            self.steps.append((ob.branch, ob.parent, ob.child, ph, z, g.branch_tap(ob.branch)))


def solve(g: MultiGraph, cfg: SolverConfig = SolverConfig()) -> PFSolution:
    """Backward/forward sweep from a flat start."""
    comp = _Compiled(g)
    s_net = net_demand(g)
    v_src = source_voltages(g)
    sub = g.substation
    demand_nodes = np.flatnonzero(np.any(s_net != 0, axis=1))

    v = np.where(comp.energized, v_src[None, :], 0.0).astype(complex)
    v[sub] = v_src
    residual = math.inf
    for it in range(1, cfg.max_iter + 1):
        _, branch_cur = _backward(comp, v, s_net, demand_nodes, g)
        v_new = v.copy()
        for b, par, child, ph, z, tap in comp.steps:
            v_new[child, ph] = v_new[par, ph] / tap - z @ branch_cur[b, ph]
        residual = float(np.max(np.abs(v_new - v))) if v.size else 0.0
        v = v_new
        if not np.all(np.isfinite(v)):
            raise ConvergenceError(it, math.inf)
        if residual < cfg.tolerance:
            # a small step is not enough on heavily loaded feeders; also require nodal balance
            trial = _finish(g, comp, v, s_net, demand_nodes, v_src, it, residual)
            if power_balance_residual(g, trial) < cfg.tolerance:
                return trial
    raise ConvergenceError(cfg.max_iter, residual)


def _finish(g, comp, v, s_net, demand_nodes, v_src, it, residual) -> PFSolution:
    node_cur, branch_cur = _backward(comp, v, s_net, demand_nodes, g)
    s_sub = v_src * np.conj(node_cur[g.substation])
    v_all = v[comp.bus_of] * comp.energized
    return PFSolution(voltages=v_all, p_sub=s_sub.real.copy(), q_sub=s_sub.imag.copy(), branch_currents=branch_cur,
                      iterations=it, converged=True, residual=residual)


def _backward(comp: _Compiled, v: np.ndarray, s_net: np.ndarray, demand_nodes: np.ndarray, g: MultiGraph):
    cur = np.zeros((comp.n, 3), dtype=complex)
    if demand_nodes.size:
        vd = v[demand_nodes]
        sd = s_net[demand_nodes]
        active = sd != 0
        if np.any(np.abs(vd[active]) == 0):
            bad = demand_nodes[np.argwhere(active & (np.abs(vd) == 0))[0][0]]
            raise VoltageCollapseError(g.nodes[bad].name)
        with np.errstate(divide="ignore", invalid="ignore"):
            cur[demand_nodes] = np.where(active, np.conj(sd / vd), 0.0)
    branch_cur = np.zeros((len(g.branches), 3), dtype=complex)
    for b, par, child, ph, _, tap in reversed(comp.steps):
        i_b = cur[child, ph]
        branch_cur[b, ph] = i_b
        cur[par, ph] += i_b / tap
    return cur, branch_cur


def power_balance_residual(g: MultiGraph, sol: PFSolution) -> float:
    """Max |S_injected - sum of branch flows| over non-source buses, from voltages alone."""
    v = sol.voltages
    mismatch = -net_demand(g)  # injection into each bus
    for b, br in enumerate(g.branches):
        ph = np.array(br.phases)
        t = g.branch_tap(b)
        z = br.z[np.ix_(ph, ph)]
        vf, vt = v[br.from_node, ph], v[br.to_node, ph]
        i = np.linalg.solve(z, vf / t - vt)  # secondary-side current, from -> to
        mismatch[br.from_node, ph] -= vf * np.conj(i / t)
        mismatch[br.to_node, ph] += vt * np.conj(i)
    rows = [n.id for n in g.nodes if n.kind == NodeKind.BUS]
    return float(np.max(np.abs(mismatch[rows]))) if rows else 0.0


def branch_losses(g: MultiGraph, sol: PFSolution) -> np.ndarray:
    """Per-phase series losses ``(Z I)_k conj(I_k)`` summed over branches (complex pu)."""
    loss = np.zeros(3, dtype=complex)
    for b, br in enumerate(g.branches):
        i = sol.branch_currents[b]
        loss += (br.z @ i) * np.conj(i)
    return loss


def solution_json_text(g: MultiGraph, sol: PFSolution) -> str:
    return json.dumps(sol.to_json(g), indent=2)
