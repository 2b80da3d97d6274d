"""Per-phase multigraph embedding of a distribution circuit.

Node 0 is always the substation (the circuit's source bus), followed by one
node per bus and one node per load.  Every branch contributes one edge per
phase it carries; each load hangs off its bus through zero-impedance edges
on its own phases.
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property

import numpy as np

from .dss import CircuitError, CircuitSpec, line_impedance_ohm

S_BASE_KVA = 1000.0
TAP_STEP = 0.00625
TAP_LIMIT = 16
F_NODE = 9
F_EDGE = 3
GRAPH_SCHEMA = "multigraph/1"


class NodeKind(IntEnum):
    SUBSTATION = 0
    BUS = 1
    LOAD = 2


class EdgeKind(IntEnum):
    LINE = 0
    TRANSFORMER = 1


def tap_ratio(position: int) -> float:
    return 1.0 + TAP_STEP * position


def tap_position(ratio: float) -> int:
    pos = int(round((ratio - 1.0) / TAP_STEP))
    return max(-TAP_LIMIT, min(TAP_LIMIT, pos))


@dataclass(frozen=True)
class ControlState:
    cap_states: tuple[int, ...] = ()
    tap_positions: tuple[int, ...] = ()

    def __post_init__(self):
        if any(s not in (0, 1) for s in self.cap_states):
            raise ValueError(f"capacitor states must be 0/1, got {self.cap_states}")
        if any(not -TAP_LIMIT <= int(t) <= TAP_LIMIT for t in self.tap_positions):
            raise ValueError(f"tap positions must lie in [-{TAP_LIMIT}, {TAP_LIMIT}], got {self.tap_positions}")

    def vector(self) -> np.ndarray:
        """Input of the state encoder: cap states then taps scaled to [-1, 1]."""
        return np.array([*self.cap_states, *(t / TAP_LIMIT for t in self.tap_positions)], dtype=float)

    @classmethod
    def default(cls, spec: CircuitSpec) -> "ControlState":
        return cls(
            cap_states=tuple(int(c.initial_state) for c in spec.capacitors),
            tap_positions=tuple(tap_position(t.tap_ratio) for t in spec.transformers),
        )


@dataclass(frozen=True)
class GridNode:
    id: int
    kind: NodeKind
    name: str
    phases: tuple[bool, bool, bool]
    p: tuple[float, float, float] = (0.0, 0.0, 0.0)  # pu on S_base
    q: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bus: int = -1  # attachment bus for load nodes
    base_kv: float = 0.0  # line-to-line


@dataclass(frozen=True)
class GridEdge:
    id: int
    u: int
    v: int
    phase: int  # 0=a, 1=b, 2=c
    kind: EdgeKind
    tap: float
    branch: int  # owning branch, -1 for load attachments
    row: int  # row/col of this phase in the branch impedance matrix

    def __post_init__(self):
        if self.u == self.v:
            raise ValueError(f"edge {self.id}: endpoints must differ")


@dataclass(frozen=True, eq=False)
class BranchModel:
    name: str
    kind: EdgeKind
    from_node: int
    to_node: int
    mask: tuple[bool, bool, bool]
    z: np.ndarray  # 3x3 complex pu, zero rows/cols on absent phases
    tap_index: int = -1  # index into ControlState.tap_positions

    @property
    def phases(self) -> list[int]:
        return [k for k in range(3) if self.mask[k]]


@dataclass(frozen=True)
class CapacitorModel:
    name: str
    node: int
    q: tuple[float, float, float]  # pu at rated state


@dataclass(frozen=True, eq=False)
class MultiGraph:
    nodes: tuple[GridNode, ...]
    edges: tuple[GridEdge, ...]
    branches: tuple[BranchModel, ...]
    capacitors: tuple[CapacitorModel, ...]
    control: ControlState
    s_base_kva: float = S_BASE_KVA
    source_pu: float = 1.0
    name: str = ""

    substation = 0

    def branch_tap(self, b: int) -> float:
        br = self.branches[b]
        return tap_ratio(self.control.tap_positions[br.tap_index]) if br.tap_index >= 0 else 1.0

    @cached_property
    def features(self) -> tuple[np.ndarray, np.ndarray]:
        return _feature_matrices(self)

    @cached_property
    def topology_hash(self) -> str:
        skeleton = [(n.kind.value, n.name, n.phases) for n in self.nodes]
        skeleton += [(e.u, e.v, e.phase, e.kind.value, e.branch) for e in self.edges]
        return hashlib.sha256(json.dumps(skeleton).encode()).hexdigest()[:16]

    def with_state(self, control: ControlState) -> "MultiGraph":
        _check_state(control, len(self.capacitors), sum(b.tap_index >= 0 for b in self.branches))
        edges = tuple(
            replace(e, tap=tap_ratio(control.tap_positions[self.branches[e.branch].tap_index]))
            if e.kind == EdgeKind.TRANSFORMER else e
            for e in self.edges
        )
        return replace(self, edges=edges, control=control)

    def with_loads(self, p: np.ndarray, q: np.ndarray) -> "MultiGraph":
        """Replace per-node P/Q (N x 3 arrays, pu); only load nodes may be nonzero."""
        nodes = []
        for n in self.nodes:
            if n.kind == NodeKind.LOAD:
                mask = np.array(n.phases, dtype=float)
                n = replace(n, p=tuple(map(float, p[n.id] * mask)), q=tuple(map(float, q[n.id] * mask)))
            nodes.append(n)
        return replace(self, nodes=tuple(nodes))

    def as_batch(self) -> "GraphBatch":
        return _single_batch(self)

    def to_json(self) -> dict:
        return {
            "schema": GRAPH_SCHEMA,
            "name": self.name,
            "s_base_kva": self.s_base_kva,
            "source_pu": self.source_pu,
            "nodes": [
                {"id": n.id, "kind": n.kind.name.lower(), "name": n.name, "phases": list(n.phases),
                 "p": list(n.p), "q": list(n.q), "bus": n.bus, "base_kv": n.base_kv}
                for n in self.nodes
            ],
            "edges": [
                {"id": e.id, "u": e.u, "v": e.v, "phase": e.phase, "kind": int(e.kind), "tap": e.tap,
                 "branch": e.branch, "row": e.row}
                for e in self.edges
            ],
            "branches": [
                {"name": b.name, "kind": int(b.kind), "from": b.from_node, "to": b.to_node, "mask": list(b.mask),
                 "z_re": b.z.real.tolist(), "z_im": b.z.imag.tolist(), "tap_index": b.tap_index}
                for b in self.branches
            ],
            "capacitors": [{"name": c.name, "node": c.node, "q": list(c.q)} for c in self.capacitors],
            "control": {"cap_states": list(self.control.cap_states), "tap_positions": list(self.control.tap_positions)},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MultiGraph":
        if doc.get("schema") != GRAPH_SCHEMA:
            raise ValueError(f"unsupported graph schema {doc.get('schema')!r}")
        nodes = tuple(
            GridNode(id=n["id"], kind=NodeKind[n["kind"].upper()], name=n["name"], phases=tuple(n["phases"]),
                     p=tuple(n["p"]), q=tuple(n["q"]), bus=n["bus"], base_kv=n["base_kv"])
            for n in doc["nodes"]
        )
        edges = tuple(
            GridEdge(id=e["id"], u=e["u"], v=e["v"], phase=e["phase"], kind=EdgeKind(e["kind"]), tap=e["tap"],
                     branch=e["branch"], row=e["row"])
            for e in doc["edges"]
        )
        branches = tuple(
            BranchModel(name=b["name"], kind=EdgeKind(b["kind"]), from_node=b["from"], to_node=b["to"],
                        mask=tuple(b["mask"]), z=np.array(b["z_re"]) + 1j * np.array(b["z_im"]),
                        tap_index=b["tap_index"])
            for b in doc["branches"]
        )
        caps = tuple(CapacitorModel(name=c["name"], node=c["node"], q=tuple(c["q"])) for c in doc["capacitors"])
        control = ControlState(tuple(doc["control"]["cap_states"]), tuple(doc["control"]["tap_positions"]))
        return cls(nodes=nodes, edges=edges, branches=branches, capacitors=caps, control=control,
                   s_base_kva=doc["s_base_kva"], source_pu=doc["source_pu"], name=doc.get("name", ""))


def _check_state(state: ControlState, n_caps: int, n_taps: int) -> None:
    if len(state.cap_states) != n_caps or len(state.tap_positions) != n_taps:
        raise ValueError(
            f"control state has {len(state.cap_states)} caps/{len(state.tap_positions)} taps, "
            f"circuit has {n_caps}/{n_taps}"
        )


def kw_to_pu(kw: float, s_base_kva: float = S_BASE_KVA) -> float:
    return kw / s_base_kva


def pu_to_kw(pu: float, s_base_kva: float = S_BASE_KVA) -> float:
    return pu * s_base_kva


def _bus_bases(spec: CircuitSpec) -> dict[str, float]:
    """Line-to-line kV base per bus, propagated from the source through transformer ratings."""
    adj: dict[str, list[tuple[str, float]]] = {}
    for ln in spec.lines:
        adj.setdefault(ln.bus1.bus_name, []).append((ln.bus2.bus_name, 1.0))
        adj.setdefault(ln.bus2.bus_name, []).append((ln.bus1.bus_name, 1.0))
    for t in spec.transformers:
        adj.setdefault(t.bus1.bus_name, []).append((t.bus2.bus_name, t.kv2 / t.kv1))
        adj.setdefault(t.bus2.bus_name, []).append((t.bus1.bus_name, t.kv1 / t.kv2))
    base = {spec.source.bus: spec.source.base_kv}
    queue = deque([spec.source.bus])
    while queue:
        b = queue.popleft()
        for nb, ratio in adj.get(b, ()):
            if nb not in base:
                base[nb] = base[b] * ratio
                queue.append(nb)
    return base


def build_multigraph(spec: CircuitSpec, state: ControlState | None = None,
                     s_base_kva: float = S_BASE_KVA) -> MultiGraph:
    """Embed a circuit as a per-phase multigraph with pu quantities."""
    if state is None:
        state = ControlState.default(spec)
    _check_state(state, len(spec.capacitors), len(spec.transformers))
    bases = _bus_bases(spec)
    s_base_mva = s_base_kva / 1000.0

    branch_specs = [("transformer", i, t) for i, t in enumerate(spec.transformers)]
    branch_specs += [("line", i, ln) for i, ln in enumerate(spec.lines)]

    bus_index: dict[str, int] = {spec.source.bus: 0}
    bus_phases: dict[str, set[int]] = {spec.source.bus: {0, 1, 2}}
    for _, _, br in branch_specs:
        for ref in (br.bus1, br.bus2):
            if ref.bus_name not in bus_index:
                bus_index[ref.bus_name] = len(bus_index)
            bus_phases.setdefault(ref.bus_name, set()).update(p - 1 for p in ref.phases)
    for name in bus_index:
        if name not in bases:
            raise CircuitError(f"disconnected bus {name!r}: not reachable from the source")

    nodes: list[GridNode] = []
    for name, idx in bus_index.items():
        kind = NodeKind.SUBSTATION if idx == 0 else NodeKind.BUS
        phases = tuple(k in bus_phases[name] for k in range(3))
        nodes.append(GridNode(id=idx, kind=kind, name=name, phases=phases, base_kv=bases[name]))

    branches: list[BranchModel] = []
    edges: list[GridEdge] = []
    for kind_name, i, br in branch_specs:
        u, v = bus_index[br.bus1.bus_name], bus_index[br.bus2.bus_name]
        order = [p - 1 for p in br.bus1.phases]
        mask = tuple(k in order for k in range(3))
        z = np.zeros((3, 3), dtype=complex)
        if kind_name == "line":
            z_base = bases[br.bus1.bus_name] ** 2 / (3.0 * s_base_mva)
            z_small = line_impedance_ohm(spec, br) / z_base
            kind, tap, tap_index = EdgeKind.LINE, 0.0, -1
        else:
            z_ohm = complex(br.r_pu, br.x_pu) * br.kv2**2 * 1000.0 / br.kva
            z_base = bases[br.bus2.bus_name] ** 2 / (3.0 * s_base_mva)
            z_small = np.eye(len(order)) * (z_ohm / z_base)
            kind, tap, tap_index = EdgeKind.TRANSFORMER, tap_ratio(state.tap_positions[i]), i
        for a, pa in enumerate(order):
            for b, pb in enumerate(order):
                z[pa, pb] = z_small[a, b]
        b_idx = len(branches)
        branches.append(BranchModel(name=f"{kind_name}.{br.name}", kind=kind, from_node=u, to_node=v,
                                    mask=mask, z=z, tap_index=tap_index))
        for row, ph in enumerate(order):
            edges.append(GridEdge(id=len(edges), u=u, v=v, phase=ph, kind=kind, tap=tap, branch=b_idx, row=row))

    for ld in spec.loads:
        bus = bus_index[ld.bus.bus_name]
        for p in ld.bus.phases:
            if not nodes[bus].phases[p - 1]:
                raise CircuitError(f"load {ld.name}: phase {'ABC'[p - 1]} not present at bus {ld.bus.bus_name}")
        node_id = len(nodes)
        phases = tuple(k + 1 in ld.bus.phases for k in range(3))
        nodes.append(GridNode(
            id=node_id, kind=NodeKind.LOAD, name=ld.name, phases=phases,
            p=tuple(kw_to_pu(x, s_base_kva) for x in ld.p_kw),
            q=tuple(kw_to_pu(x, s_base_kva) for x in ld.q_kvar),
            bus=bus, base_kv=nodes[bus].base_kv,
        ))
        for p in ld.bus.phases:
            edges.append(GridEdge(id=len(edges), u=bus, v=node_id, phase=p - 1, kind=EdgeKind.LINE, tap=0.0,
                                  branch=-1, row=-1))

    caps = []
    for c in spec.capacitors:
        bus = bus_index[c.bus.bus_name]
        for p in c.bus.phases:
            if not nodes[bus].phases[p - 1]:
                raise CircuitError(f"capacitor {c.name}: phase {'ABC'[p - 1]} not present at bus {c.bus.bus_name}")
        caps.append(CapacitorModel(name=c.name, node=bus, q=tuple(kw_to_pu(x, s_base_kva) for x in c.q_kvar)))

    g = MultiGraph(nodes=tuple(nodes), edges=tuple(edges), branches=tuple(branches), capacitors=tuple(caps),
                   control=state, s_base_kva=s_base_kva, source_pu=spec.source.pu, name=spec.source.name)
    _check_connected(g)
    return g


def _check_connected(g: MultiGraph) -> None:
    seen = {0}
    adj: dict[int, list[int]] = {}
    for e in g.edges:
        adj.setdefault(e.u, []).append(e.v)
        adj.setdefault(e.v, []).append(e.u)
    stack = [0]
    while stack:
        for nb in adj.get(stack.pop(), ()):
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != len(g.nodes):
        missing = next(n.name for n in g.nodes if n.id not in seen)
        raise CircuitError(f"disconnected bus {missing!r}")


def _feature_matrices(g: MultiGraph) -> tuple[np.ndarray, np.ndarray]:
    x_n = np.zeros((len(g.nodes), F_NODE))
    for n in g.nodes:
        x_n[n.id, 0:3] = n.p
        x_n[n.id, 3:6] = n.q
        x_n[n.id, 6 + int(n.kind)] = 1.0
    x_e = np.zeros((len(g.edges), F_EDGE))
    for e in g.edges:
        x_e[e.id] = (int(e.kind), e.tap, e.phase)
    return x_n, x_e


def feature_matrices(g: MultiGraph) -> tuple[np.ndarray, np.ndarray]:
    """Node features ``[P_abc, Q_abc, onehot(kind)]`` and raw edge features ``[kind, tap, phase]``."""
    x_n, x_e = g.features
    return x_n.copy(), x_e.copy()


def phase_adjacency(g: MultiGraph, phase: int) -> np.ndarray:
    """Symmetric boolean adjacency of the edges carrying ``phase`` (0, 1, 2)."""
    m = np.zeros((len(g.nodes), len(g.nodes)), dtype=bool)
    for e in g.edges:
        if e.phase == phase:
            m[e.u, e.v] = m[e.v, e.u] = True
    return m


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GraphBatch:
    x_n: np.ndarray  # (N, 9)
    x_e: np.ndarray  # (E, 3)
    edge_index: np.ndarray  # (2, E) int, batch coordinates
    node_offsets: np.ndarray  # (G+1,)
    edge_offsets: np.ndarray  # (G+1,)
    states: tuple[ControlState, ...]
    node_kind: np.ndarray  # (N,) int
    node_phases: np.ndarray  # (N, 3) bool
    substation: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "substation", self.node_offsets[:-1].copy())

    @property
    def num_graphs(self) -> int:
        return len(self.node_offsets) - 1

    @property
    def num_nodes(self) -> int:
        return len(self.x_n)

    @cached_property
    def node_graph(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_graphs), np.diff(self.node_offsets))

    @cached_property
    def output_nodes(self) -> np.ndarray:
        """Indices of bus and load nodes, i.e. the rows of the voltage output."""
        return np.flatnonzero(self.node_kind != NodeKind.SUBSTATION)

    @cached_property
    def state_matrix(self) -> np.ndarray:
        dims = {len(s.vector()) for s in self.states}
        if len(dims) != 1:
            raise ValueError("graphs in a batch have different control-state layouts")
        return np.stack([s.vector() for s in self.states]) if self.states else np.zeros((0, 0))

    def as_batch(self) -> "GraphBatch":
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, GraphBatch):
            return NotImplemented
        return (
            np.array_equal(self.x_n, other.x_n) and np.array_equal(self.x_e, other.x_e)
            and np.array_equal(self.edge_index, other.edge_index)
            and np.array_equal(self.node_offsets, other.node_offsets)
            and np.array_equal(self.edge_offsets, other.edge_offsets)
            and self.states == other.states
            and np.array_equal(self.node_kind, other.node_kind)
            and np.array_equal(self.node_phases, other.node_phases)
        )

    __hash__ = None

    def to_json(self) -> dict:
        return {
            "schema": "graph-batch/1",
            "x_n": self.x_n.tolist(),
            "x_e": self.x_e.tolist(),
            "edge_index": self.edge_index.tolist(),
            "node_offsets": self.node_offsets.tolist(),
            "edge_offsets": self.edge_offsets.tolist(),
            "substation": self.substation.tolist(),
            "node_kind": self.node_kind.tolist(),
            "states": [{"cap_states": list(s.cap_states), "tap_positions": list(s.tap_positions)} for s in self.states],
        }


def _single_batch(g: MultiGraph) -> GraphBatch:
    x_n, x_e = g.features
    edge_index = np.array([[e.u for e in g.edges], [e.v for e in g.edges]], dtype=np.int64).reshape(2, -1)
    return GraphBatch(
        x_n=x_n, x_e=x_e, edge_index=edge_index,
        node_offsets=np.array([0, len(g.nodes)]), edge_offsets=np.array([0, len(g.edges)]),
        states=(g.control,),
        node_kind=np.array([int(n.kind) for n in g.nodes]),
        node_phases=np.array([n.phases for n in g.nodes], dtype=bool).reshape(-1, 3),
    )


def make_batch(graphs) -> GraphBatch:
    """Disjoint union of graphs (MultiGraph or GraphBatch items)."""
    parts = [g.as_batch() for g in graphs]
    if not parts:
        raise ValueError("cannot batch an empty list of graphs")
    if len(parts) == 1:
        return parts[0]
    n_counts = np.array([p.num_nodes for p in parts])
    shifts = np.concatenate([[0], np.cumsum(n_counts)[:-1]])
    node_offsets = [np.array([0])]
    edge_offsets = [np.array([0])]
    n_total = e_total = 0
    for p in parts:
        node_offsets.append(p.node_offsets[1:] + n_total)
        edge_offsets.append(p.edge_offsets[1:] + e_total)
        n_total += p.num_nodes
        e_total += p.x_e.shape[0]
    return GraphBatch(
        x_n=np.concatenate([p.x_n for p in parts]),
        x_e=np.concatenate([p.x_e for p in parts]),
        edge_index=np.concatenate([p.edge_index + s for p, s in zip(parts, shifts)], axis=1),
        node_offsets=np.concatenate(node_offsets),
        edge_offsets=np.concatenate(edge_offsets),
        states=tuple(s for p in parts for s in p.states),
        node_kind=np.concatenate([p.node_kind for p in parts]),
        node_phases=np.concatenate([p.node_phases for p in parts]),
    )


def split_batch(batch: GraphBatch) -> list[GraphBatch]:
    """Inverse of :func:`make_batch`: one single-graph batch per member."""
    out = []
    for k in range(batch.num_graphs):
        n0, n1 = batch.node_offsets[k], batch.node_offsets[k + 1]
        e0, e1 = batch.edge_offsets[k], batch.edge_offsets[k + 1]
        out.append(GraphBatch(
            x_n=batch.x_n[n0:n1], x_e=batch.x_e[e0:e1], edge_index=batch.edge_index[:, e0:e1] - n0,
            node_offsets=np.array([0, n1 - n0]), edge_offsets=np.array([0, e1 - e0]),
            states=(batch.states[k],), node_kind=batch.node_kind[n0:n1], node_phases=batch.node_phases[n0:n1],
        ))
    return out
