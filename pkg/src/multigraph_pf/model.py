"""Multigraph GNN surrogate: encoders, generalized-convolution stack, heads.

Layer update for node ``i`` with incoming half-edges ``j -> i``::

    m_ij = relu(h_j + e_ij) + eps
    m_i  = (mean_j m_ij ** p) ** (1 / p)
    h_i <- mlp(h_i + s * |h_i| * m_i / |m_i|) + h_i
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .grid import F_NODE, GraphBatch

EPS_MSG = 1e-7
STD_FLOOR = 1e-8
CHECKPOINT_SCHEMA = "pfmultinet-checkpoint/1"
EDGE_INPUT_DIM = 6  # onehot(kind, 2) + onehot(phase, 3) + tap


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    state_dim: int = 32
    num_layers: int = 4
    mlp_depth: int = 2
    p_min: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden_dim, self.state_dim, self.num_layers, self.mlp_depth) < 1:
            raise ValueError("hidden_dim, state_dim, num_layers and mlp_depth must be >= 1")


@dataclass
class ForwardOutput:
    y_b: Tensor  # (bus + load nodes, 6): V_abc, angle_abc
    y_g: Tensor  # (graphs, 6): P_abc, Q_abc


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, name: str, relu_after: bool):
        bound = math.sqrt((6.0 if relu_after else 3.0) / max(n_in, 1))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), f"{name}.bias")

    def __call__(self, x) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class MLP:
    def __init__(self, rng, n_in: int, n_hidden: int, n_out: int, depth: int, name: str):
        dims = [n_in] + [n_hidden] * (depth - 1) + [n_out]
        self.layers = [
            Linear(rng, dims[k], dims[k + 1], f"{name}.{k}", relu_after=k < depth - 1) for k in range(depth)
        ]

    def __call__(self, x) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def message_construct(h_src: Tensor, e: Tensor) -> Tensor:
    """Per half-edge message ``relu(h_j + e_ij) + eps``, strictly positive."""
    return ad.add(ad.relu(ad.add(h_src, e)), EPS_MSG)


def power_mean_aggregate(messages: Tensor, dst: np.ndarray, num_nodes: int, p) -> Tensor:
    """Generalized mean of positive messages per destination; isolated nodes get 0.

    Messages are divided by their per-destination max (min for p < 0) before
    the power so that large |p| cannot underflow or overflow.  The mean is
    homogeneous of degree one, so holding that scale constant keeps the
    gradient exact.
    """
    p = ad.as_tensor(p)
    vals = messages.value
    if float(p.value) >= 0:
        scale = np.zeros((num_nodes,) + vals.shape[1:])
        np.maximum.at(scale, dst, vals)
    else:
        scale = np.full((num_nodes,) + vals.shape[1:], np.inf)
        np.minimum.at(scale, dst, vals)
    present = np.unique(dst)
    scaled = ad.div(messages, scale[dst])
    mean_p = ad.segment_mean(ad.power(scaled, p), dst, num_nodes)
    rooted = ad.power(ad.gather_rows(mean_p, present), ad.div(1.0, p))
    return ad.segment_sum(ad.mul(rooted, scale[present]), present, num_nodes)


def message_normalize_update(h: Tensor, m: Tensor, s, mlp) -> Tensor:
    """``mlp(h + s * |h| * m / |m|) + h``; the normalized term is 0 where ``m`` is 0."""
    h_norm = ad.row_norm(h)
    m_norm = ad.row_norm(m)
    safe = ad.add(m_norm, (m_norm.value == 0).astype(float))
    scaled = ad.mul(ad.mul(s, h_norm), ad.div(m, safe))
    return ad.add(mlp(ad.add(h, scaled)), h)


class GenConvLayer:
    def __init__(self, rng, d: int, depth: int, name: str):
        self.mlp = MLP(rng, d, d, d, depth, f"{name}.mlp")
        self.p = Parameter(1.0, f"{name}.p")
        self.s = Parameter(1.0, f"{name}.s")

    def __call__(self, h: Tensor, e_half: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
        msg = message_construct(ad.gather_rows(h, src), e_half)
        agg = power_mean_aggregate(msg, dst, h.shape[0], self.p)
        return message_normalize_update(h, agg, self.s, self.mlp)

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters() + [self.p, self.s]


def edge_inputs(x_e: np.ndarray) -> np.ndarray:
    """Raw ``[kind, tap, phase]`` rows -> ``onehot(kind) | onehot(phase) | tap``."""
    kind = x_e[:, 0].astype(int)
    phase = x_e[:, 2].astype(int)
    if np.any((phase < 0) | (phase > 2)) or np.any(x_e[:, 2] != phase):
        raise ValueError("invalid phase code in edge features")
    if np.any((kind < 0) | (kind > 1)) or np.any(x_e[:, 0] != kind):
        raise ValueError("invalid edge kind in edge features")
    out = np.zeros((len(x_e), EDGE_INPUT_DIM))
    out[np.arange(len(x_e)), kind] = 1.0
    out[np.arange(len(x_e)), 2 + phase] = 1.0
    out[:, 5] = x_e[:, 1]
    return out


class PowerFlowMultiNet:
    """Model parameters plus the forward pass."""

    def __init__(self, config: ModelConfig, state_input_dim: int):
        self.config = config
        self.state_input_dim = state_input_dim
        rng = np.random.default_rng(config.seed)
        d, ds, depth = config.hidden_dim, config.state_dim, config.mlp_depth
        self.state_encoder = MLP(rng, state_input_dim, ds, ds, depth, "state_encoder")
        self.edge_encoder = MLP(rng, EDGE_INPUT_DIM, d, d, depth, "edge_encoder")
        self.node_encoder = MLP(rng, F_NODE, d, d, depth, "node_encoder")
        self.layers = [GenConvLayer(rng, d, depth, f"layer{k}") for k in range(config.num_layers)]
        self.node_head = Linear(rng, d, 6, "node_head", relu_after=False)
        self.substation_head = Linear(rng, d + ds, 6, "substation_head", relu_after=False)
        self.node_mean: np.ndarray | None = None
        self.node_std: np.ndarray | None = None

    def parameters(self) -> list[Parameter]:
        params = self.state_encoder.parameters() + self.edge_encoder.parameters() + self.node_encoder.parameters()
        for layer in self.layers:
            params += layer.parameters()
        return params + self.node_head.parameters() + self.substation_head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def project(self) -> None:
        """Keep every aggregation exponent at least ``p_min`` away from zero."""
        for layer in self.layers:
            pv = float(layer.p.value)
            if abs(pv) < self.config.p_min:
                layer.p.value[...] = math.copysign(self.config.p_min, pv) if pv != 0 else self.config.p_min

    def fit_normalization(self, x_n: np.ndarray) -> None:
        self.node_mean = x_n.mean(axis=0)
        self.node_std = x_n.std(axis=0)

    # -- encoders ---------------------------------------------------------
    def encode_state(self, states: np.ndarray) -> Tensor:
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[None, :]
        if states.shape[1] != self.state_input_dim:
            raise ValueError(f"state vector has length {states.shape[1]}, expected {self.state_input_dim}")
        return self.state_encoder(Tensor(states))

    def encode_edges(self, x_e: np.ndarray) -> Tensor:
        return self.edge_encoder(Tensor(edge_inputs(x_e)))

    def encode_nodes(self, x_n: np.ndarray) -> Tensor:
        if self.node_mean is None or self.node_std is None:
            raise ValueError("normalization statistics missing: call fit_normalization first")
        z = (x_n - self.node_mean) / np.maximum(self.node_std, STD_FLOOR)
        return self.node_encoder(Tensor(z))

    # -- forward ----------------------------------------------------------
    def forward(self, batch: GraphBatch) -> ForwardOutput:
        u, v = batch.edge_index
        n_edges = u.shape[0]
        src = np.concatenate([u, v])
        dst = np.concatenate([v, u])
        e = self.encode_edges(batch.x_e)
        e_half = ad.gather_rows(e, np.concatenate([np.arange(n_edges), np.arange(n_edges)]))
        h = self.encode_nodes(batch.x_n)
        for layer in self.layers:
            h = layer(h, e_half, src, dst)
        y_b = self.node_head(ad.gather_rows(h, batch.output_nodes))
        s_emb = self.encode_state(batch.state_matrix)
        y_g = self.substation_head(ad.concat([ad.gather_rows(h, batch.substation), s_emb], axis=1))
        return ForwardOutput(y_b=y_b, y_g=y_g)

    __call__ = forward

    # -- checkpoints ------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "schema": CHECKPOINT_SCHEMA,
            "config": asdict(self.config),
            "state_input_dim": self.state_input_dim,
            "normalization": {
                "mean": None if self.node_mean is None else self.node_mean.tolist(),
                "std": None if self.node_std is None else self.node_std.tolist(),
            },
            "parameters": {
                p.name: {"shape": list(p.shape), "values": p.value.reshape(-1).tolist()} for p in self.parameters()
            },
            "aggregation": [{"p": float(l.p.value), "s": float(l.s.value)} for l in self.layers],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PowerFlowMultiNet":
        if doc.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {doc.get('schema')!r}")
        model = cls(ModelConfig(**doc["config"]), doc["state_input_dim"])
        norm = doc["normalization"]
        if norm["mean"] is not None:
            model.node_mean = np.array(norm["mean"], dtype=float)
            model.node_std = np.array(norm["std"], dtype=float)
        named = model.named_parameters()
        for name, entry in doc["parameters"].items():
            p = named[name]
            p.value = np.array(entry["values"], dtype=float).reshape(entry["shape"])
            p.grad = np.zeros_like(p.value)
        return model

    def save(self, path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PowerFlowMultiNet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))
