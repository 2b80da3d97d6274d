"""Dataset generation by load mutation, training, metrics and timing."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dss import CapacitorDef, CircuitSpec
from .grid import (
    S_BASE_KVA,
    TAP_LIMIT,
    ControlState,
    GraphBatch,
    MultiGraph,
    build_multigraph,
    make_batch,
    tap_ratio,
)
from .io import atomic_write_text
from .model import ModelConfig, PowerFlowMultiNet
from .solver import PowerFlowError, SolverConfig, solve

log = logging.getLogger(__name__)

DATASET_SCHEMA = "pf-dataset/1"
FEATURE_SCHEMA_VERSION = 1
NSE_FLOOR = 1e-3
MAX_DISCARD_RATE = 0.10


class TrainingError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


class DiscardError(DatasetError):
    """Too many mutants failed to solve."""


# ---------------------------------------------------------------------------
# Load mutation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Uniform:
    delta: float

    def __post_init__(self):
        if not 0 <= self.delta < 1:
            raise ValueError("uniform mutation needs 0 <= delta < 1")

    def to_json(self) -> dict:
        return {"mode": "uniform", "delta": self.delta}


@dataclass(frozen=True)
class Timeseries:
    length: int = 96
    sigma: float = 0.05

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("time series length must be >= 1")
        if self.sigma < 0:
            raise ValueError("noise sigma must be >= 0")

    def to_json(self) -> dict:
        return {"mode": "timeseries", "length": self.length, "sigma": self.sigma}


def daily_profile(hour: np.ndarray | float) -> np.ndarray:
    """Synthetic residential demand shape: morning and evening peaks, range [0.3, 1.2]."""
    hour = np.asarray(hour, dtype=float) % 24.0
    morning = 0.6 * np.exp(-0.5 * ((hour - 8.0) / 1.5) ** 2)
    evening = np.exp(-0.5 * (np.minimum(np.abs(hour - 19.0), 24.0 - np.abs(hour - 19.0)) / 2.0) ** 2)
    return 0.3 + 0.9 * np.maximum(morning, evening)


def mutate_loads(spec: CircuitSpec, mode, rng: np.random.Generator) -> CircuitSpec:
    """Copy of ``spec`` with scaled loads and freshly sampled capacitor/tap states.

    Every capacitor gets a random on/off state.  Tap positions are drawn
    uniformly from -16..16 for transformers under a RegControl.
    """
    if isinstance(mode, Timeseries):
        step = int(rng.integers(mode.length))
        base = float(daily_profile(24.0 * step / mode.length))
    loads = []
    for ld in spec.loads:
        if isinstance(mode, Uniform):
            fp = rng.uniform(1 - mode.delta, 1 + mode.delta, size=3)
            fq = rng.uniform(1 - mode.delta, 1 + mode.delta, size=3)
        else:
            noise = rng.lognormal(0.0, mode.sigma, size=3)
            fp = fq = base * noise
        loads.append(replace(ld, p_kw=tuple(float(p * f) for p, f in zip(ld.p_kw, fp)),
                             q_kvar=tuple(float(q * f) for q, f in zip(ld.q_kvar, fq))))
    caps = tuple(replace(c, initial_state=bool(rng.integers(2))) for c in spec.capacitors)
    # fixed transformers keep their declared ratio; regulators take any position
    transformers = tuple(
        replace(t, tap_ratio=tap_ratio(int(rng.integers(-TAP_LIMIT, TAP_LIMIT + 1)))) if t.regulated else t
        for t in spec.transformers
    )
    return replace(spec, loads=tuple(loads), capacitors=caps, transformers=transformers)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Samples sharing one topology, held as stacked arrays."""

    graph: MultiGraph
    x_n: np.ndarray  # (S, N, 9)
    x_e: np.ndarray  # (S, E, 3)
    states: list[ControlState]
    y_g: np.ndarray  # (S, 6)
    y_b: np.ndarray  # (S, N_out, 6)
    meta: list[dict] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    def sample_batch(self, k: int) -> GraphBatch:
        base = self.graph.as_batch()
        return replace(base, x_n=self.x_n[k], x_e=self.x_e[k], states=(self.states[k],))

    def batch(self, indices) -> GraphBatch:
        return make_batch([self.sample_batch(int(k)) for k in indices])

    def graph_at(self, k: int) -> MultiGraph:
        g = self.graph.with_state(self.states[k])
        return g.with_loads(self.x_n[k][:, 0:3], self.x_n[k][:, 3:6])

    def output_phase_mask(self) -> np.ndarray:
        rows = self.graph.as_batch().output_nodes
        return np.array([self.graph.nodes[r].phases for r in rows], dtype=bool)


def _header(graph: MultiGraph, split: str, mode, seed: int, count: int) -> dict:
    return {
        "schema": DATASET_SCHEMA,
        "feature_schema": FEATURE_SCHEMA_VERSION,
        "split": split,
        "topology_hash": graph.topology_hash,
        "s_base_kva": graph.s_base_kva,
        "mode": mode.to_json(),
        "seed": seed,
        "count": count,
        "graph": graph.to_json(),
    }


def _solve_one(args):
    spec, s_base, cfg = args
    g = build_multigraph(spec, s_base_kva=s_base)
    try:
        sol = solve(g, cfg)
    except PowerFlowError as exc:
        return None, str(exc)
    x_n, x_e = g.features
    y_g, y_b = sol.targets(g)
    return {
        "x_n": x_n.tolist(),
        "x_e": x_e.tolist(),
        "control": {"cap_states": list(g.control.cap_states), "tap_positions": list(g.control.tap_positions)},
        "y_g": y_g.tolist(),
        "y_b": y_b.tolist(),
        "iterations": sol.iterations,
        "converged": sol.converged,
    }, None


def generate_samples(spec: CircuitSpec, n: int, mode, seed: int, s_base_kva: float = S_BASE_KVA,
                     solver_cfg: SolverConfig = SolverConfig(), jobs: int = 1) -> list[dict]:
    """``n`` solved mutants; failed solves are replaced and logged, too many abort."""
    rng = np.random.default_rng(seed)
    samples: list[dict] = []
    discards = 0
    attempts = 0
    pool = Pool(jobs) if jobs > 1 else None
    try:
        while len(samples) < n:
            need = n - len(samples)
            batch_specs = [mutate_loads(spec, mode, rng) for _ in range(need)]
            attempts += need
            work = [(s, s_base_kva, solver_cfg) for s in batch_specs]
            results = pool.map(_solve_one, work) if pool else [_solve_one(w) for w in work]
            for k, (rec, err) in enumerate(results):
                if rec is None:
                    discards += 1
                    log.warning("discarded mutant %d: %s", attempts - need + k, err)
                else:
                    samples.append(rec)
            if discards > MAX_DISCARD_RATE * max(n, 1):
                raise DiscardError(
                    f"{discards} of {attempts} mutants failed to solve (limit {MAX_DISCARD_RATE:.0%}); "
                    "reduce the mutation range or check the circuit"
                )
    finally:
        if pool:
            pool.close()
            pool.join()
    return samples


def write_split(path, graph: MultiGraph, samples: list[dict], split: str, mode, seed: int) -> None:
    lines = [json.dumps(_header(graph, split, mode, seed, len(samples)), sort_keys=True)]
    lines += [json.dumps(s, sort_keys=True) for s in samples]
    atomic_write_text(path, "\n".join(lines) + "\n")


def generate_dataset(spec: CircuitSpec, n_train: int, n_val: int, mode, seed: int, out_dir,
                     s_base_kva: float = S_BASE_KVA, solver_cfg: SolverConfig = SolverConfig(),
                     jobs: int = 1) -> tuple[Path, Path]:
    """Write ``train.jsonl`` and ``val.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    samples = generate_samples(spec, n_train + n_val, mode, seed, s_base_kva, solver_cfg, jobs)
    graph = build_multigraph(spec, s_base_kva=s_base_kva)
    train_path, val_path = out_dir / "train.jsonl", out_dir / "val.jsonl"
    write_split(train_path, graph, samples[:n_train], "train", mode, seed)
    write_split(val_path, graph, samples[n_train:], "val", mode, seed)
    return train_path, val_path


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != DATASET_SCHEMA:
            raise DatasetError(f"{path}: not a dataset file (schema {header.get('schema')!r})")
        if header.get("feature_schema") != FEATURE_SCHEMA_VERSION:
            raise DatasetError(f"{path}: feature schema {header.get('feature_schema')} unsupported")
        records = [json.loads(line) for line in fh if line.strip()]
    if not records:
        raise DatasetError(f"{path}: no samples")
    graph = MultiGraph.from_json(header["graph"])
    return Dataset(
        graph=graph,
        x_n=np.array([r["x_n"] for r in records], dtype=float),
        x_e=np.array([r["x_e"] for r in records], dtype=float),
        states=[ControlState(tuple(r["control"]["cap_states"]), tuple(r["control"]["tap_positions"]))
                for r in records],
        y_g=np.array([r["y_g"] for r in records], dtype=float),
        y_b=np.array([r["y_b"] for r in records], dtype=float),
        meta=[{"iterations": r["iterations"], "converged": r["converged"]} for r in records],
        header=header,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr0: float = 1e-3
    milestones: tuple[tuple[int, float], ...] | None = None  # None -> half and three quarters of epochs
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def resolved_milestones(self) -> tuple[tuple[int, float], ...]:
        if self.milestones is not None:
            return tuple((int(e), float(m)) for e, m in self.milestones)
        return ((int(0.5 * self.epochs), 0.1), (int(0.75 * self.epochs), 0.1))

    def lr_at(self, epoch: int) -> float:
        lr = self.lr0
        for at, mult in self.resolved_milestones():
            if epoch >= at:
                lr *= mult
        return lr


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batch_loss(model: PowerFlowMultiNet, batch: GraphBatch, y_g: np.ndarray, y_b: np.ndarray) -> ad.Tensor:
    out = model(batch)
    return ad.add(ad.mse_loss(out.y_g, y_g), ad.mse_loss(out.y_b, y_b))


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start:start + size]


def dataset_loss(model: PowerFlowMultiNet, data: Dataset, batch_size: int = 256) -> float:
    """Sample-weighted mean of the training loss over a whole dataset."""
    total = 0.0
    for idx in _batches(len(data), batch_size, np.arange(len(data))):
        loss = batch_loss(model, data.batch(idx), data.y_g[idx], data.y_b[idx].reshape(-1, 6))
        total += loss.item() * len(idx)
    return total / len(data)


@dataclass
class TrainResult:
    model: PowerFlowMultiNet
    best_model: PowerFlowMultiNet
    history: list[dict]
    initial_train_loss: float
    initial_val_loss: float | None
    best_val_loss: float | None

    @property
    def final_train_loss(self) -> float:
        return self.history[-1]["train_loss"] if self.history else self.initial_train_loss

    @property
    def final_val_loss(self) -> float | None:
        return self.history[-1]["val_loss"] if self.history else self.initial_val_loss


def train(train_set: Dataset, val_set: Dataset | None, model_cfg: ModelConfig = ModelConfig(),
          train_cfg: TrainConfig = TrainConfig(), checkpoint_path=None, progress=None) -> TrainResult:
    """MSE(Y_g) + MSE(Y_b) with Adam and a multistep schedule; keeps the best-validation weights."""
    if len(train_set) == 0:
        raise TrainingError("empty training set")
    model = PowerFlowMultiNet(model_cfg, train_set.states[0].vector().size)
    model.fit_normalization(train_set.x_n.reshape(-1, train_set.x_n.shape[-1]))
    opt = Adam(model.parameters(), train_cfg.beta1, train_cfg.beta2, train_cfg.eps_adam)
    rng = np.random.default_rng(train_cfg.seed)

    try:
        init_train = dataset_loss(model, train_set)
        init_val = dataset_loss(model, val_set) if val_set is not None else None
    except ad.NonFiniteError as exc:
        raise TrainingError(f"non-finite loss before training: {exc}") from exc
    best_val = init_val
    best_doc = model.to_json()
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    history: list[dict] = []
    n = len(train_set)
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        order = rng.permutation(n)
        running = 0.0
        for idx in _batches(n, train_cfg.batch_size, order):
            batch = train_set.batch(idx)
            model.zero_grad()
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(model, batch, train_set.y_g[idx], train_set.y_b[idx].reshape(-1, 6))
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}: {exc}") from exc
            ad.backward(loss, tape)
            opt.step(lr)
            model.project()
            running += loss.item() * len(idx)
        train_loss = running / n
        if not math.isfinite(train_loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        try:
            val_loss = dataset_loss(model, val_set) if val_set is not None else None
        except ad.NonFiniteError as exc:
            raise TrainingError(f"non-finite validation loss at epoch {epoch}: {exc}") from exc
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss is not None and (best_val is None or val_loss < best_val):
            best_val = val_loss
            best_doc = model.to_json()
            if checkpoint_path is not None:
                model.save(checkpoint_path)
        if progress is not None:
            progress(history[-1])
    if val_set is None:
        best_doc = model.to_json()
        if checkpoint_path is not None:
            model.save(checkpoint_path)
    return TrainResult(model=model, best_model=PowerFlowMultiNet.from_json(best_doc), history=history,
                       initial_train_loss=init_train, initial_val_loss=init_val, best_val_loss=best_val)


# ---------------------------------------------------------------------------
# Metrics and timing
# ---------------------------------------------------------------------------

def nse(pred: np.ndarray, target: np.ndarray, floor: float = NSE_FLOOR) -> np.ndarray:
    """Elementwise ``((pred - target) / (|target| + floor)) ** 2``."""
    return ((pred - target) / (np.abs(target) + floor)) ** 2


def predict(model: PowerFlowMultiNet, data: Dataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    y_g, y_b = [], []
    for idx in _batches(len(data), batch_size, np.arange(len(data))):
        out = model(data.batch(idx))
        y_g.append(out.y_g.value)
        y_b.append(out.y_b.value.reshape(len(idx), -1, 6))
    return np.concatenate(y_g), np.concatenate(y_b)


def nse_metrics(pred_g: np.ndarray, pred_b: np.ndarray, data: Dataset, floor: float = NSE_FLOOR) -> dict:
    """Mean/std NSE pooled over samples and phases, for P, Q, V and angle.

    Voltage terms only cover phases that exist at each node.
    """
    mask = data.output_phase_mask()
    groups = {
        "P": nse(pred_g[:, 0:3], data.y_g[:, 0:3], floor).ravel(),
        "Q": nse(pred_g[:, 3:6], data.y_g[:, 3:6], floor).ravel(),
        "V": nse(pred_b[:, :, 0:3], data.y_b[:, :, 0:3], floor)[:, mask].ravel(),
        "phi": nse(pred_b[:, :, 3:6], data.y_b[:, :, 3:6], floor)[:, mask].ravel(),
    }
    return {k: {"mean": float(v.mean()), "std": float(v.std())} for k, v in groups.items()}


def _single_threaded():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def _time_calls(fn, repeats: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return np.array(times)


def evaluate(model: PowerFlowMultiNet, data: Dataset, timing_samples: int = 20, repeats: int = 10,
             warmup: int = 2) -> dict:
    """NSE metrics plus per-sample forward and solver wall-clock (single-threaded)."""
    pred_g, pred_b = predict(model, data)
    report = {"nse": nse_metrics(pred_g, pred_b, data), "nse_floor": NSE_FLOOR,
              "nse_definition": "((pred - target) / (|target| + floor))^2, pooled over samples and phases",
              "samples": len(data)}
    if timing_samples > 0:
        k = min(timing_samples, len(data))
        with _single_threaded():
            batch = data.batch(np.arange(k))
            fwd = _time_calls(lambda: model(batch), repeats, warmup) / k
            graphs = [data.graph_at(i) for i in range(k)]
            sol = _time_calls(lambda: [solve(g) for g in graphs], repeats, warmup) / k
        report["forward_time"] = {"mean": float(fwd.mean()), "std": float(fwd.std())}
        report["solver_time"] = {"mean": float(sol.mean()), "std": float(sol.std())}
    return report


def benchmark(model: PowerFlowMultiNet, data: Dataset, batch_sizes=(1, 128), repeats: int = 10,
              warmup: int = 2, solver_cfg: SolverConfig = SolverConfig()) -> dict:
    """Per-sample wall-clock of solver solves versus model forwards at each batch size."""
    repeats = max(repeats, 10)
    report: dict = {"repeats": repeats, "warmup": warmup, "threads": 1, "samples": len(data)}
    with _single_threaded():
        graphs = [data.graph_at(i % len(data)) for i in range(repeats + warmup)]
        it = iter(graphs)
        solver_times = _time_calls(lambda: solve(next(it), solver_cfg), repeats, warmup)
        report["solver"] = {"per_sample_mean": float(solver_times.mean()), "per_sample_std": float(solver_times.std())}
        report["forward"] = {}
        for bs in batch_sizes:
            idx = np.arange(bs) % len(data)
            batch = data.batch(idx)
            t = _time_calls(lambda: model(batch), repeats, warmup) / bs
            report["forward"][str(bs)] = {
                "per_sample_mean": float(t.mean()),
                "per_sample_std": float(t.std()),
                "speedup_vs_solver": float(solver_times.mean() / t.mean()),
            }
    return report


def train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["milestones"] = [list(m) for m in cfg.resolved_milestones()]
    return d
