"""Small reverse-mode autodiff over dense float64 arrays.

Operations executed inside a ``with Tape():`` block are recorded in creation
order, which is already a topological order, and :func:`backward` replays
them in reverse.  Outside a tape the same functions just compute values.
"""
from __future__ import annotations

import threading

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def backward(self, loss: "Tensor") -> None:
        backward(loss, self)


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._inputs: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """Trainable tensor; its gradient accumulates until :meth:`zero_grad`."""

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=float), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    # a finite sum implies finite entries; only fall back to the full scan otherwise
    if not np.isfinite(np.sum(value)) and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: non-finite output")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, name=op)
    if needs:
        out._inputs = inputs
        out._vjp = vjp
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d loss / d leaf into every leaf's ``.grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape if tape is not None else active_tape()
    seed = np.ones_like(loss.value)
    if loss._vjp is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if tape is None:
        raise RuntimeError("loss was recorded on a tape that is no longer available")
    grads = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for inp, gi in zip(node._inputs, node._vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._vjp is not None:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.value == 0):
        raise ZeroDivisionError("div: zero divisor")
    out = a.value / b.value
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)), "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0  # subgradient at 0 is 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def concat(tensors, axis: int = 1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.value for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def _scatter_matrix(segment_ids: np.ndarray, num_segments: int) -> sp.csr_matrix:
    n = len(segment_ids)
    return sp.csr_matrix((np.ones(n), (segment_ids, np.arange(n))), shape=(num_segments, n))


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return _make(x.value[index], (x,), lambda g: (_scatter_matrix(index, n) @ g,), "gather_rows")


def segment_sum(x, segment_ids, num_segments: int) -> Tensor:
    """Row sums grouped by ``segment_ids``; empty segments give zero rows."""
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if len(seg) != x.shape[0]:
        raise ValueError(f"segment_sum: {len(seg)} ids for {x.shape[0]} rows")
    out = _scatter_matrix(seg, num_segments) @ x.value
    return _make(np.asarray(out), (x,), lambda g: (g[seg],), "segment_sum")


def segment_mean(x, segment_ids, num_segments: int) -> Tensor:
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if len(seg) != x.shape[0]:
        raise ValueError(f"segment_mean: {len(seg)} ids for {x.shape[0]} rows")
    counts = np.maximum(np.bincount(seg, minlength=num_segments), 1).astype(float)
    counts = counts.reshape((-1,) + (1,) * (x.value.ndim - 1))
    out = np.asarray(_scatter_matrix(seg, num_segments) @ x.value) / counts
    return _make(out, (x,), lambda g: ((g / counts)[seg],), "segment_mean")


def power(x, p) -> Tensor:
    """Elementwise ``x ** p`` for strictly positive ``x`` and scalar exponent ``p``."""
    x, p = as_tensor(x), as_tensor(p)
    if p.size != 1:
        raise ValueError("power: exponent must be a scalar")
    if np.any(x.value <= 0):
        raise ValueError("power: base must be strictly positive")
    pv = p.value.reshape(())
    out = x.value ** pv

    def vjp(g):
        gx = g * pv * out / x.value
        gp = np.sum(g * out * np.log(x.value)).reshape(p.shape)
        return gx, gp

    return _make(out, (x, p), vjp, "power")


def row_norm(x) -> Tensor:
    """L2 norm of each row, shape (N, 1); gradient at a zero row is 0."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.value**2, axis=1, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    return _make(n, (x,), lambda g: (np.where(n > 0, g * x.value / safe, 0.0),), "row_norm")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.value - target
    n = max(diff.size, 1)
    return _make(np.array(np.sum(diff**2) / n), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f, params, h: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-6,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Worst normalized gap between tape gradients and central differences.

    ``f`` builds a scalar Tensor from ``params``.  The gap of one coordinate
    is ``|a - n| / (max(|a|, |n|) + atol / rtol)``, so a result below ``rtol``
    means every coordinate satisfies ``|a - n| <= atol + rtol * max(|a|, |n|)``.
    With ``max_coords`` only that many random coordinates per parameter are probed.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite objective while probing {p.name}[{i}]")
            num = (fp - fm) / (2 * h)
            ana = a.reshape(-1)[i]
            gap = abs(ana - num) / (max(abs(ana), abs(num)) + atol / rtol)
            worst = max(worst, gap)
    return worst
