"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every :class:`Tensor` produced by an operation is also its own trace node: it
keeps the operation tag, references to its inputs and a closure holding the
intermediates needed to push a gradient back. Calling :func:`backward` on a
result walks that acyclic trace once in reverse topological order and
accumulates gradients into the leaf tensors (parameters) it reaches.

Only the primitives the model needs are provided. Broadcasting follows numpy
rules in the elementwise ops and gradients are summed back to input shapes.
"""
from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT = np.float64


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    """A checkpoint file is not readable as one (bad header, truncated, trailing data)."""


class StaleTraceError(RuntimeError):
    """A leaf was mutated after the trace that used it was recorded."""


# Sign patterns of piecewise-linear ops, recorded while active (see grad_check).
_kink_log: list | None = None


@contextmanager
def record_kinks():
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "op", "parents", "_backward", "_in_versions", "version", "name")

    def __init__(self, data, parents: tuple = (), op: str = "const",
                 backward: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=FLOAT)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward
        self._in_versions = tuple(p.version for p in parents)
        self.version = 0
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=FLOAT))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents, op, backward) -> Tensor:
    return Tensor(_finite(np.asarray(data, dtype=FLOAT), op), parents, op, backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}") from exc
    return _node(out, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}") from exc
    return _node(out, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}") from exc
    return _node(out, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), "matmul",
                 lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: shape mismatch {[t.shape for t in ts]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, "concat", lambda g: tuple(np.split(g, sizes, axis=axis)))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _node(out, (x,), "sum", back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _node(out, (x,), "mean", back)


def _piecewise(x, op: str) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink
    if _kink_log is not None:
        _kink_log.append(mask)
    return _node(np.where(mask, x.data, 0.0), (x,), op, lambda g: (g * mask,))


def relu(x) -> Tensor:
    return _piecewise(x, "relu")


def hinge(x) -> Tensor:
    """``max(0, x)`` elementwise; tagged separately from relu for traces."""
    return _piecewise(x, "hinge")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def row_norm(x) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor -> shape (m, 1).

    The gradient at a zero row is taken as zero.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("row_norm expects a 2-D tensor")
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    nz = n > 0
    if _kink_log is not None:
        _kink_log.append(nz)
    safe = np.where(nz, n, 1.0)
    return _node(n, (x,), "row_norm", lambda g: (np.where(nz, g * x.data / safe, 0.0),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _node(x.data.T, (x,), "transpose", lambda g: (g.T,))


def _scatter_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:], dtype=FLOAT)
    np.add.at(out, idx, values)
    return out


def take(x, idx) -> Tensor:
    """Gather rows ``x[idx]`` along the first axis."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    return _node(x.data[idx], (x,), "take", lambda g: (_scatter_rows(idx, g, x.shape[0]),))


def segment_sum(x, segments, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets given per-row bucket ids."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != x.shape[0]:
        raise ValueError("segment_sum: one segment id per row required")
    return _node(_scatter_rows(seg, x.data, n_segments), (x,), "segment_sum",
                 lambda g: (g[seg],))


def segment_mean(x, segments, n_segments: int) -> Tensor:
    seg = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_segments).astype(FLOAT)
    inv = 1.0 / np.maximum(counts, 1.0)
    return mul(segment_sum(x, seg, n_segments), inv.reshape((-1,) + (1,) * (as_tensor(x).data.ndim - 1)))


def relation_transform(h, weights, src, rel) -> Tensor:
    """Per-edge messages ``h[src[e]] @ weights[rel[e]]``.

    ``weights`` has shape (n_rel, d_in, d_out); edges are grouped by relation
    so each group is one dense matmul.
    """
    h, weights = as_tensor(h), as_tensor(weights)
    src = np.asarray(src, dtype=np.int64)
    rel = np.asarray(rel, dtype=np.int64)
    if weights.data.ndim != 3 or h.shape[1] != weights.shape[1]:
        raise ValueError(f"relation_transform: shape mismatch {h.shape} vs {weights.shape}")
    order = np.argsort(rel, kind="stable")
    rels, starts = np.unique(rel[order], return_index=True)
    bounds = list(zip(rels.tolist(), starts.tolist(), starts[1:].tolist() + [len(order)]))
    out = np.empty((len(src), weights.shape[2]), dtype=FLOAT)
    for r, a, b in bounds:
        sel = order[a:b]
        out[sel] = h.data[src[sel]] @ weights.data[r]

    def back(g):
        gh = np.zeros_like(h.data)
        gw = np.zeros_like(weights.data)
        for r, a, b in bounds:
            sel = order[a:b]
            gs = g[sel]
            np.add.at(gh, src[sel], gs @ weights.data[r].T)
            gw[r] = h.data[src[sel]].T @ gs
        return gh, gw
    return _node(out, (h, weights), "relation_transform", back)


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf reached.

    ``seed`` defaults to ones of the root's shape.
    """
    seed = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=FLOAT)
    if seed.shape != root.shape:
        raise ValueError(f"seed shape {seed.shape} does not match output {root.shape}")
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, v in zip(node.parents, node._in_versions):
            if p.version != v:
                raise StaleTraceError(f"input of {node.op} was modified after the forward pass")
        for p, pg in zip(node.parents, node._backward(g)):
            if pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def forward(expr: Callable[[], Tensor]) -> tuple[np.ndarray, Tensor]:
    """Evaluate ``expr`` and return ``(value, trace_root)``."""
    out = expr()
    return out.data.copy(), out


class ParameterStore:
    """Named parameter slots, each a leaf Tensor carrying its own gradient."""

    def __init__(self):
        self._slots: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._slots:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=FLOAT), name=name)
        t.grad = np.zeros_like(t.data)
        self._slots[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __iter__(self):
        return iter(self._slots)

    def __len__(self):
        return len(self._slots)

    def items(self):
        return self._slots.items()

    def names(self) -> list[str]:
        return list(self._slots)

    def n_params(self) -> int:
        return sum(t.data.size for t in self._slots.values())

    def grad(self, name: str) -> np.ndarray:
        t = self._slots[name]
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    def zero_grad(self) -> None:
        for t in self._slots.values():
            t.grad = np.zeros_like(t.data)

    def set(self, name: str, value) -> None:
        t = self._slots[name]
        value = np.asarray(value, dtype=FLOAT)
        if value.shape != t.shape:
            raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
        t.data = value.copy()
        t.version += 1

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._slots.items()}

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for k, t in self._slots.items():
            other.add(k, t.data)
        return other


def init_uniform(store: ParameterStore, shapes: dict[str, tuple], scale_dim: int,
                 rng: np.random.Generator) -> ParameterStore:
    bound = 1.0 / np.sqrt(scale_dim)
    for name, shape in shapes.items():
        store.add(name, rng.uniform(-bound, bound, size=shape))
    return store


def sgd_step(store: ParameterStore, learning_rate: float) -> ParameterStore:
    for name, t in store.items():
        g = store.grad(name)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
    for name, t in store.items():
        if learning_rate != 0.0:
            t.data = t.data - learning_rate * store.grad(name)
            t.version += 1
        t.grad = np.zeros_like(t.data)
    return store


@dataclass
class SlotCheck:
    name: str
    max_rel_error: float
    n_checked: int
    n_excluded: int
    passed: bool


@dataclass
class GradCheckReport:
    slots: list[SlotCheck]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.slots)

    def __str__(self):
        lines = [f"{'slot':<28}{'max_rel_err':>14}{'checked':>9}{'kinks':>7}  status"]
        for s in self.slots:
            lines.append(f"{s.name:<28}{s.max_rel_error:>14.3e}{s.n_checked:>9}{s.n_excluded:>7}  "
                         f"{'ok' if s.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(expr: Callable[[], Tensor], store: ParameterStore, tolerance: float = 1e-4,
               step: float = 1e-5, names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients of a scalar ``expr`` against central differences.

    The relative deviation of a slot is ``max|analytic - numeric|`` divided by
    the larger of the two gradients' max-norms (so coordinates whose true
    gradient is zero are judged against the slot's scale). Coordinates where
    perturbing by ``+-step`` changes the on/off pattern of any relu, hinge or
    norm in the expression sit at a non-differentiable point; they are
    excluded and counted.
    """
    store.zero_grad()
    with record_kinks() as base_pattern:
        out = expr()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar expression")
    backward(out)
    analytic = {k: store.grad(k).copy() for k in store}
    store.zero_grad()

    def evaluate():
        with record_kinks() as pat:
            val = float(expr().data.reshape(-1)[0])
        return val, pat

    def same(p, q):
        return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))

    slots = []
    for name in (names if names is not None else store.names()):
        t = store[name]
        base = t.data.copy()
        num = np.zeros_like(base)
        kink = np.zeros(base.shape, dtype=bool)
        for i in np.ndindex(base.shape):
            pert = base.copy()
            pert[i] += step
            store.set(name, pert)
            fp, pp = evaluate()
            pert[i] -= 2 * step
            store.set(name, pert)
            fm, pm = evaluate()
            num[i] = (fp - fm) / (2 * step)
            kink[i] = not (same(pp, base_pattern) and same(pm, base_pattern))
        store.set(name, base)
        ok = ~kink
        a, n = analytic[name][ok], num[ok]
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        err = 0.0 if scale == 0.0 else float(np.abs(a - n).max(initial=0.0) / scale)
        slots.append(SlotCheck(name, err, int(ok.sum()), int(kink.sum()), err <= tolerance))
    store.zero_grad()
    return GradCheckReport(slots, tolerance)


CKPT_MAGIC = "DEKG-CKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, store: ParameterStore, meta: dict | None = None) -> None:
    """Header line, then each slot as little-endian float64 in declaration order."""
    names = store.names()
    header = {"names": names, "shapes": [list(store[n].shape) for n in names], "meta": meta or {}}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"{CKPT_MAGIC}\t{CKPT_VERSION}\t{json.dumps(header, sort_keys=True)}\n".encode())
        for n in names:
            fh.write(np.ascontiguousarray(store[n].data, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[ParameterStore, dict]:
    with open(path, "rb") as fh:
        try:
            line = fh.readline().decode()
            magic, version, payload = line.rstrip("\n").split("\t", 2)
        except (UnicodeDecodeError, ValueError):
            raise CheckpointError(f"{path} is not a checkpoint") from None
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        if version != str(CKPT_VERSION):
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(payload)
        except ValueError:
            raise CheckpointError(f"{path}: unreadable header") from None
        store = ParameterStore()
        for name, shape in zip(header["names"], header["shapes"]):
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"{path}: truncated at {name}")
            store.add(name, np.frombuffer(buf, dtype="<f8").reshape(shape))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    return store, header["meta"]
