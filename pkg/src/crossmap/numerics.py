"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a numpy array underneath.  Operations record their parents and a
backward rule when gradients are enabled; :meth:`Tensor.backward` replays the
recorded graph in reverse topological order, accumulating into ``grad``.
"""

from __future__ import annotations

import contextlib
import io
import json
import math
import os
import zipfile
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = -1e9
"""Additive mask value standing in for minus infinity."""

DEBUG = bool(os.environ.get("CROSSMAP_DEBUG"))
CHECKPOINT_VERSION = 1

diagnostics: Counter = Counter()

_grad_enabled = True


def tune_allocator() -> bool:
    """Keep freed heap memory in-process (glibc only).

    Large temporaries are otherwise returned to the OS and faulted back in on
    every step, which dominates run time on hosts with slow page faults.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    ok = libc.mallopt(m_mmap_threshold, 1 << 30) == 1
    ok &= libc.mallopt(m_trim_threshold, 1 << 30) == 1
    ok &= libc.mallopt(m_top_pad, 64 << 20) == 1
    return bool(ok)


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check:
            _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor.  Scalars default to a unit seed."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, _check=False)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if DEBUG:
        _check_finite(data, "operation output")
    out = Tensor(data, _check=False)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _result(
        out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(out, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the last axis unless told otherwise)."""
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), backward)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, idx, axis=axis)
    ax = axis % x.ndim

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _result(out, (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")
    return take(table, ids, axis=0)


_relu_trace: list | None = None


@contextlib.contextmanager
def record_relu_patterns():
    """Collect the on/off pattern of every ReLU evaluated inside the block."""
    global _relu_trace
    prev = _relu_trace
    _relu_trace = []
    try:
        yield _relu_trace
    finally:
        _relu_trace = prev


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    if _relu_trace is not None:
        _relu_trace.append(keep)
    return _result(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------------------
# neural operations


def masked_softmax(scores: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis after adding an additive 0 / ``NEG_INF`` mask.

    Masked entries come out exactly zero.  A row with every entry masked returns
    zeros; each such row increments ``diagnostics['fully_masked_rows']``.
    """
    z = scores.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        try:
            z = z + m
        except ValueError as exc:
            raise ShapeError(f"mask shape {m.shape} does not broadcast to scores {scores.shape}") from exc
        allowed = np.broadcast_to(m > NEG_INF / 2, z.shape)
    else:
        allowed = np.ones(z.shape, dtype=bool)
    row_max = np.max(np.where(allowed, z, -np.inf), axis=-1, keepdims=True)
    dead = ~np.isfinite(row_max)
    if dead.any():
        diagnostics["fully_masked_rows"] += int(dead.sum())
        row_max = np.where(dead, 0.0, row_max)
    e = np.where(allowed, np.exp(np.where(allowed, z - row_max, 0.0)), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    y = e / np.where(total > 0, total, 1.0)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _result(y, (scores,), backward)


def log_softmax(x: Tensor, mask=None) -> Tensor:
    """Log-probabilities over the last axis; masked entries are set to ``NEG_INF``."""
    z = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        allowed = np.broadcast_to(m > NEG_INF / 2, z.shape)
    else:
        allowed = np.ones(z.shape, dtype=bool)
    zm = np.where(allowed, z, -np.inf)
    row_max = np.max(zm, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(allowed, np.exp(np.where(allowed, z - row_max, 0.0)), 0.0)
    lse = np.log(np.maximum(e.sum(axis=-1, keepdims=True), 1e-300)) + row_max
    out = np.where(allowed, z - lse, NEG_INF)
    p = np.exp(np.where(allowed, out, -np.inf))

    def backward(g):
        g = np.where(allowed, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward)


def cross_entropy(logits: Tensor, targets, mask=None, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` has shape ``[..., c]`` and ``targets`` the leading shape.  Rows whose
    target equals ``ignore_index`` do not count.  ``mask`` optionally removes
    candidate columns (additive 0 / ``NEG_INF``).
    """
    targets = np.asarray(targets, dtype=np.int64)
    c = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    live = targets != ignore_index
    if np.any(targets[live] < 0) or np.any(targets[live] >= c):
        raise IndexError(f"target index out of range for {c} classes")
    n = int(live.sum())
    logp = log_softmax(logits, mask)
    if n == 0:
        return scale(sum_all(logp), 0.0)
    onehot = np.zeros(logits.shape)
    flat_rows = np.nonzero(live.reshape(-1))[0]
    onehot.reshape(-1, c)[flat_rows, targets.reshape(-1)[flat_rows]] = -1.0 / n
    if np.any(logp.data * (onehot != 0) <= NEG_INF / 2):
        raise ValueError("target falls on a masked candidate")
    return sum_all(mul(logp, Tensor(onehot, _check=False)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm width {d} vs gain {gain.shape} / bias {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the exact identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep, _check=False))


# ---------------------------------------------------------------------------
# optimisation


class AdamState:
    """First and second moment buffers keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.skipped = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    step: int,
) -> None:
    """Bias-corrected Adam update applied in place.

    A tensor whose gradient holds a non-finite value is left untouched and the
    event is counted in ``state.skipped``.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            diagnostics["adam_skipped"] += 1
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = step


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    """Base for anything owning trainable tensors.

    Parameters are discovered from attributes: tensors with ``requires_grad``,
    nested modules, and lists of modules.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.copy()


def parameter(rng: np.random.Generator, shape: Sequence[int], std: float | None = None) -> Tensor:
    """Seeded normal initialisation; ``std`` defaults to 1/sqrt(fan_in)."""
    if std is None:
        std = 1.0 / math.sqrt(shape[0])
    return Tensor(rng.normal(0.0, std, size=tuple(shape)), requires_grad=True)


def zeros_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True)


def ones_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter(rng, (d_in, d_out))
        self.bias = zeros_param((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ones_param((d,))
        self.bias = zeros_param((d,))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self._eps)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write a zip container: ``manifest.json`` plus one little-endian float64 blob per tensor.

    Entry timestamps are fixed so identical inputs give identical bytes.
    """
    names = sorted(tensors)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta,
        "tensors": {n: list(np.shape(tensors[n])) for n in names},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name: str, payload: bytes) -> None:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, payload)

        put("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for n in names:
            put(f"tensors/{n}", np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        version = manifest.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        tensors = {}
        for name, shape in manifest["tensors"].items():
            raw = zf.read(f"tensors/{name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return tensors, manifest["meta"]


def checkpoint_bytes(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(buf, tensors, meta)
    return buf.getvalue()


def params_digest(params: Iterable[tuple[str, Tensor]]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
