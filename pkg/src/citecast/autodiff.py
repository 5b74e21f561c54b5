"""Minimal dense-tensor reverse-mode autodiff on float64 numpy arrays.

Ops record onto the active Tape (a context manager); with no active tape the
same functions run as plain forward numpy, which is how evaluation avoids
bookkeeping cost. Gradients accumulate into Tensor.grad so several tapes can
be merged by running backward on each.
"""

from __future__ import annotations

import json
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPE: "Tape | None" = None
_CHECK_FINITE = True

CHECKPOINT_FORMAT_VERSION = 1


class AutodiffError(Exception):
    pass


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf assertion applied to every op output."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; scalars are wrapped as constant tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise AutodiffError("tensor/tensor division not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops: backward replays it once, in reverse."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], Sequence[np.ndarray | None]]]] = []
        self._prev: "Tape | None" = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        self._nodes.append((out, parents, vjp))

    def __len__(self) -> int:
        return len(self._nodes)


def _finalize(out_data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise AutodiffError("non-finite value produced in forward pass")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(out, parents, vjp)
    return out


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into Tensor.grad."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, vjp in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = vjp(g)
        for parent, pg in zip(parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if _CHECK_FINITE and not np.all(np.isfinite(pg)):
                raise AutodiffError("non-finite value produced in backward pass")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # flush what remains onto leaf tensors (parameters and inputs)
    for out, parents, _ in tape._nodes:
        for t in parents + (out,):
            g = grads.get(id(t))
            if g is not None and t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
                grads.pop(id(t))
    g = grads.get(id(loss))
    if g is not None and loss.requires_grad:
        loss.grad = g if loss.grad is None else loss.grad + g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _finalize(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _finalize(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _finalize(out, (a, b), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finalize(out, tuple(parts), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _finalize(out, (a,), vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows (axis 0) by integer index; duplicates accumulate on backward."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _finalize(out, (a,), vjp)


def segment_sum(a: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows sharing a segment id into one output row per segment."""
    a = _wrap(a)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != a.data.shape[0]:
        raise AutodiffError(f"segment ids ({seg.shape[0]}) do not match rows ({a.data.shape[0]})")
    out = np.zeros((num_segments,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, seg, a.data)

    def vjp(g):
        return (g[seg],)

    return _finalize(out, (a,), vjp)


def segment_softmax(a: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax of a 1-d score vector within each segment (max-shifted).

    Empty segments simply have no entries; they never yield NaN.
    """
    a = _wrap(a)
    if a.data.ndim != 1:
        raise AutodiffError(f"segment_softmax expects 1-d scores, got shape {a.data.shape}")
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape[0] != a.data.shape[0]:
        raise AutodiffError(f"segment ids ({seg.shape[0]}) do not match scores ({a.data.shape[0]})")
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, seg, a.data)
    shifted = a.data - seg_max[seg]
    e = np.exp(shifted)
    denom = np.zeros(num_segments)
    np.add.at(denom, seg, e)
    out = e / denom[seg]

    def vjp(g):
        dot = np.zeros(num_segments)
        np.add.at(dot, seg, out * g)
        return (out * (g - dot[seg]),)

    return _finalize(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (np.where(mask, g, 0.0),)

    return _finalize(out, (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)

    def vjp(g):
        return (np.where(mask, g, slope * g),)

    return _finalize(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _finalize(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _finalize(out, (a,), vjp)


def l2_normalize_rows(a: Tensor, eps: float = 0.0) -> Tensor:
    """Scale each row to unit L2 norm; all-zero rows stay zero."""
    a = _wrap(a)
    norm = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    safe = np.where(norm > eps, norm, 1.0)
    out = a.data / safe
    live = (norm > eps).astype(np.float64)

    def vjp(g):
        dot = (out * g).sum(axis=1, keepdims=True)
        return (live * (g - out * dot) / safe,)

    return _finalize(out, (a,), vjp)


def mean(a: Tensor) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def vjp(g):
        return (np.full_like(a.data, float(g) / n),)

    return _finalize(out, (a,), vjp)


def total(a: Tensor) -> Tensor:
    """Sum of all elements to a scalar."""
    a = _wrap(a)
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.full_like(a.data, float(g)),)

    return _finalize(out, (a,), vjp)


# ---------------------------------------------------------------------------
# parameters, initialization, optimizer


class ParamStore:
    """Named trainable tensors; names are unique and checkpoint-stable."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise AutodiffError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in state.items():
            if v.shape != self._params[k].data.shape:
                raise AutodiffError(f"shape mismatch for {k}: {v.shape} vs {self._params[k].data.shape}")
            self._params[k].data = np.asarray(v, dtype=np.float64).copy()


class Initializer:
    """Seeded parameter init: glorot-uniform matrices, zero biases,
    normal(0, 0.02) embedding tables."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def matrix(self, fan_in: int, fan_out: int) -> np.ndarray:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return self.rng.uniform(-bound, bound, size=(fan_in, fan_out))

    def bias(self, n: int) -> np.ndarray:
        return np.zeros(n)

    def table(self, rows: int, dim: int) -> np.ndarray:
        return self.rng.normal(0.0, 0.02, size=(rows, dim))

    def scalar(self, value: float = 0.0) -> np.ndarray:
        return np.asarray(value, dtype=np.float64)


class AdamState:
    """Bias-corrected Adam over a ParamStore."""

    def __init__(self, params: ParamStore, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params._params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params._params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for name, t in self.params._params.items():
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            if g.shape != t.data.shape:
                raise AutodiffError(f"gradient shape mismatch for {name}: {g.shape} vs {t.data.shape}")
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** self.step_count)
            v_hat = v / (1 - b2 ** self.step_count)
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# checkpoint container: length-prefixed JSON header + raw float64 payload


_MAGIC = b"CCKPT"


def save_checkpoint(path: str, params: ParamStore, meta: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    for name in params.names():
        arr = np.ascontiguousarray(params[name].data, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr.tobytes())
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "meta": meta or {},
        "params": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = zlib.compress(bytes(payload), level=6)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(blob)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise AutodiffError(f"not a checkpoint file: {path}")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        blob = fh.read()
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise AutodiffError(f"unsupported checkpoint version: {header.get('format_version')}")
    payload = zlib.decompress(blob)
    state: dict[str, np.ndarray] = {}
    for ent in header["params"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = ent["offset"]
        arr = np.frombuffer(payload, dtype=np.float64, count=count, offset=off).reshape(shape)
        state[ent["name"]] = arr.copy()
    return state, header["meta"]
