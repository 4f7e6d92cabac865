"""Reverse-mode autodiff on float64 numpy arrays, Adam, and checkpoint I/O.

The tape is rebuilt on every forward pass: each op returns a :class:`Tensor`
holding its parents and a closure that pushes the output gradient back.
:func:`backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import CorruptFile, DomainError, MissingGrad, NotScalar, ShapeMismatch, VersionMismatch

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _row_stable() -> bool:
    return getattr(_state, "row_stable", False)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def row_stable():
    """Use a matmul kernel whose per-row result ignores the batch size.

    BLAS picks different kernels (and summation orders) for 1-row and n-row
    products, so scoring one window alone would not match scoring it inside
    a batch.  Inside this context every product goes through einsum instead.
    """
    prev = _row_stable()
    _state.row_stable = True
    try:
        yield
    finally:
        _state.row_stable = prev


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _row_stable() and a.ndim == 2 and b.ndim == 2:
        return np.einsum("ij,jk->ik", a, b)
    return a @ b


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return slice_(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                         _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant exponent; the base must be positive
    unless the exponent is a non-negative integer."""
    a = as_tensor(a)
    if not float(exponent).is_integer() and np.any(a.data <= 0):
        raise DomainError("non-integer power of a non-positive base")
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# -- linear algebra / structure -----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _make(_mm(a.data, b.data), (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


# -- pointwise nonlinearities -------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- row-wise reductions ------------------------------------------------------

def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), back)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def logsumexp(a) -> Tensor:
    """Reduce the last axis; max-shifted so large inputs do not overflow."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    s = np.exp(a.data - m).sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    soft = np.exp(a.data - m) / s
    return _make(out, (a,), lambda g: (g[..., None] * soft,))


def dropout(a, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must lie in [0, 1)")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# -- fused recurrent op -------------------------------------------------------

def lstm(x, weight, bias, h0=None, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x`` (batch, steps, features); return the last hidden state.

    ``weight`` is (features + hidden, 4 * hidden) acting on [x_t, h_{t-1}];
    gate blocks are ordered input, forget, cell, output.  With ``reverse`` the
    sequence is consumed from the last step to the first.  The backward rule
    is full backpropagation through time.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"lstm input must be 3-D, got {x.shape}")
    B, T, F = x.shape
    H4 = weight.shape[1]
    H = H4 // 4
    if weight.shape != (F + H, H4) or H4 % 4 or bias.shape != (H4,):
        raise ShapeMismatch(f"lstm weight {weight.shape} / bias {bias.shape} vs input {x.shape}")
    h = np.zeros((B, H)) if h0 is None else np.array(h0, dtype=np.float64)
    c = np.zeros((B, H))
    order = range(T - 1, -1, -1) if reverse else range(T)
    keep = _grad_enabled() and (x.requires_grad or weight.requires_grad or bias.requires_grad)
    cache = []
    W, b = weight.data, bias.data
    for t in order:
        xh = np.concatenate([x.data[:, t, :], h], axis=1)
        z = _mm(xh, W) + b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        if keep:
            cache.append((t, xh, i, f, g, o, c_prev, tc))

    def back(dh_out):
        dW = np.zeros_like(W)
        db = np.zeros_like(b)
        dx = np.zeros_like(x.data) if x.requires_grad else None
        dh = dh_out
        dc = np.zeros_like(dh_out)
        for t, xh, i, f, g, o, c_prev, tc in reversed(cache):
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            dc = dc * f
            dW += xh.T @ dz
            db += dz.sum(axis=0)
            dxh = dz @ W.T
            if dx is not None:
                dx[:, t, :] = dxh[:, :F]
            dh = dxh[:, F:]
        return dx, dW, db

    return _make(h, (x, weight, bias), back)


# -- backward pass ------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``f`` recomputes the scalar loss from the current parameter values and
    must be deterministic.  The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps near-zero gradients
    from inflating it.  ``max_per_param`` samples that many entries per
    tensor instead of all of them.
    """
    for p in params.values():
        p.grad = None
    backward(f())
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    report = GradCheckReport(0.0, 0, tol=tol)
    rng = rng or np.random.default_rng(0)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                up = f().item()
                flat[j] = orig - h
                down = f().item()
                flat[j] = orig
                num = (up - down) / (2 * h)
                ana = float(analytic[name].reshape(-1)[j])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                report.checked += 1
                report.max_rel_error = max(report.max_rel_error, err)
                if err >= tol:
                    report.failures.append((name, np.unravel_index(j, p.shape), ana, num))
    return report


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place.  Gradients are left as they are."""
    for name, p in params.items():
        if p.requires_grad and p.grad is None:
            raise MissingGrad(name)
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- rng ----------------------------------------------------------------------

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the sub-stream ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


# -- checkpoint file ----------------------------------------------------------
#
# layout: b"QFCK" | u32 version | u64 header length | header JSON | payload
# header: {"tensors": [{"name", "shape", "offset"}], "crc32": int}
# payload: row-major little-endian float64, tensors back to back.

MAGIC = b"QFCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def encode_params(params: Mapping[str, np.ndarray | Tensor]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value,
                                   dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = json.dumps({"tensors": entries, "crc32": zlib.crc32(payload)},
                        separators=(",", ":"), sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + payload


def decode_params(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < _PREFIX.size:
        raise CorruptFile("file shorter than its header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptFile("bad magic bytes")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(blob[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptFile("unreadable header") from None
    payload = blob[start:]
    total = sum(math.prod(e["shape"]) for e in header["tensors"])
    if len(payload) != 8 * total or zlib.crc32(payload) != header["crc32"]:
        raise CorruptFile("payload truncated or damaged")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    out = {}
    for e in header["tensors"]:
        n = math.prod(e["shape"])
        out[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
    return out


def save_params(params: Mapping[str, np.ndarray | Tensor], path: str | Path) -> None:
    Path(path).write_bytes(encode_params(params))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())
