"""Dense tensors with reverse-mode autodiff, initialisers and AdamW.

Everything in the package computes on :class:`Tensor`. A tensor that
``requires_grad`` records how it was produced; calling :func:`backward` on a
scalar result walks that record in reverse topological order.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64
MASK_VALUE = -1e9


class NumericsError(ValueError):
    pass


class ShapeError(NumericsError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # gradients are never updated in place, so arrays may be shared safely
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    if a.ndim == 1 or b.ndim == 1:
        if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    elif a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    out = a2 @ b2
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def backward(g):
        g2 = g
        if b.ndim == 1:
            g2 = g2[..., None]
        if a.ndim == 1:
            g2 = g2[..., None, :]
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            if a.ndim == 1:
                ga = ga[..., 0, :]
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b2.ndim == 2 and a2.ndim > 2:
                # weight shared over the batch: fold the leading axes
                k = a2.shape[-1]
                gb = a2.reshape(-1, k).T @ g2.reshape(-1, g2.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
            if b.ndim == 1:
                gb = gb[:, 0]
            _accumulate(b, gb)

    return _make(out, "matmul", (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), "transpose", (a,), backward)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out, "reshape", (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} on axis {axis}") from exc
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(out, "concat", tuple(tensors), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out, "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, "softmax", (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * p)

    return _make(out if keepdims else np.squeeze(out, axis=axis), "logsumexp", (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            n = xhat.shape[-1]
            dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _make(out, "layer_norm", (x, gamma, beta), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def nonlinearity(x: Tensor, kind: str = "gelu") -> Tensor:
    d = x.data
    if kind == "gelu":
        d2 = d * d
        t = np.tanh(_GELU_C * d * (1.0 + 0.044715 * d2))
        out = 0.5 * d * (1.0 + t)

        def deriv():
            return 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * d2)
    elif kind == "tanh":
        out = np.tanh(d)

        def deriv():
            return 1.0 - out * out
    elif kind == "relu":
        out = np.maximum(d, 0.0)

        def deriv():
            return (d > 0).astype(DTYPE)
    elif kind == "sigmoid":
        out = _sigmoid(d)

        def deriv():
            return out * (1.0 - out)
    else:
        raise NumericsError(f"unknown nonlinearity {kind!r}")

    def backward(g):
        _accumulate(x, g * deriv())

    return _make(out, kind, (x,), backward)


def _sigmoid(d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # -log(1 + exp(-x)), branch-free for large |x|
    out = np.minimum(d, 0.0) - np.log1p(np.exp(-np.abs(d)))

    def backward(g):
        _accumulate(x, g * _sigmoid(-d))

    return _make(out, "log_sigmoid", (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out)

    return _make(out, "exp", (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericsError("log of non-positive value")

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), "log", (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids outside [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, gt)

    return _make(table.data[ids], "embedding", (table,), backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; broadcasting over the rest."""
    _check_broadcast(a, b, "cosine_similarity")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericsError("cosine similarity of a zero-norm vector is undefined")
    ua, ub = a.data / na, b.data / nb
    cos = (ua * ub).sum(axis=axis, keepdims=True)
    out = np.squeeze(cos, axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * (ub - cos * ua) / na, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * (ua - cos * ub) / nb, b.shape))

    return _make(out, "cosine_similarity", (a, b), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_(mul(a, b), axis=-1)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "concat": concat,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "nonlinearity": nonlinearity,
    "embedding": embedding,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "cosine_similarity": cosine_similarity,
    "log_sigmoid": log_sigmoid,
    "logsumexp": logsumexp,
    "exp": exp,
    "log": log,
}


def forward_primitive(op_name: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op_name]
    except KeyError:
        raise NumericsError(f"unknown primitive {op_name!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward


@dataclass
class ComputationRecord:
    """Operations reachable from an output, inputs before consumers."""

    ops: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> ComputationRecord:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.ops)


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar and return gradients for ``params``.

    Gradients are also left in ``.grad`` of every leaf that requires them.
    Parameters not connected to ``loss`` get a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    record = ComputationRecord.from_output(loss)
    for node in record.ops:
        node.grad = None
    if params is not None:
        for p in params.values():
            p.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(record.ops):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
    if params is None:
        params = {n.name or f"param{i}": n for i, n in enumerate(record.ops) if n.op == "leaf"}
    return {
        key: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for key, p in params.items()
        if p.requires_grad
    }


# ---------------------------------------------------------------------------
# initialisation / optimisation


def init_trunc_normal(shape, lo: float = -0.02, hi: float = 0.02, std: float = 0.01,
                      rng_seed: int | np.random.Generator = 0) -> Tensor:
    """Sample Normal(0, std^2) restricted to [lo, hi] by rejection."""
    if not lo < hi:
        raise NumericsError(f"invalid truncation bounds [{lo}, {hi}]")
    if std <= 0:
        raise NumericsError("std must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = int(np.prod(shape)) if len(shape) else 1
    out = np.empty(n, dtype=DTYPE)
    filled = 0
    while filled < n:
        draw = rng.normal(0.0, std, size=max(2 * (n - filled), 16))
        keep = draw[(draw >= lo) & (draw <= hi)][: n - filled]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    return Tensor(out.reshape(shape))


@dataclass
class OptimizerState:
    lr: float
    total_steps: int
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self, step: int | None = None) -> float:
        t = self.step if step is None else step
        if self.total_steps <= 0:
            return self.lr
        return self.lr * max(0.0, 1.0 - t / self.total_steps)


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                   state: OptimizerState) -> OptimizerState:
    """One AdamW update in place, with decoupled decay and a linear lr ramp-down."""
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for {sorted(missing)}")
    lr = state.effective_lr()
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for key, p in params.items():
        g = grads[key]
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if lr > 0.0:
            if state.weight_decay:
                p.data *= 1.0 - lr * state.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = t
    return state


def checksum(arrays: Mapping[str, np.ndarray | Tensor]) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        arr = arrays[key]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        h.update(key.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
