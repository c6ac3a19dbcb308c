"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`.  When at least one input requires a
gradient (and recording is enabled) the output keeps references to its
inputs plus a local backward rule; :func:`backward` walks that graph in
reverse topological order.  Storage is a C-ordered ``numpy.ndarray`` of
``float64``.

Broadcasting is deliberately narrow: elementwise ops need equal shapes,
except that a bias whose shape matches the trailing axes may be added over
the leading ones, and plain numpy constants (masks, positional tables) may
be added or multiplied in.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

__all__ = [
    "Tensor", "Tape", "backward", "grad_check", "no_grad", "rng_for",
    "add", "mul", "matmul", "swapaxes", "reshape", "relu", "dropout",
    "softmax", "log_softmax", "layer_norm", "embedding", "pick",
    "tensor_sum", "corrupted_backward",
]

_node_ids = itertools.count()
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_corrupt_backward = contextvars.ContextVar("corrupt_backward", default=False)


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for ``(seed, *path)``; distinct paths never share a stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def corrupted_backward():
    """Deliberately break the ReLU backward rule (gradient-checker self test)."""
    token = _corrupt_backward.set(True)
    try:
        yield
    finally:
        _corrupt_backward.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("tensor data contains NaN or Inf")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _result(data: np.ndarray, parents: tuple, rule: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise ContractError(f"{op} produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.node_id = next(_node_ids)
    out.op = op
    track = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = rule if track else None
    return out


class Tape:
    """Operations reachable from an output, in topological order (inputs first)."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` on every leaf that requires it; grads add across fan-out
    and across repeated calls (clear with ``zero_grad``)."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    if not loss.requires_grad:
        return tape
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    return tape


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=np.float64)
        if np.broadcast_shapes(a.shape, const.shape) != a.shape:
            raise DimensionError(f"cannot add constant of shape {const.shape} to {a.shape}")
        return _result(a.data + const, (a,), lambda g: (g,), "add_const")
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        lead = a.size // max(b.size, 1)

        def rule(g):
            return g, g.reshape(lead, *b.shape).sum(axis=0)

        return _result(a.data + b.data, (a, b), rule, "add_bias")
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    const = np.asarray(b, dtype=np.float64)
    if np.broadcast_shapes(a.shape, const.shape) != a.shape:
        raise DimensionError(f"cannot multiply {a.shape} by constant of shape {const.shape}")
    return _result(a.data * const, (a,), lambda g: (g * const,), "mul_const")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., m, k]`` with ``b[k, n]`` or ``b[..., k, n]`` (same leading axes)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        def rule(g):
            return g @ b.data.T, a.data.reshape(-1, k).T @ g.reshape(-1, n)
    elif a.shape[:-2] == b.shape[:-2]:
        def rule(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    else:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), rule, "matmul")


def swapaxes(x: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(np.swapaxes(x.data, ax1, ax2), (x,),
                   lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def tensor_sum(x: Tensor) -> Tensor:
    return _result(np.array(x.data.sum()), (x,),
                   lambda g: (np.full(x.shape, np.reshape(g, ())),), "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def rule(g):
        gx = g * mask
        if _corrupt_backward.get():
            gx = gx * 1.5
        return (gx,)

    return _result(np.where(mask, x.data, 0.0), (x,), rule, "relu")


def dropout(x: Tensor, p: float, mode: str = "train",
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by ``1/(1-p)`` in train mode, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an explicit rng")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), rule, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), rule, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (population variance, eps inside the sqrt)."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std

    def rule(g):
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), rule, "layer_norm")


def embedding(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight[V, d]`` selected by an integer array of any shape."""
    idx = np.asarray(ids, dtype=np.int64)

    def rule(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[idx], (weight,), rule, "embedding")


def pick(x: Tensor, index) -> Tensor:
    """``out[...] = x[..., index[...]]`` along the last axis."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"pick index shape {idx.shape} does not match {x.shape[:-1]}")
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _result(picked, (x,), rule, "pick")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               extended: bool = True) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f`` takes no arguments and must read ``params`` by reference; it is
    re-evaluated with each parameter entry nudged by ``+-h``.  The error per
    entry is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``.

    With ``extended`` the difference quotients are evaluated in
    ``np.longdouble``: at h=1e-5 float64 rounding alone leaves ~1e-11 of
    absolute noise in each quotient, which swamps small gradient entries.
    The autodiff side is always float64.
    """
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    params = list(params)
    with no_grad():
        first, second = f().item(), f().item()
    if first != second:
        raise ContractError("function is not deterministic (two forward passes differ)")

    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    fd_dtype = np.longdouble if extended else np.float64
    step = fd_dtype(h)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            saved = p.data
            p.data = saved.astype(fd_dtype)
            try:
                flat = p.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    up = f().data.reshape(-1)[0]
                    flat[i] = orig - step
                    down = f().data.reshape(-1)[0]
                    flat[i] = orig
                    gn = float((up - down) / (2 * step))
                    denom = max(abs(gflat[i]), abs(gn), 1e-8)
                    worst = max(worst, abs(gflat[i] - gn) / denom)
            finally:
                p.data = saved
    return float(worst)
