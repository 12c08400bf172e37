"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: strict shapes (no broadcasting beyond
scalars), an explicit gradient tape, and hand-written backward rules for the
primitives the rest of the package needs. The jump gate's threshold receives a
straight-through gradient estimated with a rectangular kernel of configurable
bandwidth; everything else is exact.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, StateError

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "permute",
    "relu",
    "softmax",
    "layer_norm",
    "mean",
    "embed",
    "cross_entropy",
    "heaviside",
    "jumprelu",
    "frobenius_sq",
    "threshold_pseudograd",
]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


class Tensor:
    """Dense float array plus gradient bookkeeping.

    ``data`` is always a numpy floating array; python lists and integer arrays
    are converted to float32 (the training precision), while explicit float
    arrays keep their dtype so oracles can run in float64.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Tape:
    """Ordered record of the differentiable operations of one forward pass.

    Backward replays the records newest-first, which is a valid reverse
    topological order because every operation runs after its inputs exist.
    A tape can be backpropagated once; re-running the forward pass builds a
    fresh tape.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    @staticmethod
    def active() -> Optional["Tape"]:
        stack = _tape_stack()
        return stack[-1] if stack else None

    def record(self, fn: Callable[[], None]) -> None:
        self._records.append(fn)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor) -> None:
        """Seed d(root)/d(root) = 1 and propagate to every recorded input."""
        if self._spent:
            raise StateError("tape already backpropagated; rerun the forward pass")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be a scalar, got shape {root.shape}")
        self._spent = True
        root.grad = np.ones_like(root.data)
        for fn in reversed(self._records):
            fn()


def _tracked(inputs: Sequence[Tensor]) -> bool:
    return Tape.active() is not None and any(t.requires_grad for t in inputs)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_tracked((a, b)))
    if out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, g)
        Tape.active().record(backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=_tracked((a, b)))
    if out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, -g)
        Tape.active().record(backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shaped tensors."""
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=_tracked((a, b)))
    if out.requires_grad:
        a_data, b_data = a.data, b.data
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, g * b_data)
            if b.requires_grad:
                _accumulate(b, g * a_data)
        Tape.active().record(backward)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (the only sanctioned broadcast)."""
    s = float(s)
    out = Tensor(x.data * s, requires_grad=_tracked((x,)))
    if out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g * s)
        Tape.active().record(backward)
    return out


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: strict 2-D, or stacked with identical leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(
            f"matmul: leading dims {a.data.shape[:-2]} and {b.data.shape[:-2]} differ"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims {a.data.shape[-1]} and {b.data.shape[-2]} differ"
        )
    out = Tensor(a.data @ b.data, requires_grad=_tracked((a, b)))
    if out.requires_grad:
        a_data, b_data = a.data, b.data
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accumulate(a, g @ np.swapaxes(b_data, -1, -2))
            if b.requires_grad:
                _accumulate(b, np.swapaxes(a_data, -1, -2) @ g)
        Tape.active().record(backward)
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape), requires_grad=_tracked((x,)))
    if out.requires_grad:
        orig = x.data.shape
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g.reshape(orig))
        Tape.active().record(backward)
    return out


def permute(x: Tensor, axes: tuple) -> Tensor:
    out = Tensor(np.transpose(x.data, axes), requires_grad=_tracked((x,)))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, np.transpose(g, inverse))
        Tape.active().record(backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), requires_grad=_tracked((x,)))
    if out.requires_grad:
        mask = (x.data > 0).astype(x.data.dtype)
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g * mask)
        Tape.active().record(backward)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, requires_grad=_tracked((x,)))
    if out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            inner = (g * y).sum(axis=-1, keepdims=True)
            _accumulate(x, y * (g - inner))
        Tape.active().record(backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.data.shape != (x.data.shape[-1],) or bias.data.shape != (x.data.shape[-1],):
        raise ShapeError("layer_norm: gain/bias must match the last axis of x")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, requires_grad=_tracked((x, gain, bias)))
    if out.requires_grad:
        d = x.data.shape[-1]
        gain_data = gain.data
        def backward():
            g = out.grad
            if g is None:
                return
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                _accumulate(bias, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gx = g * gain_data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, (gx - m1 - xhat * m2) * inv)
        Tape.active().record(backward)
    return out


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Mean over all entries (axis=None) or over a single axis."""
    out = Tensor(x.data.mean(axis=axis), requires_grad=_tracked((x,)))
    if out.requires_grad:
        shape = x.data.shape
        n = x.data.size if axis is None else shape[axis]
        def backward():
            g = out.grad
            if g is None:
                return
            if axis is None:
                _accumulate(x, np.full(shape, 1.0 / n, dtype=g.dtype) * g)
            else:
                _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), shape) / n)
        Tape.active().record(backward)
    return out


def embed(tokens: np.ndarray, table: Tensor, positions: Tensor) -> Tensor:
    """Token embedding lookup plus positional embedding.

    ``tokens`` is an integer array [batch, seq]; the output row for position t
    is ``table[tokens[b, t]] + positions[t]``.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"embed expects [batch, seq] tokens, got shape {tokens.shape}")
    seq = tokens.shape[1]
    if seq > positions.data.shape[0]:
        raise ValueError(
            f"sequence length {seq} exceeds maximum {positions.data.shape[0]}"
        )
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= table.data.shape[0]:
        raise ValueError("token id out of vocabulary range")
    out_data = table.data[tokens] + positions.data[:seq]
    out = Tensor(out_data, requires_grad=_tracked((table, positions)))
    if out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            if table.requires_grad:
                gt = np.zeros_like(table.data)
                np.add.at(gt, tokens.reshape(-1), g.reshape(-1, g.shape[-1]))
                _accumulate(table, gt)
            if positions.requires_grad:
                gp = np.zeros_like(positions.data)
                gp[:seq] = g.sum(axis=0)
                _accumulate(positions, gp)
        Tape.active().record(backward)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy expects logits [n, c] and labels [n]; got "
            f"{logits.data.shape} and {labels.shape}"
        )
    n = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    out = Tensor(np.asarray((lse - picked).mean(), dtype=logits.dtype),
                 requires_grad=_tracked((logits,)))
    if out.requires_grad:
        probs = np.exp(shifted - lse[:, None])
        def backward():
            g = out.grad
            if g is None:
                return
            gl = probs.copy()
            gl[np.arange(n), labels] -= 1.0
            _accumulate(logits, gl * (g / n))
        Tape.active().record(backward)
    return out


def _step(v: np.ndarray) -> np.ndarray:
    # unit step with the x <= 0 branch mapped to 0
    return (v > 0).astype(v.dtype)


def heaviside(x: Tensor) -> Tensor:
    """Elementwise unit step; exactly 0 at 0. Never carries gradient."""
    return Tensor(_step(x.data))


def threshold_pseudograd(x: np.ndarray, threshold: float, bandwidth: float) -> np.ndarray:
    """Straight-through estimate of d jumprelu(x) / d threshold.

    A rectangular kernel of width ``bandwidth`` around the threshold: the
    estimate is -threshold/bandwidth where (x - threshold)/bandwidth falls in
    (-1/2, 1/2] and zero everywhere else.
    """
    u = (x - threshold) / bandwidth
    return -(threshold / bandwidth) * (_step(u + 0.5) - _step(u - 0.5))


def jumprelu(x: Tensor, threshold: Tensor, bandwidth: float) -> Tensor:
    """Gate x by the unit step at a learnable threshold: x * H(x - threshold).

    Backward passes the incoming gradient through active entries only, and
    routes the straight-through kernel estimate (``threshold_pseudograd``)
    summed over entries to the threshold.
    """
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    if threshold.data.size != 1:
        raise ShapeError("threshold must be a scalar tensor")
    t = float(threshold.data.reshape(()))
    active = _step(x.data - t)
    out = Tensor(x.data * active, requires_grad=_tracked((x, threshold)))
    if out.requires_grad:
        x_data = x.data
        def backward():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                _accumulate(x, g * active)
            if threshold.requires_grad:
                contrib = (g * threshold_pseudograd(x_data, t, bandwidth)).sum()
                _accumulate(threshold, np.asarray(contrib, dtype=threshold.dtype)
                            .reshape(threshold.data.shape))
        Tape.active().record(backward)
    return out


def frobenius_sq(x: Tensor) -> Tensor:
    """Sum of squared entries (squared Frobenius norm)."""
    out = Tensor(np.asarray((x.data * x.data).sum(), dtype=x.dtype),
                 requires_grad=_tracked((x,)))
    if out.requires_grad:
        x_data = x.data
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, 2.0 * x_data * g)
        Tape.active().record(backward)
    return out
