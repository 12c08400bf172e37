"""Low-rank adapter lifecycle: init, gated update construction, merge.

An adapter is a pair of factors (down: [d_in, r], up: [r, d_out]) whose
product is the weight update for one base matrix. A jump gate holds one
learnable threshold per scope unit and zeroes update entries whose magnitude
falls below it.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import arrayio
from .autodiff import Tensor, add, jumprelu, matmul, neg, scale, sub
from .errors import ConfigError, ShapeError, StateError

log = logging.getLogger(__name__)

THRESHOLD_FLOOR = 1e-8


class GateScope(enum.Enum):
    GLOBAL = "global"
    PER_BLOCK = "per-block"


@dataclass
class Adapter:
    down: Tensor  # [d_in, r]
    up: Tensor    # [r, d_out]
    rank: int
    alpha: float
    scaling: float
    layer_id: str = ""

    @property
    def d_in(self) -> int:
        return self.down.shape[0]

    @property
    def d_out(self) -> int:
        return self.up.shape[1]

    def budget(self) -> int:
        """Trainable parameter count of the factor pair."""
        return self.rank * (self.d_in + self.d_out)


@dataclass
class JumpGate:
    threshold: Tensor  # scalar, learnable
    bandwidth: float
    scope: GateScope
    initialized: bool = False


def make_gate(bandwidth: float, scope: GateScope, dtype=np.float32) -> JumpGate:
    if bandwidth <= 0:
        raise ConfigError(f"gate bandwidth must be positive, got {bandwidth}")
    threshold = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
    return JumpGate(threshold=threshold, bandwidth=bandwidth, scope=scope)


def init_adapter(
    d_in: int,
    d_out: int,
    rank: int,
    alpha: float,
    seed: int,
    layer_id: str = "",
    dtype=np.float32,
) -> Adapter:
    """Fresh adapter: down factor Kaiming-uniform over fan-in, up factor zero.

    The uniform bound is sqrt(6 / d_in), pinned so two builds with the same
    seed are bit-identical.
    """
    if d_in < 1 or d_out < 1 or rank < 1:
        raise ConfigError(f"dimensions must be positive, got ({d_in}, {d_out}, {rank})")
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if rank > min(d_in, d_out):
        warnings.warn(
            f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}; "
            "the update is no longer low-rank",
            stacklevel=2,
        )
    bound = float(np.sqrt(6.0 / d_in))
    rng = np.random.default_rng(seed)
    down = rng.uniform(-bound, bound, size=(d_in, rank)).astype(dtype)
    up = np.zeros((rank, d_out), dtype=dtype)
    return Adapter(
        down=Tensor(down, requires_grad=True),
        up=Tensor(up, requires_grad=True),
        rank=rank,
        alpha=float(alpha),
        scaling=float(alpha) / rank,
        layer_id=layer_id,
    )


def dense_update(adapter: Adapter) -> Tensor:
    """The unscaled update: product of the two factors."""
    return matmul(adapter.down, adapter.up)


def jump_update(dw: Tensor, gate: JumpGate) -> Tensor:
    """Magnitude-gated update: the jump gate applied symmetrically.

    For a positive threshold this equals ``dw * (|dw| > threshold)``; gradient
    reaches the factors through active entries and the threshold through the
    straight-through kernel of both gate applications.
    """
    if not gate.initialized:
        raise StateError("jump gate used before its threshold was initialized")
    pos = jumprelu(dw, gate.threshold, gate.bandwidth)
    neg_side = jumprelu(neg(dw), gate.threshold, gate.bandwidth)
    return sub(pos, neg_side)


def interpolate_update(dw: Tensor, dw_jump: Tensor, gamma: float) -> Tensor:
    """Convex combination (1 - gamma) * dw + gamma * dw_jump."""
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if dw.shape != dw_jump.shape:
        raise ShapeError(f"update shapes differ: {dw.shape} vs {dw_jump.shape}")
    if gamma == 0.0:
        return dw
    if gamma == 1.0:
        return dw_jump
    return add(scale(dw, 1.0 - gamma), scale(dw_jump, gamma))


def init_threshold(updates, budget: int) -> float:
    """Threshold such that at most ``budget`` pooled entries exceed it.

    Pools |entries| over the given updates (tensors or arrays) and returns the
    (budget+1)-th largest magnitude, so the strictly-above count equals the
    budget in the absence of ties. Saturated budgets and all-zero pools fall
    back to the positive floor.
    """
    mags = []
    for u in updates:
        data = u.data if isinstance(u, Tensor) else np.asarray(u)
        mags.append(np.abs(data).reshape(-1))
    if not mags:
        raise StateError("threshold init needs at least one update in scope")
    pooled = np.concatenate(mags)
    n = pooled.size
    if n == 0:
        raise StateError("threshold init needs a non-empty update pool")
    if not pooled.any():
        log.warning("all update entries are zero at threshold init; using floor")
        return THRESHOLD_FLOOR
    if budget >= n:
        return THRESHOLD_FLOOR
    order_stat = float(np.partition(pooled, n - 1 - budget)[n - 1 - budget])
    return max(order_stat, THRESHOLD_FLOOR)


def final_sparse_update(adapter: Adapter, gate: JumpGate) -> np.ndarray:
    """Hard-thresholded factor product, outside the autodiff graph."""
    if not gate.initialized:
        raise StateError("jump gate used before its threshold was initialized")
    dw = adapter.down.data @ adapter.up.data
    t = float(gate.threshold.data.reshape(()))
    return dw * (np.abs(dw) > t)


def merge(w_base: Tensor, dw_final, scaling: float) -> Tensor:
    """Merged base weight w_base + scaling * dw_final (no gradient tracking)."""
    dw = dw_final.data if isinstance(dw_final, Tensor) else np.asarray(dw_final)
    if w_base.data.shape != dw.shape:
        raise ShapeError(f"merge shapes differ: {w_base.data.shape} vs {dw.shape}")
    return Tensor(w_base.data + float(scaling) * dw)


def save_adapter(directory, adapter: Adapter, gate: JumpGate | None,
                 mask: np.ndarray | None) -> None:
    """Checkpoint an adapter (and its gate binding) in the raw-array format."""
    arrays = {"down": adapter.down.data, "up": adapter.up.data}
    if mask is not None:
        arrays["mask"] = np.asarray(mask, dtype=np.float32)
    meta = {
        "layer_id": adapter.layer_id,
        "d_in": adapter.d_in,
        "d_out": adapter.d_out,
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "threshold": float(gate.threshold.data.reshape(())) if gate else None,
        "scope": gate.scope.value if gate else None,
        "bandwidth": gate.bandwidth if gate else None,
        "initialized": gate.initialized if gate else None,
    }
    arrayio.save_arrays(directory, arrays, meta)


def load_adapter(directory) -> tuple[Adapter, JumpGate | None, np.ndarray | None]:
    arrays, meta = arrayio.load_arrays(directory)
    adapter = Adapter(
        down=Tensor(arrays["down"], requires_grad=True),
        up=Tensor(arrays["up"], requires_grad=True),
        rank=int(meta["rank"]),
        alpha=float(meta["alpha"]),
        scaling=float(meta["alpha"]) / int(meta["rank"]),
        layer_id=meta["layer_id"],
    )
    gate = None
    if meta.get("threshold") is not None:
        gate = JumpGate(
            threshold=Tensor(np.asarray(meta["threshold"], dtype=arrays["down"].dtype),
                             requires_grad=True),
            bandwidth=float(meta["bandwidth"]),
            scope=GateScope(meta["scope"]),
            initialized=bool(meta["initialized"]),
        )
    return adapter, gate, arrays.get("mask")
