"""Tiny pre-norm transformer encoder classifier with adapters on Q/V.

Every base weight is frozen; during a task only the adapter factors (and the
gate thresholds) train. Adapted layers are the query and value projections of
each attention block, addressed as ``blk{i}.q`` and ``blk{i}.v``.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    add,
    cross_entropy,
    embed,
    layer_norm,
    matmul,
    mean,
    permute,
    relu,
    reshape,
    scale,
    softmax,
)
from .errors import ConfigError
from .rng import named_rng

MLP_RATIO = 4


class TinyTransformer:
    """Frozen-base encoder: embeddings, attention blocks, mean-pool head."""

    def __init__(self, vocab_size, d_model, n_heads, n_blocks, max_seq_len,
                 num_classes, params: dict[str, Tensor]):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.max_seq_len = max_seq_len
        self.num_classes = num_classes
        self.params = params

    @property
    def adapted_layers(self) -> list[str]:
        return [f"blk{i}.{m}" for i in range(self.n_blocks) for m in ("q", "v")]

    def layer_shape(self, layer_id: str) -> tuple:
        return self.params[layer_id].shape

    def block_of(self, layer_id: str) -> int:
        return int(layer_id.split(".")[0][3:])

    def clone(self) -> "TinyTransformer":
        params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return TinyTransformer(self.vocab_size, self.d_model, self.n_heads,
                               self.n_blocks, self.max_seq_len, self.num_classes,
                               params)

    def apply_merge(self, layer_id: str, dw_final: np.ndarray, scaling: float) -> None:
        """Fold a finished task's update into the frozen base weight."""
        w = self.params[layer_id]
        w.data = w.data + float(scaling) * np.asarray(dw_final, dtype=w.dtype)

    def forward(
        self,
        tokens: np.ndarray,
        updates: Optional[dict[str, Tensor]] = None,
        scaling: float = 0.0,
    ) -> Tensor:
        """Class logits for a token batch [batch, seq].

        ``updates`` maps adapted layer ids to their current (interpolated)
        weight updates; the effective projection is base + scaling * update.
        """
        tokens = np.asarray(tokens)
        p = self.params
        x = embed(tokens, p["tok_emb"], p["pos_emb"])
        batch, seq = tokens.shape
        d, h = self.d_model, self.n_heads
        hd = d // h
        for i in range(self.n_blocks):
            pre = layer_norm(x, p[f"blk{i}.ln1.g"], p[f"blk{i}.ln1.b"])
            flat = reshape(pre, (batch * seq, d))
            q = matmul(flat, self._effective(f"blk{i}.q", updates, scaling))
            k = matmul(flat, p[f"blk{i}.k"])
            v = matmul(flat, self._effective(f"blk{i}.v", updates, scaling))
            q = permute(reshape(q, (batch, seq, h, hd)), (0, 2, 1, 3))
            k = permute(reshape(k, (batch, seq, h, hd)), (0, 2, 1, 3))
            v = permute(reshape(v, (batch, seq, h, hd)), (0, 2, 1, 3))
            scores = scale(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
            ctx = matmul(softmax(scores), v)
            ctx = reshape(permute(ctx, (0, 2, 1, 3)), (batch * seq, d))
            attn_out = reshape(matmul(ctx, p[f"blk{i}.o"]), (batch, seq, d))
            x = add(x, attn_out)
            pre = layer_norm(x, p[f"blk{i}.ln2.g"], p[f"blk{i}.ln2.b"])
            hidden = relu(matmul(reshape(pre, (batch * seq, d)), p[f"blk{i}.mlp1"]))
            mlp_out = reshape(matmul(hidden, p[f"blk{i}.mlp2"]), (batch, seq, d))
            x = add(x, mlp_out)
        x = layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        pooled = mean(x, axis=1)
        return matmul(pooled, p["head"])

    def _effective(self, layer_id: str, updates, scaling: float) -> Tensor:
        base = self.params[layer_id]
        if not updates or layer_id not in updates:
            return base
        return add(base, scale(updates[layer_id], scaling))

    def loss(self, tokens: np.ndarray, labels: np.ndarray,
             updates=None, scaling: float = 0.0) -> Tensor:
        return cross_entropy(self.forward(tokens, updates, scaling), labels)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())


def build_model(
    vocab_size: int = 64,
    d_model: int = 64,
    n_heads: int = 4,
    n_blocks: int = 4,
    max_seq_len: int = 32,
    num_classes: int = 12,
    seed: int = 0,
    dtype=np.float32,
) -> TinyTransformer:
    """Deterministic random frozen base model for the given seed."""
    if d_model % n_heads != 0:
        raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    if min(vocab_size, d_model, n_heads, n_blocks, max_seq_len, num_classes) < 1:
        raise ConfigError("model dimensions must be positive")
    rng = named_rng(seed, "model-init")

    def xavier(fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)

    params: dict[str, Tensor] = {
        "tok_emb": Tensor(rng.normal(0.0, 1.0, size=(vocab_size, d_model)).astype(dtype)),
        "pos_emb": Tensor(rng.normal(0.0, 1.0, size=(max_seq_len, d_model)).astype(dtype)),
    }
    hidden = MLP_RATIO * d_model
    for i in range(n_blocks):
        params[f"blk{i}.ln1.g"] = Tensor(np.ones(d_model, dtype=dtype))
        params[f"blk{i}.ln1.b"] = Tensor(np.zeros(d_model, dtype=dtype))
        for m in ("q", "k", "v", "o"):
            params[f"blk{i}.{m}"] = Tensor(xavier(d_model, d_model))
        params[f"blk{i}.ln2.g"] = Tensor(np.ones(d_model, dtype=dtype))
        params[f"blk{i}.ln2.b"] = Tensor(np.zeros(d_model, dtype=dtype))
        params[f"blk{i}.mlp1"] = Tensor(xavier(d_model, hidden))
        params[f"blk{i}.mlp2"] = Tensor(xavier(hidden, d_model))
    params["ln_f.g"] = Tensor(np.ones(d_model, dtype=dtype))
    params["ln_f.b"] = Tensor(np.zeros(d_model, dtype=dtype))
    # quiet head: initial class margins stay small, so the task signal must be
    # carried by adapter updates of non-negligible magnitude (as with a
    # pretrained backbone whose task head starts near zero)
    params["head"] = Tensor(0.1 * xavier(d_model, num_classes))
    return TinyTransformer(vocab_size, d_model, n_heads, n_blocks, max_seq_len,
                           num_classes, params)


def expected_param_count(vocab_size, d_model, n_heads, n_blocks, max_seq_len,
                         num_classes) -> int:
    """Closed-form parameter count matching ``build_model``."""
    per_block = 4 * d_model * d_model + 2 * MLP_RATIO * d_model * d_model + 4 * d_model
    return ((vocab_size + max_seq_len) * d_model
            + n_blocks * per_block
            + 2 * d_model
            + d_model * num_classes)
