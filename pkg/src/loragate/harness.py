"""Continual-learning driver: per-task adapter lifecycle over a task stream.

For each task: inject fresh adapters, train one epoch with the gated update
interpolation, hard-threshold and merge the final update, record the support
mask, optionally accumulate the overlap-penalty state, then drop the adapters.
Isolated single-task runs fill the reference row of the accuracy matrix.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapter import (
    Adapter,
    GateScope,
    JumpGate,
    THRESHOLD_FLOOR,
    dense_update,
    final_sparse_update,
    init_adapter,
    init_threshold,
    interpolate_update,
    jump_update,
    make_gate,
    merge,
)
from .autodiff import Tape, add, cross_entropy
from .config import ExperimentConfig, Method
from .data import TaskStream
from .ella import EllaState, EllaVariant, ella_penalty, make_ella_state, update_past
from .errors import ConfigError
from .metrics import AccuracyMatrix
from .model import TinyTransformer, build_model
from .optim import AdamW
from .rng import named_rng, named_seed
from .schedule import Schedule, gamma, schedule_from_fractions

log = logging.getLogger(__name__)


@dataclass
class TaskLog:
    task_id: int
    position: int
    total_steps: int
    losses: np.ndarray
    gammas: list[float]
    threshold_init_step: Optional[int]
    thresholds: dict[str, float] = field(default_factory=dict)
    penalty_weight: float = 0.0


@dataclass
class RunResult:
    order: list[int]
    matrix: AccuracyMatrix
    masks: dict[tuple[int, str], np.ndarray]  # (position, layer_id) -> 0/1 mask
    logs: list[TaskLog]
    trace_hash: str
    model: TinyTransformer


def inject_adapters(
    model: TinyTransformer,
    config: ExperimentConfig,
    run_seed: int,
    task_id: int,
    gating: bool,
) -> tuple[dict[str, Adapter], Optional[dict[str, JumpGate]]]:
    """Fresh adapters for every adapted layer, plus shared gates when gating.

    Adapter seeds are derived from (run seed, task id, layer id), so the same
    task gets bit-identical initialization in stream and isolated runs.
    """
    adapters = {}
    for lid in model.adapted_layers:
        d_in, d_out = model.layer_shape(lid)
        adapters[lid] = init_adapter(
            d_in, d_out, config.rank, config.alpha,
            seed=named_seed(run_seed, f"adapter/task{task_id}/{lid}"),
            layer_id=lid,
        )
    if not gating:
        return adapters, None
    gates: dict[str, JumpGate] = {}
    if config.gate_scope is GateScope.GLOBAL:
        shared = make_gate(config.bandwidth, GateScope.GLOBAL)
        for lid in model.adapted_layers:
            gates[lid] = shared
    else:
        per_block = {i: make_gate(config.bandwidth, GateScope.PER_BLOCK)
                     for i in range(model.n_blocks)}
        for lid in model.adapted_layers:
            gates[lid] = per_block[model.block_of(lid)]
    return adapters, gates


def _scope_units(adapters: dict[str, Adapter],
                 gates: dict[str, JumpGate]) -> dict[int, tuple[JumpGate, list[str]]]:
    units: dict[int, tuple[JumpGate, list[str]]] = {}
    for lid, gate in gates.items():
        units.setdefault(id(gate), (gate, []))[1].append(lid)
    return units


def _initialize_gates(adapters: dict[str, Adapter], gates: dict[str, JumpGate]) -> None:
    for gate, lids in _scope_units(adapters, gates).values():
        updates = [adapters[lid].down.data @ adapters[lid].up.data for lid in lids]
        budget = sum(adapters[lid].budget() for lid in lids)
        gate.threshold.data = np.asarray(init_threshold(updates, budget),
                                         dtype=gate.threshold.dtype)
        gate.initialized = True


def train_task(
    model: TinyTransformer,
    adapters: dict[str, Adapter],
    gates: Optional[dict[str, JumpGate]],
    stream: TaskStream,
    task_id: int,
    config: ExperimentConfig,
    penalty_weight: float = 0.0,
    ella_state: Optional[EllaState] = None,
    variant: EllaVariant = EllaVariant.SPARSE,
    run_seed: int = 0,
) -> TaskLog:
    """One epoch over the task's training split, exactly the per-step recipe:
    threshold init at the schedule start, interpolation factor update, dense /
    gated / interpolated updates, forward, loss plus optional overlap penalty,
    and an optimizer step over the factors and thresholds."""
    tokens, labels = stream.fetch(task_id, "train")
    n = len(labels)
    if n == 0:
        raise ConfigError(f"task {task_id} has no training data")
    batch = config.batch_size
    total_steps = math.ceil(n / batch)
    sched = schedule_from_fractions(total_steps, config.start_frac, config.end_frac)
    gating = gates is not None
    scaling = config.alpha / config.rank

    params = []
    for lid in model.adapted_layers:
        params.extend((adapters[lid].down, adapters[lid].up))
    thresholds = []
    if gating:
        seen = set()
        for gate in gates.values():
            if id(gate) not in seen:
                seen.add(id(gate))
                thresholds.append(gate.threshold)
    opt = AdamW(params + thresholds, lr=config.learning_rate,
                weight_decay=config.weight_decay, no_decay=thresholds,
                warmup_steps=config.warmup_steps)

    perm = named_rng(run_seed, f"shuffle/task{task_id}").permutation(n)
    losses = np.zeros(total_steps, dtype=np.float32)
    gammas: list[float] = []
    init_step = None

    for s in range(total_steps):
        if gating and s == sched.start_step:
            _initialize_gates(adapters, gates)
            init_step = s
        g = gamma(s, sched) if gating else 0.0
        gammas.append(g)
        idx = perm[s * batch:(s + 1) * batch]
        bt, bl = tokens[idx], labels[idx]

        with Tape() as tape:
            dense: dict[str, object] = {}
            gated_for_penalty: dict[str, object] = {}
            updates: dict[str, object] = {}
            for lid in model.adapted_layers:
                dw = dense_update(adapters[lid])
                dense[lid] = dw
                if gating and gates[lid].initialized:
                    dj = jump_update(dw, gates[lid])
                    di = interpolate_update(dw, dj, g)
                    gated_for_penalty[lid] = dj if variant is EllaVariant.SPARSE else di
                else:
                    di = dw
                    gated_for_penalty[lid] = None
                updates[lid] = di
            logits = model.forward(bt, updates, scaling)
            loss = cross_entropy(logits, bl)
            if penalty_weight > 0 and ella_state is not None:
                for lid in model.adapted_layers:
                    past = ella_state.past[lid]
                    if not past.any():
                        continue
                    pen = ella_penalty(dense[lid], gated_for_penalty[lid], past,
                                       penalty_weight, s, sched.start_step)
                    loss = add(loss, pen)
            losses[s] = loss.item()
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
        if gating:
            for th in thresholds:
                th.data = np.maximum(th.data, np.asarray(THRESHOLD_FLOOR, th.dtype))

    if gating and init_step is None:
        # schedule never reached its start inside this epoch
        log.warning("threshold init fell past the epoch; initializing at the end")
        _initialize_gates(adapters, gates)
        init_step = total_steps

    final_thresholds = {}
    if gating:
        final_thresholds = {lid: float(gates[lid].threshold.data.reshape(()))
                            for lid in model.adapted_layers}
    return TaskLog(task_id=task_id, position=-1, total_steps=total_steps,
                   losses=losses, gammas=gammas, threshold_init_step=init_step,
                   thresholds=final_thresholds, penalty_weight=penalty_weight)


def evaluate(model: TinyTransformer, stream: TaskStream, task_id: int,
             chunk: int = 256) -> float:
    """Task-agnostic test accuracy: argmax over the full union class head."""
    tokens, labels = stream.fetch(task_id, "test")
    correct = 0
    for lo in range(0, len(labels), chunk):
        logits = model.forward(tokens[lo:lo + chunk]).data
        correct += int((logits.argmax(axis=1) == labels[lo:lo + chunk]).sum())
    return correct / len(labels)


def resolve_order(n_tasks: int, order_index: int, data_seed: int) -> list[int]:
    """Order 0 is the natural stream order; higher indices are deterministic
    permutations derived from the data seed."""
    if order_index == 0:
        return list(range(n_tasks))
    rng = named_rng(data_seed, f"order/{order_index}")
    return [int(t) for t in rng.permutation(n_tasks)]


def _finish_task(model, adapters, gates, config, gating, scaling,
                 ella_state, penalty_scaled):
    """Hard-threshold, merge, mask, and accumulate the past-update state."""
    masks = {}
    merged = {}
    for lid in model.adapted_layers:
        if gating:
            dw_final = final_sparse_update(adapters[lid], gates[lid])
        else:
            dw_final = adapters[lid].down.data @ adapters[lid].up.data
        merged[lid] = dw_final
        masks[lid] = (dw_final != 0).astype(np.uint8)
        model.params[lid] = merge(model.params[lid], dw_final, scaling)
        if ella_state is not None:
            contribution = dw_final * scaling if penalty_scaled else dw_final
            update_past(ella_state, contribution, lid)
    return masks, merged


def run_stream(
    stream: TaskStream,
    config: ExperimentConfig,
    seed: int,
    order: Optional[list[int]] = None,
    *,
    gating: Optional[bool] = None,
    penalty_weights: Optional[list[float]] = None,
    variant: Optional[EllaVariant] = None,
) -> RunResult:
    """Full stream pass plus per-task isolated runs.

    The keyword axes override the method presets so degenerate modes (gating
    off, zero penalty) can be compared against the named baselines directly.
    """
    if gating is None:
        gating = config.method.gated
    if penalty_weights is None:
        penalty_weights = (config.penalty_weights() if config.method.penalized
                           else [0.0] * len(stream))
    if variant is None:
        variant = config.ella_variant
    if len(penalty_weights) != len(stream):
        raise ConfigError(
            f"{len(penalty_weights)} penalty weights for {len(stream)} tasks"
        )
    order = list(range(len(stream))) if order is None else list(order)
    scaling = config.alpha / config.rank
    hasher = hashlib.sha256()

    base = build_model(config.vocab_size, config.d_model, config.n_heads,
                       config.n_blocks, config.max_seq_len, stream.num_classes,
                       seed=seed)

    use_penalty = any(w > 0 for w in penalty_weights)
    layer_shapes = {lid: base.layer_shape(lid) for lid in base.adapted_layers}

    model = base.clone()
    ella_state = make_ella_state(layer_shapes, penalty_weights) if use_penalty else None
    matrix = AccuracyMatrix(len(stream))
    masks: dict[tuple[int, str], np.ndarray] = {}
    logs: list[TaskLog] = []

    for pos, tid in enumerate(order):
        adapters, gates = inject_adapters(model, config, seed, tid, gating)
        task_log = train_task(model, adapters, gates, stream, tid, config,
                              penalty_weight=penalty_weights[pos],
                              ella_state=ella_state, variant=variant,
                              run_seed=seed)
        task_log.position = pos
        logs.append(task_log)
        task_masks, merged = _finish_task(model, adapters, gates, config, gating,
                                          scaling, ella_state,
                                          config.ella_scale_past)
        for lid in model.adapted_layers:
            masks[(pos, lid)] = task_masks[lid]
        hasher.update(task_log.losses.tobytes())
        for lid in sorted(merged):
            hasher.update(merged[lid].tobytes())
        del adapters, gates  # adapters leave the model after the merge
        for j in range(pos + 1):
            matrix.set(pos + 1, j, evaluate(model, stream, order[j]))

    for pos, tid in enumerate(order):
        iso = base.clone()
        adapters, gates = inject_adapters(iso, config, seed, tid, gating)
        iso_state = make_ella_state(layer_shapes, penalty_weights) if use_penalty else None
        train_task(iso, adapters, gates, stream, tid, config,
                   penalty_weight=penalty_weights[pos], ella_state=iso_state,
                   variant=variant, run_seed=seed)
        _finish_task(iso, adapters, gates, config, gating, scaling, None, False)
        matrix.set_isolated(pos, evaluate(iso, stream, tid))

    hasher.update(matrix.grid.tobytes())
    return RunResult(order=order, matrix=matrix, masks=masks, logs=logs,
                     trace_hash=hasher.hexdigest(), model=model)
