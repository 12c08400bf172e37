"""Flat key = value experiment configuration with a strict schema.

Unknown keys are hard errors; silent hyperparameter typos are the dominant
reproduction hazard. ``parse_config`` and ``format_config`` round-trip
exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields
from pathlib import Path

from .adapter import GateScope
from .ella import EllaVariant
from .errors import ConfigError


class Method(enum.Enum):
    INCLORA = "inclora"
    JUMP_INCLORA = "jump-inclora"
    ELLA = "ella"
    JUMP_ELLA = "jump-ella"

    @property
    def gated(self) -> bool:
        return self in (Method.JUMP_INCLORA, Method.JUMP_ELLA)

    @property
    def penalized(self) -> bool:
        return self in (Method.ELLA, Method.JUMP_ELLA)


@dataclass
class ExperimentConfig:
    # model shape
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    max_seq_len: int = 32
    # stream
    n_tasks: int = 4
    classes_per_task: int = 3
    samples_per_class: int = 256
    seq_len: int = 16
    difficulty: float = 0.25
    data_seed: int = 7
    # method
    method: Method = Method.JUMP_INCLORA
    gate_scope: GateScope = GateScope.GLOBAL
    ella_variant: EllaVariant = EllaVariant.SPARSE
    ella_lambda: list[float] = field(default_factory=lambda: [0.0])
    ella_scale_past: bool = False
    # adapters
    rank: int = 8
    alpha: float = 32.0
    bandwidth: float = 0.001
    # schedule
    start_frac: float = 0.2
    end_frac: float = 0.8
    # training
    learning_rate: float = 0.001
    batch_size: int = 32
    warmup_steps: int = 10
    weight_decay: float = 0.0
    seeds: list[int] = field(default_factory=lambda: [42, 43, 44])
    n_orders: int = 1
    # output
    output_dir: str = "runs/default"

    def penalty_weights(self) -> list[float]:
        """Per-task penalty weights (single values broadcast to all tasks)."""
        lam = self.ella_lambda
        if len(lam) == 1:
            return [lam[0]] * self.n_tasks
        return list(lam)


_ENUM_FIELDS = {"method": Method, "gate_scope": GateScope, "ella_variant": EllaVariant}
_LIST_FIELDS = {"ella_lambda": float, "seeds": int}


def _parse_value(name: str, text: str, pytype):
    text = text.strip()
    try:
        if name in _ENUM_FIELDS:
            return _ENUM_FIELDS[name](text)
        if name in _LIST_FIELDS:
            items = [s.strip() for s in text.split(",") if s.strip()]
            if not items:
                raise ValueError("empty list")
            return [_LIST_FIELDS[name](s) for s in items]
        if pytype is bool:
            if text.lower() in ("true", "false"):
                return text.lower() == "true"
            raise ValueError(f"expected true/false, got {text!r}")
        if pytype is int:
            return int(text)
        if pytype is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {exc}") from exc


def _format_value(name: str, value) -> str:
    if name in _ENUM_FIELDS:
        return value.value
    if name in _LIST_FIELDS:
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> ExperimentConfig:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    pytypes = {f.name: type(getattr(ExperimentConfig(), f.name)) for f in fields(ExperimentConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value, pytypes[key])
    cfg = ExperimentConfig(**values)
    validate_config(cfg, explicit=set(values))
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def _applicable_fields(cfg: ExperimentConfig) -> list[str]:
    names = [f.name for f in fields(ExperimentConfig)]
    if cfg.method is not Method.JUMP_ELLA:
        names.remove("ella_variant")
    if not cfg.method.gated:
        names.remove("gate_scope")
    if not cfg.method.penalized:
        names.remove("ella_scale_past")
    return names


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical dump; knobs inert for the chosen method are omitted so the
    text re-parses cleanly under the method-grid validation."""
    lines = [f"{name} = {_format_value(name, getattr(cfg, name))}"
             for name in _applicable_fields(cfg)]
    return "\n".join(lines) + "\n"


def validate_config(cfg: ExperimentConfig, explicit: set | None = None) -> None:
    """Reject inconsistent settings; ``explicit`` holds keys the user wrote."""
    explicit = explicit or set()
    if cfg.d_model % cfg.n_heads != 0:
        raise ConfigError(f"d_model {cfg.d_model} not divisible by n_heads {cfg.n_heads}")
    if cfg.bandwidth <= 0:
        raise ConfigError(f"bandwidth must be positive, got {cfg.bandwidth}")
    if not (0.0 <= cfg.start_frac <= cfg.end_frac <= 1.0):
        raise ConfigError(
            f"fractions must satisfy 0 <= start <= end <= 1, got "
            f"({cfg.start_frac}, {cfg.end_frac})"
        )
    if cfg.rank < 1 or cfg.alpha <= 0:
        raise ConfigError("rank must be >= 1 and alpha positive")
    if cfg.learning_rate <= 0 or cfg.batch_size < 1 or cfg.warmup_steps < 0:
        raise ConfigError("learning_rate > 0, batch_size >= 1, warmup_steps >= 0 required")
    if cfg.weight_decay < 0:
        raise ConfigError(f"weight_decay must be nonnegative, got {cfg.weight_decay}")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if cfg.n_orders < 1:
        raise ConfigError(f"n_orders must be >= 1, got {cfg.n_orders}")
    if not (0.0 <= cfg.difficulty <= 1.0):
        raise ConfigError(f"difficulty must lie in [0, 1], got {cfg.difficulty}")
    if cfg.max_seq_len < cfg.seq_len:
        raise ConfigError(
            f"seq_len {cfg.seq_len} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if any(w < 0 for w in cfg.ella_lambda):
        raise ConfigError("ella_lambda values must be nonnegative")
    if len(cfg.ella_lambda) not in (1, cfg.n_tasks):
        raise ConfigError(
            f"ella_lambda needs 1 or n_tasks={cfg.n_tasks} values, "
            f"got {len(cfg.ella_lambda)}"
        )
    # combinations outside the supported method grid
    if not cfg.method.penalized and any(w != 0 for w in cfg.ella_lambda):
        raise ConfigError(f"nonzero ella_lambda requires an ELLA method, got {cfg.method.value}")
    if "ella_variant" in explicit and cfg.method is not Method.JUMP_ELLA:
        raise ConfigError(
            f"ella_variant only applies to method jump-ella, got {cfg.method.value}"
        )
    if "gate_scope" in explicit and not cfg.method.gated:
        raise ConfigError(
            f"gate_scope only applies to gated methods, got {cfg.method.value}"
        )
    if "ella_scale_past" in explicit and not cfg.method.penalized:
        raise ConfigError(
            f"ella_scale_past only applies to ELLA methods, got {cfg.method.value}"
        )
