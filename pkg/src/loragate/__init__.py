"""Continual learning with threshold-gated low-rank adapters."""

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
from .autodiff import Tape, Tensor, heaviside, jumprelu, threshold_pseudograd
from .config import ExperimentConfig, Method, load_config, parse_config_text
from .data import TaskStream, generate_task_stream
from .ella import EllaState, EllaVariant, ella_penalty, make_ella_state, update_past
from .errors import ConfigError, ShapeError, StateError
from .harness import RunResult, evaluate, run_stream, train_task
from .metrics import (
    AccuracyMatrix,
    SupportMask,
    backward_transfer,
    forward_transfer,
    jaccard_overlap,
    mean_prior_overlap,
    overall_accuracy,
    sparsity,
)
from .model import TinyTransformer, build_model
from .schedule import Schedule, gamma, schedule_from_fractions

__version__ = "0.1.0"
