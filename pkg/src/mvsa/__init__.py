"""Windowed multi-head self-attention for speaker embeddings.

A small, self-contained stack: a float64 tensor library with reverse-mode
differentiation, per-head sliding-window attention masks, encoder/decoder
speaker-embedding architectures, a deterministic training loop, and
identification/verification evaluation — plus a CLI tying it together.
"""

__version__ = "0.1.0"

from .config import ModelConfig, ScheduleConfig, TrainingConfig
from .errors import ConfigError, DataError, MvsaError, NumericError, ShapeError, UsageError
from .masks import MaskSet, WindowSchedule, band_mask, build_mask_set, head_window
from .rng import RngState
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "ModelConfig",
    "ScheduleConfig",
    "TrainingConfig",
    "MvsaError",
    "UsageError",
    "ConfigError",
    "DataError",
    "ShapeError",
    "NumericError",
    "MaskSet",
    "WindowSchedule",
    "band_mask",
    "build_mask_set",
    "head_window",
    "RngState",
    "Tensor",
    "grad_check",
    "no_grad",
    "__version__",
]
