"""Desk-scale traffic forecasting with a selective state-space backbone.

Pure-numpy implementation: a small reverse-mode tape (:mod:`~stmamba.tensor`),
dataset handling (:mod:`~stmamba.data`), adaptive spatial-temporal embeddings
(:mod:`~stmamba.embedding`), the selective scan layer (:mod:`~stmamba.ssm`),
model assembly and checkpoints (:mod:`~stmamba.model`), training and metrics
(:mod:`~stmamba.training`), scaling benchmarks (:mod:`~stmamba.bench`), and
finite-difference gradient verification (:mod:`~stmamba.gradcheck`).
"""

from .errors import (
    ConfigError,
    DataError,
    DegenerateFeatureError,
    InsufficientDataError,
    NumericError,
    ShapeError,
    StabilityError,
    StMambaError,
)
from .model import ModelConfig, ModelState, init_model_state, parameter_count
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateFeatureError",
    "InsufficientDataError",
    "ModelConfig",
    "ModelState",
    "NumericError",
    "ShapeError",
    "StabilityError",
    "StMambaError",
    "Tape",
    "Tensor",
    "init_model_state",
    "parameter_count",
    "__version__",
]
