"""Mixture-of-Transformers toolkit: modality-untied transformer layers, objectives and desk-scale experiments."""

from .core import (
    AttentionMode,
    ConfigError,
    DiffusionConfig,
    MixedSequence,
    ModelConfig,
    NumericError,
    ObjectiveMode,
    ParamStore,
    Sparsity,
    init_params,
    validate_config,
)
from .model import ModelState, TrainConfig, collate, compute_loss, forward, generate, train_step

__version__ = "0.1.0"

__all__ = [
    "AttentionMode",
    "ConfigError",
    "DiffusionConfig",
    "MixedSequence",
    "ModelConfig",
    "ModelState",
    "NumericError",
    "ObjectiveMode",
    "ParamStore",
    "Sparsity",
    "TrainConfig",
    "collate",
    "compute_loss",
    "forward",
    "generate",
    "init_params",
    "train_step",
    "validate_config",
]
