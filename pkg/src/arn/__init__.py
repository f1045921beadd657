"""Shared/private feature decomposition for unsupervised cross-domain person re-identification."""

from .core import (
    VARIANTS,
    AblationFlags,
    ConfigError,
    DatasetSplit,
    Domain,
    LabeledSample,
    LossWeights,
    ModelConfig,
    TrainConfig,
)
from .data import SynthConfig, generate_synthetic
from .evaluator import evaluate
from .network import ARN, build_model
from .trainer import fit

__all__ = [
    "ARN",
    "VARIANTS",
    "AblationFlags",
    "ConfigError",
    "DatasetSplit",
    "Domain",
    "LabeledSample",
    "LossWeights",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
    "build_model",
    "evaluate",
    "fit",
    "generate_synthetic",
]
