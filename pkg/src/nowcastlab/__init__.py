"""Precipitation nowcasting lab: SmaAt-UNet family models with auxiliary
weather inputs and an advection-based evolution network."""

__version__ = "0.1.0"

from .datamodel import FrameSequence, Sample, Unit, Variable, VariableStats
from .estimator import NowcastForecaster, VariableNormalizer
from .evaluation import MetricReport, evaluate_model
from .exceptions import (
    ConfigurationError,
    CorruptDatasetError,
    CountMismatchError,
    InvalidInputError,
    NowcastError,
    ShapeError,
    TrainingDivergedError,
)
from .models import ModelConfig, ModelVariant, build_model, count_parameters
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = [
    "ConfigurationError",
    "CorruptDatasetError",
    "CountMismatchError",
    "FrameSequence",
    "InvalidInputError",
    "MetricReport",
    "ModelConfig",
    "ModelVariant",
    "NowcastForecaster",
    "NowcastError",
    "Sample",
    "ShapeError",
    "TrainConfig",
    "TrainingDivergedError",
    "Unit",
    "Variable",
    "VariableNormalizer",
    "VariableStats",
    "build_model",
    "count_parameters",
    "evaluate_model",
    "fit",
    "load_checkpoint",
    "save_checkpoint",
]
