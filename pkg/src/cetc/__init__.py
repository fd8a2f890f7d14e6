"""Controllable ensemble CNN-transformer classifier on a minimal tensor core."""

from .autodiff import GradTape, NumericsError, Parameter, ShapeError, Tensor, backward
from .decoder import EnsembleCoefficients, ensemble_sum
from .encoder import CEB, CEBOutput, SubEncoderConfig
from .metrics import ConfusionMatrix, MetricReport, compute_metrics, confusion_matrix
from .model import CETC, ModelConfig
from .ops import ConvSpec
from .transformer import TCB, TCBConfig

__all__ = [
    "Tensor",
    "Parameter",
    "GradTape",
    "backward",
    "ShapeError",
    "NumericsError",
    "ConvSpec",
    "SubEncoderConfig",
    "CEB",
    "CEBOutput",
    "EnsembleCoefficients",
    "ensemble_sum",
    "TCB",
    "TCBConfig",
    "ModelConfig",
    "CETC",
    "ConfusionMatrix",
    "MetricReport",
    "confusion_matrix",
    "compute_metrics",
]

__version__ = "0.1.0"
