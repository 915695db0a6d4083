"""Multi-instance bag classifier with self-attention and attention pooling, on a numpy autodiff engine."""

from .data import Record, SyntheticSpec, Vocabulary, build_vocabulary, encode_and_pad, generate_synthetic
from .metrics import MetricReport, evaluate
from .model import BagBatch, ModelConfig, ModelParameters, forward, init_parameters
from .training import TrainConfig, cross_validate, fit

__all__ = [
    "BagBatch",
    "MetricReport",
    "ModelConfig",
    "ModelParameters",
    "Record",
    "SyntheticSpec",
    "TrainConfig",
    "Vocabulary",
    "build_vocabulary",
    "cross_validate",
    "encode_and_pad",
    "evaluate",
    "fit",
    "forward",
    "generate_synthetic",
    "init_parameters",
]

__version__ = "0.1.0"
