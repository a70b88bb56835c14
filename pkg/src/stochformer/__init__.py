"""Stochastic transformer for speech-based PTSD severity regression, built on a small autodiff core."""

from .dsp import AudioSignal, FeatureConfig, MfccMatrix, extract_mfcc
from .metrics import EvalReport, ccc, rmse
from .model import ModelConfig, StochasticTransformer, count_parameters
from .rng import RngStream
from .tensor import Tensor, finite_difference_check, no_grad
from .training import TrainConfig, TrainReport, train

__version__ = "0.1.0"

__all__ = [
    "AudioSignal", "EvalReport", "FeatureConfig", "MfccMatrix", "ModelConfig", "RngStream",
    "StochasticTransformer", "Tensor", "TrainConfig", "TrainReport", "ccc", "count_parameters",
    "extract_mfcc", "finite_difference_check", "no_grad", "rmse", "train",
]
