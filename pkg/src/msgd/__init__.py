"""Multiplicative SGD: gradient noise built as gradient matrix times sampling noise."""

from msgd.estimators import MSGDClassifier, MSGDRegressor
from msgd.noise import Kind, SamplingSpec
from msgd.rng import RngStream, derive_stream

__all__ = [
    "Kind",
    "MSGDClassifier",
    "MSGDRegressor",
    "RngStream",
    "SamplingSpec",
    "derive_stream",
]

__version__ = "0.1.0"
