"""Self-supervised video hashing: a masked temporal autoencoder trained with a
debiased contrastive objective, producing compact binary codes for frame-feature
sequences, plus Hamming-space retrieval evaluation."""

__version__ = "0.1.0"

from maskhash.errors import (
    ArgumentError,
    ConfigError,
    EvaluationError,
    FormatError,
    MaskHashError,
    NumericalError,
)

__all__ = [
    "__version__",
    "MaskHashError",
    "ArgumentError",
    "ConfigError",
    "EvaluationError",
    "FormatError",
    "NumericalError",
]
