"""Periodic-sequence metric learning toolkit.

Builds sequence embeddings that are sensitive to the periodic structure of
gait-like signals: sampled Fourier bases are turned into learned position
encodings, injected into part-level features, split into trend and seasonal
components, and aggregated by stacked cross-attention blocks. Training
combines a temporal triplet loss with an angular-margin classification loss.
Everything runs in float64 on CPU so gradients and artifacts are exactly
reproducible.
"""

__version__ = "0.1.0"

from .afpe import BaseSequenceSet, PositionEncoder, PositionTable, build_base_sequences, encode_positions, gather_add
from .decompose import Decomposition, trend_seasonal

__all__ = [
    "BaseSequenceSet",
    "PositionEncoder",
    "PositionTable",
    "build_base_sequences",
    "encode_positions",
    "gather_add",
    "Decomposition",
    "trend_seasonal",
    "__version__",
]
