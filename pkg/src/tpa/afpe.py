"""Fourier base sequences and the learned position encoding built on them.

A sequence of length T is described by ``td`` sinusoid pairs sampled evenly
from the nonzero inverse-DFT components. Each retained harmonic k contributes
one cosine row and one sine row over frames 0..T-1. A two-layer perceptron
maps the 2*td basis values at each frame to a C-channel encoding, giving one
encoding row per absolute frame index; sampled frames then gather their rows
by index and add them onto part features.

Even sampling picks k = j * floor(T / td). Whenever that lands on a multiple
of T the sinusoids alias to a constant, information-free row (always the case
for td = 1), so the harmonic set is repaired: indices are reduced modulo T,
zeros are replaced by the fundamental k = 1, and collisions are bumped up to
the nearest unused index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

_ACTIVATIONS = {
    "gelu": torch.nn.functional.gelu,
    "tanh": torch.tanh,
    "softplus": torch.nn.functional.softplus,
}


@dataclass(frozen=True)
class BaseSequenceSet:
    """Sampled cos/sin basis rows for one sequence length.

    ``values`` has shape [2 * td, seq_len]; row 2j is the cosine and row
    2j + 1 the sine of harmonic ``k_indices[j]``.
    """

    seq_len: int
    td: int
    k_indices: tuple[int, ...]
    values: Tensor


@dataclass(frozen=True)
class PositionTable:
    """Per-frame encodings for a full-length sequence, shape [seq_len, channels]."""

    values: Tensor
    seq_len: int
    channels: int


def select_harmonics(seq_len: int, td: int) -> list[int]:
    """Pick td harmonic indices by even sampling, with the aliasing repair."""
    if td < 1 or td > seq_len:
        raise ValueError(f"td must lie in [1, seq_len]; got td={td}, seq_len={seq_len}")
    step = seq_len // td
    chosen: list[int] = []
    used: set[int] = set()
    for j in range(1, td + 1):
        k = (j * step) % seq_len
        if k == 0:
            k = 1
        while k in used:
            k += 1
        used.add(k)
        chosen.append(k)
    return chosen


def build_base_sequences(seq_len: int, td: int, dtype: torch.dtype = torch.float64) -> BaseSequenceSet:
    """Build the [2*td, seq_len] cos/sin basis matrix for a sequence length."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be positive; got {seq_len}")
    ks = select_harmonics(seq_len, td)
    t = torch.arange(seq_len, dtype=dtype)
    k = torch.tensor(ks, dtype=dtype).unsqueeze(1)
    angles = 2.0 * math.pi * k * t / seq_len  # [td, T]
    values = torch.empty(2 * td, seq_len, dtype=dtype)
    values[0::2] = torch.cos(angles)
    values[1::2] = torch.sin(angles)
    return BaseSequenceSet(seq_len=seq_len, td=td, k_indices=tuple(ks), values=values)


class PositionEncoder(nn.Module):
    """Two-layer perceptron mapping per-frame basis values to encodings.

    Applied pointwise in time: frame t's column of the basis matrix (a
    2*td-vector) goes through linear -> activation -> linear and comes out as
    a C-channel encoding row. The hidden width defaults to the output width.
    """

    def __init__(
        self,
        td: int,
        channels: int,
        hidden: int | None = None,
        activation: str = "gelu",
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if td < 1 or channels < 1:
            raise ValueError("td and channels must be positive")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; options: {sorted(_ACTIVATIONS)}")
        hidden = channels if hidden is None else hidden
        self.td = td
        self.channels = channels
        self.fc1 = nn.Linear(2 * td, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, channels, dtype=dtype)
        self.activation = activation

    def forward(self, basis_values: Tensor) -> Tensor:
        """[2*td, T] basis matrix -> [T, C] encoding table."""
        if basis_values.shape[0] != 2 * self.td:
            raise ValueError(
                f"basis has {basis_values.shape[0]} rows, encoder expects {2 * self.td}"
            )
        act = _ACTIVATIONS[self.activation]
        return self.fc2(act(self.fc1(basis_values.transpose(0, 1))))


def encode_positions(bases: BaseSequenceSet, encoder: PositionEncoder) -> PositionTable:
    """Run the basis set through the encoder, one table row per frame."""
    values = encoder(bases.values)
    return PositionTable(values=values, seq_len=bases.seq_len, channels=encoder.channels)


def gather_add(features: Tensor, table_values: Tensor, indexes) -> Tensor:
    """Add table rows, selected by absolute frame index, onto sampled features.

    ``features`` is [..., C, T_s] (typically [P, C, T_s]), ``table_values`` is
    [T, C], and ``indexes`` holds the T_s absolute frame indices of the
    sampled columns. Out-of-range indices are rejected, never clamped.
    """
    idx = torch.as_tensor(indexes, dtype=torch.long)
    if idx.ndim != 1:
        raise ValueError(f"indexes must be one-dimensional; got shape {tuple(idx.shape)}")
    seq_len, channels = table_values.shape
    if features.shape[-2] != channels:
        raise ValueError(
            f"feature channels {features.shape[-2]} != table channels {channels}"
        )
    if features.shape[-1] != idx.shape[0]:
        raise ValueError(
            f"features have {features.shape[-1]} sampled frames but {idx.shape[0]} indexes given"
        )
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= seq_len):
        raise ValueError(
            f"frame indexes must lie in [0, {seq_len}); got range [{int(idx.min())}, {int(idx.max())}]"
        )
    return features + table_values[idx].transpose(0, 1)
