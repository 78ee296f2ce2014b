"""Trend/seasonal split of feature sequences along the time axis.

The trend is a centered moving average over the last axis with edge
replication at both boundaries; the seasonal part is the residual, so the two
always reconstruct the input exactly. For an even window W the average covers
frames [t - W//2, t + W//2 - 1], i.e. one extra frame toward the past.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class Decomposition:
    trend: Tensor
    seasonal: Tensor
    window: int


def trend_seasonal(x: Tensor, window: int) -> Decomposition:
    """Split ``x`` ([..., T]) into trend and seasonal parts.

    Windows larger than T are allowed; the replicated edges then dominate the
    average, which degenerates to the global temporal mean on constant input.
    """
    if window < 1:
        raise ValueError(f"window must be positive; got {window}")
    seq_len = x.shape[-1]
    if seq_len < 1:
        raise ValueError("input must have at least one frame")
    left = window // 2
    right = window - left - 1
    idx = torch.arange(-left, seq_len + right, device=x.device).clamp_(0, seq_len - 1)
    padded = x[..., idx]
    trend = padded.unfold(-1, window, 1).mean(-1)
    return Decomposition(trend=trend, seasonal=x - trend, window=window)
