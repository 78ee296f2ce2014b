"""Temporal aggregation: stacked two-branch cross-attention blocks.

Each block holds two cross-attention paths that share nothing but their
widths. The full branch attends a learned token over the period-aware frame
embeddings; the seasonal branch attends its own token over the seasonal part.
The trend part is reduced to a single vector by a temporal mean, added to the
fresh seasonal token, passed through a one-layer lateral map, and fused with
the full branch by an elementwise mean. Residual connections with pre-norm
layer normalization wrap every attention and feed-forward sub-layer; the
memory tensors are consumed unnormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn


@dataclass(frozen=True)
class TamState:
    """The pair of branch tokens threaded through the block stack."""

    token_full: Tensor
    token_seasonal: Tensor
    block_index: int = 0


class MultiHeadCrossAttention(nn.Module):
    """One query token attending over a frame memory, scaled dot-product.

    ``forward`` accepts a query of shape [..., C] and a memory of shape
    [..., T, C] with matching leading dims, and returns the attended output
    [..., C] together with the per-head attention weights [..., h, T].
    """

    def __init__(self, channels: int, heads: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.q_proj = nn.Linear(channels, channels, dtype=dtype)
        self.k_proj = nn.Linear(channels, channels, dtype=dtype)
        self.v_proj = nn.Linear(channels, channels, dtype=dtype)
        self.out_proj = nn.Linear(channels, channels, dtype=dtype)

    def forward(self, query: Tensor, memory: Tensor) -> tuple[Tensor, Tensor]:
        if memory.shape[-2] == 0:
            raise ValueError("attention memory is empty")
        if query.shape[-1] != self.channels or memory.shape[-1] != self.channels:
            raise ValueError(
                f"width mismatch: query {query.shape[-1]}, memory {memory.shape[-1]}, "
                f"expected {self.channels}"
            )
        lead = query.shape[:-1]
        frames = memory.shape[-2]

        q = self.q_proj(query).view(*lead, self.heads, self.head_dim)
        k = self.k_proj(memory).view(*lead, frames, self.heads, self.head_dim).transpose(-3, -2)
        v = self.v_proj(memory).view(*lead, frames, self.heads, self.head_dim).transpose(-3, -2)

        # [..., h, T, d] @ [..., h, d, 1] -> logits [..., h, T]
        logits = (k @ q.unsqueeze(-1)).squeeze(-1) / math.sqrt(self.head_dim)
        weights = torch.softmax(logits, dim=-1)
        attended = (weights.unsqueeze(-2) @ v).squeeze(-2)  # [..., h, d]
        out = self.out_proj(attended.reshape(*lead, self.channels))
        return out, weights


class FeedForward(nn.Module):
    """Position-wise two-layer feed-forward, C -> inner -> C."""

    def __init__(self, channels: int, inner: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.fc1 = nn.Linear(channels, inner, dtype=dtype)
        self.fc2 = nn.Linear(inner, channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class TamBlock(nn.Module):
    def __init__(self, channels: int, heads: int = 4, ffn_mult: int = 2, dtype: torch.dtype = torch.float64):
        super().__init__()
        inner = ffn_mult * channels
        self.channels = channels
        self.mhca_full = MultiHeadCrossAttention(channels, heads, dtype=dtype)
        self.mhca_seasonal = MultiHeadCrossAttention(channels, heads, dtype=dtype)
        self.ffn_full = FeedForward(channels, inner, dtype=dtype)
        self.ffn_seasonal = FeedForward(channels, inner, dtype=dtype)
        self.lateral = nn.Linear(channels, channels, dtype=dtype)
        self.norm_attn_full = nn.LayerNorm(channels, dtype=dtype)
        self.norm_ffn_full = nn.LayerNorm(channels, dtype=dtype)
        self.norm_attn_seasonal = nn.LayerNorm(channels, dtype=dtype)
        self.norm_ffn_seasonal = nn.LayerNorm(channels, dtype=dtype)

    def forward(self, state: TamState, x_pe: Tensor, seasonal: Tensor, trend: Tensor) -> TamState:
        """Advance both tokens one block.

        ``x_pe``, ``seasonal`` and ``trend`` are [..., T, C] memories sharing
        their frame count; tokens are [..., C].
        """
        for name, mem in (("x_pe", x_pe), ("seasonal", seasonal), ("trend", trend)):
            if mem.shape[-1] != self.channels:
                raise ValueError(f"{name} width {mem.shape[-1]} != block width {self.channels}")
        if not (x_pe.shape[-2] == seasonal.shape[-2] == trend.shape[-2]):
            raise ValueError("memory tensors must share their frame count")

        tf, ts = state.token_full, state.token_seasonal

        attn_full, _ = self.mhca_full(self.norm_attn_full(tf), x_pe)
        u = tf + attn_full
        x_hat = u + self.ffn_full(self.norm_ffn_full(u))

        attn_seas, _ = self.mhca_seasonal(self.norm_attn_seasonal(ts), seasonal)
        us = ts + attn_seas
        new_ts = us + self.ffn_seasonal(self.norm_ffn_seasonal(us))

        trend_token = trend.mean(dim=-2)
        fused = self.lateral(trend_token + new_ts)
        new_tf = (x_hat + fused) / 2
        return TamState(token_full=new_tf, token_seasonal=new_ts, block_index=state.block_index + 1)


class TamStack(nn.Module):
    """N blocks folded from learnable initial tokens; returns the final full token."""

    def __init__(
        self,
        layers: int,
        channels: int,
        heads: int = 4,
        ffn_mult: int = 2,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if layers < 1:
            raise ValueError(f"need at least one block; got {layers}")
        self.channels = channels
        self.blocks = nn.ModuleList(
            TamBlock(channels, heads=heads, ffn_mult=ffn_mult, dtype=dtype) for _ in range(layers)
        )
        self.token_full = nn.Parameter(torch.randn(channels, dtype=dtype) * 0.02)
        self.token_seasonal = nn.Parameter(torch.randn(channels, dtype=dtype) * 0.02)

    def initial_state(self, lead_shape: tuple[int, ...] = ()) -> TamState:
        tf = self.token_full.expand(*lead_shape, self.channels)
        ts = self.token_seasonal.expand(*lead_shape, self.channels)
        return TamState(token_full=tf, token_seasonal=ts, block_index=0)

    def forward(self, x_pe: Tensor, seasonal: Tensor, trend: Tensor) -> Tensor:
        state = self.initial_state(x_pe.shape[:-2])
        for block in self.blocks:
            state = block(state, x_pe, seasonal, trend)
        return state.token_full
