"""End-to-end model assembly and retrieval evaluation.

The model consumes either rendered silhouette sequences (toy two-stage strided
conv stand-in for a backbone, then horizontal part pooling) or precomputed
part features. Sampled frames get position encodings gathered from the
full-length table by absolute index, are split into trend and seasonal parts,
and are aggregated per part by a shared cross-attention stack. Separate
per-part heads map the aggregate to metric and classification space.

All arithmetic is float64 and deterministic under fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .afpe import PositionEncoder, build_base_sequences, gather_add
from .config import RunConfig
from .decompose import trend_seasonal
from .synth import SilhouetteSequence, SyntheticSequence
from .tam import TamStack

DTYPE = torch.float64


@dataclass(frozen=True)
class PartFeatureSequence:
    """Part-level features [parts, channels, sampled frames] plus the absolute
    frame indexes the samples came from."""

    values: Tensor
    source_indexes: np.ndarray


def tsn_sample(seq_len: int, n_frames: int, mode: str, seed: int = 0) -> np.ndarray:
    """Segment-wise frame sampling: one index per equal segment, ascending.

    Test mode takes the floor of each segment midpoint; train mode draws
    uniformly inside each segment from a generator seeded with ``seed``.
    Segments shorter than one frame map to their clamped position, so short
    sequences yield repeated indexes.
    """
    if n_frames < 1:
        raise ValueError(f"n_frames must be positive; got {n_frames}")
    if seq_len < 1:
        raise ValueError(f"seq_len must be positive; got {seq_len}")
    i = np.arange(n_frames, dtype=np.int64)
    if mode == "test":
        return (2 * i + 1) * seq_len // (2 * n_frames)
    if mode == "train":
        rng = np.random.default_rng(seed)
        lo = i * seq_len // n_frames
        hi = (i + 1) * seq_len // n_frames  # exclusive
        draws = rng.integers(lo, np.maximum(hi, lo + 1))
        return np.where(hi > lo, draws, np.minimum(lo, seq_len - 1))
    raise ValueError(f"mode must be 'train' or 'test'; got {mode!r}")


class ToySpatialEncoder(nn.Module):
    """Two learnable stride-2 filter stages; no temporal reduction."""

    def __init__(self, in_channels: int, out_channels: int, dtype: torch.dtype = DTYPE):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1, dtype=dtype)

    def forward(self, frames: Tensor) -> Tensor:
        """[C_i, T, H, W] -> [C_o, T, H/4, W/4]."""
        _, _, height, width = frames.shape
        if height % 4 != 0 or width % 4 != 0:
            raise ValueError(
                f"spatial dims must be divisible by 4 for two stride-2 stages; got {height}x{width}"
            )
        x = frames.transpose(0, 1)  # frames as batch: [T, C_i, H, W]
        x = self.conv2(torch.nn.functional.gelu(self.conv1(x)))
        return x.transpose(0, 1)


def horizontal_pool(featmap: Tensor, parts: int) -> Tensor:
    """Split the height axis into equal strips; per strip emit max + mean.

    [..., C, T, H, W] -> [..., parts, C, T].
    """
    *lead, channels, frames, height, width = featmap.shape
    if parts < 1:
        raise ValueError("parts must be positive")
    if height % parts != 0:
        raise ValueError(f"height {height} not divisible into {parts} strips")
    strips = featmap.reshape(*lead, channels, frames, parts, height // parts, width)
    pooled = strips.amax(dim=(-2, -1)) + strips.mean(dim=(-2, -1))  # [..., C, T, P]
    return pooled.movedim(-1, -3)


class PartHeads(nn.Module):
    """Per-part running-stats normalization, metric projection, class weights."""

    def __init__(self, parts: int, channels: int, metric_channels: int, n_classes: int,
                 dtype: torch.dtype = DTYPE):
        super().__init__()
        self.parts = parts
        self.norm = nn.BatchNorm1d(parts * channels, dtype=dtype)
        self.metric_weight = nn.Parameter(torch.empty(parts, metric_channels, channels, dtype=dtype))
        self.metric_bias = nn.Parameter(torch.zeros(parts, metric_channels, dtype=dtype))
        self.class_weights = nn.Parameter(torch.empty(parts, n_classes, metric_channels, dtype=dtype))
        nn.init.kaiming_uniform_(self.metric_weight, a=5 ** 0.5)
        nn.init.xavier_normal_(self.class_weights)

    def forward(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """[B, P, C] -> metric [B, P, C_m], logits [B, P, n]."""
        batch, parts, channels = tokens.shape
        normed = self.norm(tokens.reshape(batch, parts * channels)).reshape(batch, parts, channels)
        metric = torch.einsum("pmc,bpc->bpm", self.metric_weight, normed) + self.metric_bias
        logits = torch.einsum("pnm,bpm->bpn", self.class_weights, metric)
        return metric, logits


class GaitModel(nn.Module):
    """Full pipeline over a batch of sequences.

    ``aggregation="tpa"`` runs position encoding, decomposition and the
    cross-attention stack; ``"maxpool"`` is the ablation that replaces all of
    that with a temporal max over the sampled frames.
    """

    def __init__(self, cfg: RunConfig, n_classes: int, dtype: torch.dtype = DTYPE):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.n_classes = n_classes
        self.encoder = ToySpatialEncoder(cfg.in_channels, cfg.channels, dtype=dtype)
        if cfg.aggregation == "tpa":
            self.pos_encoder = PositionEncoder(cfg.td, cfg.channels, dtype=dtype)
            self.tam = TamStack(
                cfg.tam_layers, cfg.channels, heads=cfg.heads, ffn_mult=cfg.ffn_mult, dtype=dtype
            )
        else:
            self.pos_encoder = None
            self.tam = None
        self.heads = PartHeads(cfg.parts, cfg.channels, cfg.metric_channels, n_classes, dtype=dtype)
        self._dtype = dtype

    # ---- per-sequence feature extraction -------------------------------

    def sample_parts(self, seq, mode: str, seed: int = 0) -> PartFeatureSequence:
        """Sample frames and produce part features [P, C, T_s] for one sequence."""
        cfg = self.cfg
        if isinstance(seq, SyntheticSequence):
            seq_len = seq.features.shape[2]
            idx = tsn_sample(seq_len, cfg.seq_frames, mode, seed)
            feats = torch.as_tensor(seq.features, dtype=self._dtype)
            if feats.shape[0] != cfg.parts or feats.shape[1] != cfg.channels:
                raise ValueError(
                    f"feature input is [{feats.shape[0]}, {feats.shape[1]}, ...]; "
                    f"model expects parts={cfg.parts}, channels={cfg.channels}"
                )
            return PartFeatureSequence(values=feats[:, :, idx], source_indexes=idx)
        if isinstance(seq, SilhouetteSequence):
            seq_len = seq.frames.shape[1]
            idx = tsn_sample(seq_len, cfg.seq_frames, mode, seed)
            frames = torch.as_tensor(seq.frames[:, idx], dtype=self._dtype)
            fmap = self.encoder(frames)
            pooled = horizontal_pool(fmap, cfg.parts)
            return PartFeatureSequence(values=pooled, source_indexes=idx)
        raise ValueError(f"unsupported sequence type {type(seq).__name__}")

    @staticmethod
    def full_length(seq) -> int:
        if isinstance(seq, SyntheticSequence):
            return seq.features.shape[2]
        if isinstance(seq, SilhouetteSequence):
            return seq.frames.shape[1]
        raise ValueError(f"unsupported sequence type {type(seq).__name__}")

    def position_table(self, seq_len: int) -> Tensor:
        """Full-length encoding table [T, C] for a sequence length."""
        bases = build_base_sequences(seq_len, self.cfg.td, dtype=self._dtype)
        return self.pos_encoder(bases.values)

    # ---- batched forward ------------------------------------------------

    def embed(self, sequences, mode: str, seeds=None) -> Tensor:
        """Aggregate a list of sequences into per-part tokens [B, P, C]."""
        if not sequences:
            raise ValueError("empty batch")
        cfg = self.cfg
        if seeds is None:
            seeds = [0] * len(sequences)
        parts_list = [self.sample_parts(s, mode, seed) for s, seed in zip(sequences, seeds)]

        if cfg.aggregation == "maxpool":
            return torch.stack([p.values for p in parts_list]).amax(dim=-1)

        xpe = torch.stack(
            [
                gather_add(p.values, self.position_table(self.full_length(s)), p.source_indexes)
                for s, p in zip(sequences, parts_list)
            ]
        )  # [B, P, C, T_s]
        dec = trend_seasonal(xpe, cfg.window)

        def as_memory(t: Tensor) -> Tensor:
            # [B, P, C, T_s] -> [B*P, T_s, C]
            batch, parts, channels, frames = t.shape
            return t.permute(0, 1, 3, 2).reshape(batch * parts, frames, channels)

        token = self.tam(as_memory(xpe), as_memory(dec.seasonal), as_memory(dec.trend))
        return token.reshape(xpe.shape[0], cfg.parts, cfg.channels)

    def forward(self, sequences, mode: str = "train", seeds=None):
        """Run the pipeline; train mode returns (metric, logits), test mode
        returns only the metric tensor."""
        if mode not in ("train", "test"):
            raise ValueError(f"mode must be 'train' or 'test'; got {mode!r}")
        tokens = self.embed(sequences, mode, seeds)
        metric, logits = self.heads(tokens)
        if mode == "test":
            return metric
        return metric, logits

    # ---- per-frame features for similarity analysis ---------------------

    def frame_features(self, seq, stage: str = "pre") -> np.ndarray:
        """Frame-level descriptors [T, parts*channels] for one full sequence.

        stage "raw":  part features as-is.
        stage "pre":  after position-encoding injection (equals raw for the
                      max-pool ablation, which has no encoding).
        stage "post": each frame as the final aggregation block values it on
                      its seasonal branch, i.e. the value projection of the
                      decomposed seasonal part. The seasonal path is the
                      carrier of the periodic template (the trend absorbs
                      offsets, slow appearance drift and the slowly varying
                      position rows), so this is the learned per-frame
                      representation the last attention layer aggregates.
                      Equals "raw" for the ablation, which learns no
                      frame-level transform.
        """
        if stage not in ("raw", "pre", "post"):
            raise ValueError(f"stage must be raw/pre/post; got {stage!r}")
        cfg = self.cfg
        seq_len = self.full_length(seq)
        with torch.no_grad():
            if isinstance(seq, SyntheticSequence):
                xp = torch.as_tensor(seq.features, dtype=self._dtype)
            else:
                frames = torch.as_tensor(seq.frames, dtype=self._dtype)
                xp = horizontal_pool(self.encoder(frames), cfg.parts)
            if stage == "raw" or cfg.aggregation == "maxpool":
                feats = xp
            else:
                table = self.position_table(seq_len)
                xpe = gather_add(xp, table, np.arange(seq_len))
                if stage == "pre":
                    feats = xpe
                else:
                    dec = trend_seasonal(xpe, cfg.window)
                    values = self.tam.blocks[-1].mhca_seasonal.v_proj(
                        dec.seasonal.permute(0, 2, 1)  # [P, T, C]
                    )
                    return values.permute(1, 0, 2).reshape(seq_len, -1).numpy()
        return feats.permute(2, 0, 1).reshape(seq_len, -1).numpy()


def build_model(cfg: RunConfig, n_classes: int) -> GaitModel:
    """Construct a model with all parameters drawn under cfg.seed."""
    torch.manual_seed(cfg.seed)
    return GaitModel(cfg, n_classes)


# ---- retrieval evaluation -----------------------------------------------


@dataclass(frozen=True)
class GalleryProbeResult:
    rank_k_accuracy: dict
    per_query_nearest: list
    excluded_probes: int


def rank_eval(gallery, probe, ranks=(1, 5)) -> GalleryProbeResult:
    """Rank-k retrieval accuracy excluding identical-view gallery entries.

    ``gallery`` and ``probe`` are sequences of (embedding [P, C], identity,
    view). The distance is the mean over parts of per-part Euclidean
    distances. Probes with no valid gallery entry after view exclusion are
    dropped from the denominator and counted in ``excluded_probes``.
    """
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    g_emb = np.stack([np.asarray(e, dtype=np.float64) for e, _, _ in gallery])
    g_id = np.array([i for _, i, _ in gallery])
    g_view = np.array([v for _, _, v in gallery])

    max_rank = max(ranks)
    hits = {k: 0 for k in ranks}
    nearest = []
    excluded = 0
    evaluated = 0
    for emb, ident, view in probe:
        e = np.asarray(emb, dtype=np.float64)
        valid = g_view != view
        if not valid.any():
            excluded += 1
            continue
        evaluated += 1
        dists = np.linalg.norm(g_emb[valid] - e[None], axis=-1).mean(axis=-1)
        order = np.argsort(dists, kind="stable")
        cand_ids = g_id[valid][order]
        nearest.append((ident, int(cand_ids[0]), float(dists[order[0]])))
        top = cand_ids[:max_rank]
        for k in ranks:
            if ident in top[:k]:
                hits[k] += 1
    acc = {k: (hits[k] / evaluated if evaluated else 0.0) for k in ranks}
    return GalleryProbeResult(rank_k_accuracy=acc, per_query_nearest=nearest, excluded_probes=excluded)
