"""Self-similarity matrices, autocorrelation period estimation, heatmap dumps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray  # [T, T], entries in [-1, 1]
    frame_count: int


def self_similarity(features: np.ndarray) -> SimilarityMatrix:
    """Cosine similarity between every pair of frame rows of [T, C] features."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"expected [T, C] features; got shape {feats.shape}")
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm frame row has no direction")
    unit = feats / norms
    values = np.clip(unit @ unit.T, -1.0, 1.0)
    return SimilarityMatrix(values=values, frame_count=feats.shape[0])


def _normalized_autocorr(features: np.ndarray, max_lag: int) -> np.ndarray | None:
    """Unbiased per-lag autocorrelation of mean-centered frame vectors.

    r[l] = (mean over t of <x_t, x_{t+l}>) / (mean over t of |x_t|^2), so
    r[0] = 1 and an exactly periodic signal has r[period] = 1. Returns None
    for (numerically) constant input.
    """
    x = features - features.mean(axis=0, keepdims=True)
    total = float((x * x).sum())
    if total <= 1e-24 * x.size:
        return None
    frames = x.shape[0]
    denom = total / frames
    r = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        prods = (x[: frames - lag] * x[lag:]).sum()
        r[lag] = (prods / (frames - lag)) / denom
    return r


def estimate_period(features: np.ndarray, prominence: float = 0.1) -> int | None:
    """Dominant period of [T, C] frame features via lag autocorrelation.

    Channels are mean-centered, the normalized autocorrelation is scanned over
    lags [2, T/2], and the highest local peak with value >= ``prominence`` is
    returned; near-exact ties (within 1e-9, e.g. a period and its multiples)
    resolve to the smaller lag. None means no qualifying peak (aperiodic or
    constant input).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"expected [T, C] features; got shape {feats.shape}")
    frames = feats.shape[0]
    if frames < 8:
        raise ValueError(f"need at least 8 frames; got {frames}")
    max_lag = frames // 2
    r = _normalized_autocorr(feats, min(max_lag + 1, frames - 1))
    if r is None:
        return None
    lags = [
        lag
        for lag in range(2, max_lag + 1)
        if lag + 1 < len(r) and r[lag] >= r[lag - 1] and r[lag] >= r[lag + 1] and r[lag] >= prominence
    ]
    if not lags:
        return None
    best = max(r[lag] for lag in lags)
    return min(lag for lag in lags if r[lag] >= best - 1e-9)


def lag_similarity(features: np.ndarray, lag: int) -> float:
    """Mean cosine similarity between mean-centered frames ``lag`` apart.

    The quantified form of a bright lag stripe in the self-similarity map:
    how similar, on average, each frame is to the frame one period later.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"expected [T, C] features; got shape {feats.shape}")
    if not (1 <= lag < feats.shape[0]):
        raise ValueError(f"lag must lie in [1, T); got {lag} for T={feats.shape[0]}")
    x = feats - feats.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0).any():
        raise ValueError("constant frame row after centering")
    unit = x / norms[:, None]
    return float((unit[:-lag] * unit[lag:]).sum(axis=1).mean())


def export_heatmap(matrix: SimilarityMatrix, path_prefix) -> tuple[str, str]:
    """Write ``<prefix>.csv`` (full precision, row-major) and ``<prefix>.pgm``
    (binary 8-bit graymap; value v maps to round(255*(v+1)/2))."""
    values = matrix.values
    csv_path = f"{path_prefix}.csv"
    pgm_path = f"{path_prefix}.pgm"
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    pixels = np.clip(np.rint(255.0 * (values + 1.0) / 2.0), 0, 255).astype(np.uint8)
    height, width = pixels.shape
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return csv_path, pgm_path
