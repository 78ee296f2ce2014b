"""Training objectives: temporal triplet loss, angular-margin softmax, and
their weighted sum.

Distances between two equal-length sequences are the mean over positions of
per-position Euclidean distances. Batch mining is batch-all: every valid
(anchor, positive, negative) triple contributes, zero-loss triples included
in the denominator, computed per part and averaged over parts. The
classification loss puts an additive angular margin on the target class,
scales all cosine logits, and applies label-smoothed cross entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import Tensor


@dataclass
class LossConfig:
    triplet_margin: float = 0.2
    arc_scale: float = 32.0
    arc_margin: float = 0.3
    weight_cls: float = 0.1
    weight_tri: float = 1.0
    label_smoothing: float = 0.1

    def validate(self) -> "LossConfig":
        if not self.arc_scale > 0:
            raise ValueError(f"arc_scale must be positive; got {self.arc_scale}")
        if not (0.0 <= self.arc_margin < math.pi / 2):
            raise ValueError(f"arc_margin must lie in [0, pi/2); got {self.arc_margin}")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError(f"label_smoothing must lie in [0, 1); got {self.label_smoothing}")
        for name in ("triplet_margin", "weight_cls", "weight_tri"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        return self


def sequence_dist(x: Tensor, y: Tensor) -> Tensor:
    """Mean over positions of the Euclidean distance between matching rows."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("expected nonempty [L, C] sequences")
    return torch.linalg.norm(x - y, dim=-1).mean()


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """Hinge on the anchor-positive vs anchor-negative sequence distances."""
    d_ap = sequence_dist(anchor, positive)
    d_an = sequence_dist(anchor, negative)
    return torch.clamp(d_ap - d_an + margin, min=0.0)


class BatchTripletResult(NamedTuple):
    loss: Tensor
    valid_triples: int
    active_triples: int


def batch_all_triplet(embeddings: Tensor, labels, margin: float) -> BatchTripletResult:
    """Batch-all mining over [B, P, C] embeddings with integer labels [B].

    Enumerates every (anchor, positive, negative) index triple with
    label(a) == label(p), a != p, label(n) != label(a); the loss is the hinge
    averaged over all such triples and over parts, zero-loss triples counted.
    A batch with fewer than two classes, or with no class of size >= 2, has no
    valid triples and yields loss 0 with ``valid_triples == 0``.
    """
    if embeddings.ndim != 3:
        raise ValueError(f"expected [B, P, C] embeddings; got shape {tuple(embeddings.shape)}")
    lab = torch.as_tensor(labels, dtype=torch.long)
    batch = embeddings.shape[0]
    if lab.shape != (batch,):
        raise ValueError(f"labels must have shape [{batch}]; got {tuple(lab.shape)}")

    same = lab.unsqueeze(0) == lab.unsqueeze(1)
    eye = torch.eye(batch, dtype=torch.bool)
    pos_pair = same & ~eye  # [a, p]
    triple_mask = pos_pair.unsqueeze(2) & (~same).unsqueeze(1)  # [a, p, n]
    triples = triple_mask.nonzero(as_tuple=False)
    if triples.shape[0] == 0:
        zero = embeddings.new_zeros(())
        return BatchTripletResult(loss=zero, valid_triples=0, active_triples=0)

    a_idx, p_idx, n_idx = triples[:, 0], triples[:, 1], triples[:, 2]
    per_part = embeddings.transpose(0, 1)  # [P, B, C]
    dists = torch.linalg.norm(per_part.unsqueeze(2) - per_part.unsqueeze(1), dim=-1)  # [P, B, B]
    hinge = torch.clamp(dists[:, a_idx, p_idx] - dists[:, a_idx, n_idx] + margin, min=0.0)
    active = int((hinge > 0).sum())
    return BatchTripletResult(loss=hinge.mean(), valid_triples=triples.shape[0], active_triples=active)


def arcface_loss(features: Tensor, class_weights: Tensor, labels, cfg: LossConfig) -> Tensor:
    """Angular-margin softmax loss over [B, C] features and [n, C] class weights.

    cos(theta + m) replaces the target-class cosine; past the point where that
    stops being monotone (cos theta <= cos(pi - m)) the target logit falls back
    to the linear form cos theta - m*sin(m). All logits are scaled by s and fed
    to label-smoothed cross entropy, averaged over the batch.
    """
    if features.ndim != 2 or class_weights.ndim != 2:
        raise ValueError("features and class_weights must be rank-2")
    if features.shape[1] != class_weights.shape[1]:
        raise ValueError(
            f"feature width {features.shape[1]} != class-weight width {class_weights.shape[1]}"
        )
    lab = torch.as_tensor(labels, dtype=torch.long)
    batch, n_classes = features.shape[0], class_weights.shape[0]
    if lab.shape != (batch,):
        raise ValueError(f"labels must have shape [{batch}]; got {tuple(lab.shape)}")
    if lab.numel() and (int(lab.min()) < 0 or int(lab.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")

    f_norm = torch.linalg.norm(features, dim=1, keepdim=True)
    w_norm = torch.linalg.norm(class_weights, dim=1, keepdim=True)
    if (f_norm == 0).any():
        raise ValueError("zero-norm feature row cannot be angle-normalized")
    if (w_norm == 0).any():
        raise ValueError("zero-norm class-weight row cannot be angle-normalized")

    cos = (features / f_norm) @ (class_weights / w_norm).t()  # [B, n]
    rows = torch.arange(batch)
    cos_y = cos[rows, lab]
    sin_y = torch.sqrt(torch.clamp(1.0 - cos_y * cos_y, min=0.0))
    with_margin = cos_y * math.cos(cfg.arc_margin) - sin_y * math.sin(cfg.arc_margin)
    fallback = cos_y - cfg.arc_margin * math.sin(cfg.arc_margin)
    target = torch.where(cos_y > math.cos(math.pi - cfg.arc_margin), with_margin, fallback)

    one_hot = torch.nn.functional.one_hot(lab, n_classes).to(cos.dtype)
    logits = cfg.arc_scale * (cos + one_hot * (target - cos_y).unsqueeze(1))

    log_probs = torch.log_softmax(logits, dim=1)
    eps = cfg.label_smoothing
    per_sample = -(1.0 - eps) * log_probs[rows, lab] - (eps / n_classes) * log_probs.sum(dim=1)
    return per_sample.mean()


def combined_loss(cls: Tensor | float, tri: Tensor | float, cfg: LossConfig) -> Tensor | float:
    """Weighted sum of the classification and triplet terms."""
    return cfg.weight_cls * cls + cfg.weight_tri * tri
