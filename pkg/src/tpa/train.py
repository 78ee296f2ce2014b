"""Training loop: decoupled weight decay, cosine learning-rate decay with
linear warmup, identity-balanced batches, deterministic under a fixed seed."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .container import read_container, write_container
from .losses import arcface_loss, batch_all_triplet, combined_loss
from .pipeline import GaitModel, build_model, rank_eval


def cosine_warmup_lr(step: int, cfg: RunConfig) -> float:
    """Learning rate for a zero-based step index."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_min + (cfg.lr - cfg.lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    model: GaitModel
    label_of_ident: dict
    log_rows: list = field(default_factory=list)  # (step, loss_cls, loss_tri, loss_total, rank1)
    final_rank1: float | None = None


def embed_all(model: GaitModel, sequences, batch: int = 64):
    """Test-mode metric embeddings for a sequence list, as numpy arrays."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(sequences), batch):
            chunk = sequences[start : start + batch]
            out.append(model(chunk, mode="test").numpy())
    if was_training:
        model.train()
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_rank1(model: GaitModel, sequences) -> float:
    """Self-retrieval rank-1 with identical-view exclusion (gallery == probe)."""
    embs = embed_all(model, sequences)
    entries = [(embs[i], s.ident, s.view) for i, s in enumerate(sequences)]
    return rank_eval(entries, entries, ranks=(1,)).rank_k_accuracy[1]


def train_toy(train_set, cfg: RunConfig, heldout=None) -> TrainResult:
    """Train a model on a synthetic corpus; deterministic given cfg.seed."""
    if not train_set:
        raise ValueError("empty training set")
    cfg.validate()
    losses_cfg = cfg.loss_config()

    idents = sorted({s.ident for s in train_set})
    label_of = {ident: i for i, ident in enumerate(idents)}
    by_ident = {ident: [s for s in train_set if s.ident == ident] for ident in idents}

    model = build_model(cfg, n_classes=len(idents))
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A]))

    rows = []
    for step in range(cfg.steps):
        lr_t = cosine_warmup_lr(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr_t

        n_ids = min(cfg.ids_per_batch, len(idents))
        chosen = rng.choice(idents, size=n_ids, replace=False)
        batch, labels = [], []
        for ident in chosen:
            pool = by_ident[ident]
            picks = rng.choice(len(pool), size=cfg.seqs_per_id, replace=len(pool) < cfg.seqs_per_id)
            for j in picks:
                batch.append(pool[j])
                labels.append(label_of[ident])
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=len(batch))]
        label_t = torch.tensor(labels, dtype=torch.long)

        metric, _ = model(batch, mode="train", seeds=seeds)
        cls = metric.new_zeros(())
        for p in range(cfg.parts):
            cls = cls + arcface_loss(metric[:, p], model.heads.class_weights[p], label_t, losses_cfg)
        cls = cls / cfg.parts
        tri = batch_all_triplet(metric, label_t, losses_cfg.triplet_margin).loss
        total = combined_loss(cls, tri, losses_cfg)

        opt.zero_grad()
        total.backward()
        opt.step()

        rank1 = None
        if heldout and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            rank1 = evaluate_rank1(model, heldout)
        rows.append((step, cls.item(), tri.item(), total.item(), rank1))

    final = evaluate_rank1(model, heldout) if heldout else None
    return TrainResult(model=model, label_of_ident=label_of, log_rows=rows, final_rank1=final)


# ---- persistence ----------------------------------------------------------


def save_checkpoint(model: GaitModel, path) -> None:
    """Write every state tensor (parameters and buffers) to a container."""
    state = {name: value.detach().cpu().numpy() for name, value in model.state_dict().items()}
    write_container(state, path)


def load_checkpoint(model: GaitModel, path) -> GaitModel:
    tensors = read_container(path)
    state = model.state_dict()
    restored = {}
    for name, current in state.items():
        if name not in tensors:
            raise ValueError(f"checkpoint is missing state entry {name!r}")
        restored[name] = torch.as_tensor(tensors[name]).to(current.dtype).reshape(current.shape)
    extra = set(tensors) - set(state)
    if extra:
        raise ValueError(f"checkpoint holds unknown entries: {sorted(extra)}")
    model.load_state_dict(restored)
    return model


def load_model(cfg: RunConfig, path) -> GaitModel:
    """Rebuild a model from a checkpoint; the class count is read from the head."""
    tensors = read_container(path)
    if "heads.class_weights" not in tensors:
        raise ValueError("checkpoint has no 'heads.class_weights' entry")
    n_classes = tensors["heads.class_weights"].shape[1]
    model = build_model(cfg, n_classes=n_classes)
    return load_checkpoint(model, path)


def format_metric_log(rows) -> str:
    """CSV text for the per-step metric log."""
    lines = ["step,loss_cls,loss_tri,loss_total,rank1"]
    for step, cls, tri, total, rank1 in rows:
        tail = "" if rank1 is None else repr(float(rank1))
        lines.append(f"{step},{cls!r},{tri!r},{total!r},{tail}")
    return "\n".join(lines) + "\n"
