"""Central finite-difference verification of every parameterized operation.

The analytic side is reverse-mode differentiation through the forward code;
the independent side re-evaluates the loss at symmetrically perturbed
parameter values (step 1e-4, float64) and compares. Per-module checks run the
difference over every element of every parameter tensor; the end-to-end check
samples a fixed number of coordinates per pipeline component.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .afpe import PositionEncoder, build_base_sequences
from .config import RunConfig
from .losses import LossConfig, arcface_loss, batch_all_triplet, combined_loss
from .pipeline import PartHeads, ToySpatialEncoder, build_model
from .synth import CorpusConfig, SynthConfig, generate_corpus, render_silhouettes, gen_identity
from .tam import FeedForward, MultiHeadCrossAttention, TamBlock

STEP = 1e-4
MODULE_TOL = 1e-4
END_TO_END_TOL = 1e-3


def finite_difference(fn, tensors, step: float = STEP):
    """Central-difference gradients of the scalar ``fn()`` w.r.t. each tensor.

    Tensors are perturbed in place and restored; ``fn`` must be a pure
    function of their current values.
    """
    grads = []
    with torch.no_grad():
        for t in tensors:
            flat = t.reshape(-1)
            g = torch.zeros(flat.numel(), dtype=t.dtype)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(fn())
                flat[i] = orig - step
                f_minus = float(fn())
                flat[i] = orig
                g[i] = (f_plus - f_minus) / (2.0 * step)
            grads.append(g.reshape(t.shape))
    return grads


def analytic_gradients(fn, tensors):
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    return [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-relative difference; zero when both sides sit at the FD noise floor.

    Central differences with step 1e-4 on a float64 loss of order one resolve
    gradients down to roughly 1e-12, so two gradients that are both smaller
    than 1e-9 (e.g. the exactly-zero key-bias gradient under softmax shift
    invariance) count as matching.
    """
    diff = torch.linalg.norm((a - b).reshape(-1))
    scale = max(float(torch.linalg.norm(a.reshape(-1))), float(torch.linalg.norm(b.reshape(-1))))
    if scale <= 1e-9:
        return 0.0
    return float(diff) / scale


def compare(fn, tensors) -> float:
    """Worst per-tensor relative error between analytic and FD gradients."""
    ana = analytic_gradients(fn, tensors)
    fd = finite_difference(fn, tensors)
    return max(relative_error(a, f) for a, f in zip(ana, fd))


def _probe(shape, generator) -> torch.Tensor:
    return torch.randn(*shape, dtype=torch.float64, generator=generator)


# ---- per-module checks ----------------------------------------------------


def check_position_encoder(seed: int) -> float:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    td = int(torch.randint(1, 4, (1,), generator=gen))
    channels = int(torch.randint(2, 9, (1,), generator=gen))
    seq_len = int(torch.randint(max(4, td), 17, (1,), generator=gen))
    enc = PositionEncoder(td, channels)
    bases = build_base_sequences(seq_len, td)
    weight = _probe((seq_len, channels), gen)
    fn = lambda: (enc(bases.values) * weight).sum()
    return compare(fn, list(enc.parameters()))


def check_mhca(seed: int) -> float:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    heads = int(torch.randint(1, 3, (1,), generator=gen))
    channels = heads * int(torch.randint(2, 6, (1,), generator=gen))
    frames = int(torch.randint(1, 9, (1,), generator=gen))
    mod = MultiHeadCrossAttention(channels, heads)
    query = _probe((channels,), gen)
    memory = _probe((frames, channels), gen)
    weight = _probe((channels,), gen)
    fn = lambda: (mod(query, memory)[0] * weight).sum()
    return compare(fn, list(mod.parameters()))


def check_ffn(seed: int) -> float:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    channels = int(torch.randint(2, 9, (1,), generator=gen))
    mod = FeedForward(channels, 2 * channels)
    x = _probe((channels,), gen)
    weight = _probe((channels,), gen)
    fn = lambda: (mod(x) * weight).sum()
    return compare(fn, list(mod.parameters()))


def check_tam_block(seed: int) -> float:
    """Covers both attention branches, both FFNs, the lateral map and norms."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    heads = int(torch.randint(1, 3, (1,), generator=gen))
    channels = heads * int(torch.randint(2, 5, (1,), generator=gen))
    frames = int(torch.randint(2, 9, (1,), generator=gen))
    block = TamBlock(channels, heads=heads)
    from .tam import TamState

    state = TamState(_probe((channels,), gen), _probe((channels,), gen))
    x_pe = _probe((frames, channels), gen)
    seasonal = _probe((frames, channels), gen)
    trend = _probe((frames, channels), gen)
    weight = _probe((channels,), gen)
    fn = lambda: (block(state, x_pe, seasonal, trend).token_full * weight).sum()
    return compare(fn, list(block.parameters()))


def check_heads(seed: int) -> float:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    parts = int(torch.randint(1, 4, (1,), generator=gen))
    channels = int(torch.randint(2, 7, (1,), generator=gen))
    metric_channels = int(torch.randint(2, 6, (1,), generator=gen))
    n_classes = int(torch.randint(2, 5, (1,), generator=gen))
    batch = int(torch.randint(2, 6, (1,), generator=gen))
    mod = PartHeads(parts, channels, metric_channels, n_classes)
    mod.train()
    tokens = _probe((batch, parts, channels), gen)
    w_m = _probe((batch, parts, metric_channels), gen)
    w_l = _probe((batch, parts, n_classes), gen)

    def fn():
        metric, logits = mod(tokens)
        return (metric * w_m).sum() + (logits * w_l).sum()

    return compare(fn, list(mod.parameters()))


def check_spatial_encoder(seed: int) -> float:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed + 1)
    mod = ToySpatialEncoder(1, 3)
    frames = _probe((1, 2, 8, 8), gen)
    weight = _probe((3, 2, 2, 2), gen)
    fn = lambda: (mod(frames) * weight).sum()
    return compare(fn, list(mod.parameters()))


def check_arcface(seed: int) -> float:
    gen = torch.Generator().manual_seed(seed + 1)
    batch, channels, n_classes = 5, 6, 4
    features = _probe((batch, channels), gen).requires_grad_(True)
    weights = _probe((n_classes, channels), gen).requires_grad_(True)
    labels = torch.randint(0, n_classes, (batch,), generator=gen)
    cfg = LossConfig()
    fn = lambda: arcface_loss(features, weights, labels, cfg)
    return compare(fn, [features, weights])


def check_triplet(seed: int) -> float:
    gen = torch.Generator().manual_seed(seed + 1)
    emb = _probe((6, 2, 4), gen).requires_grad_(True)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    fn = lambda: batch_all_triplet(emb, labels, margin=0.2).loss
    return compare(fn, [emb])


# ---- end-to-end check ------------------------------------------------------


def _component_of(name: str) -> str:
    return name.split(".", 1)[0]


def _central_diff_at(fn, flat, i: int, step: float) -> float:
    orig = flat[i].item()
    flat[i] = orig + step
    f_plus = float(fn())
    flat[i] = orig - step
    f_minus = float(fn())
    flat[i] = orig
    return (f_plus - f_minus) / (2.0 * step)


def _sampled_coordinate_error(fn, params: dict, per_component: int, seed: int) -> dict:
    """FD a random coordinate subset of every pipeline component's parameters.

    The max+mean pooling and the triplet hinge make the loss piecewise smooth;
    a coordinate whose FD window straddles a subgradient switch (detected by a
    full-step vs half-step disagreement) measures no derivative at all, so
    such coordinates are redrawn.
    """
    rng = np.random.default_rng(seed)
    groups: dict[str, list] = {}
    for name, t in params.items():
        groups.setdefault(_component_of(name), []).append(t)
    for t in params.values():
        t.grad = None
    loss = fn()
    loss.backward()

    out = {}
    with torch.no_grad():
        for comp, tensors in groups.items():
            sizes = np.array([t.numel() for t in tensors])
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            total = int(offsets[-1])
            order = rng.permutation(total)
            ana, fd = [], []
            for global_i in order:
                if len(fd) >= min(per_component, total):
                    break
                which = int(np.searchsorted(offsets, global_i, side="right") - 1)
                t = tensors[which]
                local = int(global_i - offsets[which])
                flat = t.reshape(-1)
                fd_full = _central_diff_at(fn, flat, local, STEP)
                fd_half = _central_diff_at(fn, flat, local, STEP / 2)
                if abs(fd_full - fd_half) > 1e-3 * max(1.0, abs(fd_full), abs(fd_half)):
                    continue  # window straddles a kink; not a derivative estimate
                grad_flat = (t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1)
                ana.append(float(grad_flat[local]))
                fd.append(fd_full)
            out[comp] = relative_error(torch.tensor(ana), torch.tensor(fd))
    return out


def _end_to_end_config(silhouettes: bool) -> RunConfig:
    return RunConfig(
        seq_frames=6,
        parts=4 if silhouettes else 2,
        td=2,
        tam_layers=2,
        window=3,
        channels=8,
        metric_channels=6,
        heads=2,
        steps=1,
        seed=0,
    )


def check_end_to_end(seed: int, silhouettes: bool = False) -> float:
    """Combined loss gradcheck through the whole pipeline, sampled coordinates."""
    cfg = _end_to_end_config(silhouettes)
    cfg.seed = seed
    if silhouettes:
        batch = []
        labels = []
        for ident_seed in range(2):
            ident = gen_identity(ident_seed, SynthConfig(parts=4, channels=8, period_range=(6, 8)))
            for view in range(2):
                batch.append(render_silhouettes(ident, view, phase=view, length=10, height=16, width=8))
                labels.append(ident_seed)
    else:
        corpus_cfg = CorpusConfig(
            synth=SynthConfig(parts=2, channels=8, period_range=(6, 8)),
            n_ids=2, views=2, length_range=(10, 12), noise_sigma=0.1, seed=seed,
        )
        batch = generate_corpus(corpus_cfg)
        labels = [s.ident for s in batch]
    label_map = {ident: i for i, ident in enumerate(sorted(set(labels)))}
    label_t = torch.tensor([label_map[l] for l in labels])

    model = build_model(cfg, n_classes=len(label_map))
    model.train()
    losses_cfg = cfg.loss_config()
    seeds = list(range(len(batch)))

    def fn():
        metric, _ = model(batch, mode="train", seeds=seeds)
        cls = metric.new_zeros(())
        for p in range(cfg.parts):
            cls = cls + arcface_loss(metric[:, p], model.heads.class_weights[p], label_t, losses_cfg)
        tri = batch_all_triplet(metric, label_t, losses_cfg.triplet_margin).loss
        return combined_loss(cls / cfg.parts, tri, losses_cfg)

    params = {name: p for name, p in model.named_parameters()}
    if not silhouettes:
        params = {k: v for k, v in params.items() if _component_of(k) != "encoder"}
    errors = _sampled_coordinate_error(fn, params, per_component=16, seed=seed + 99)
    return max(errors.values())


# ---- suite ----------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_error < self.tolerance


_MODULE_CHECKS = [
    ("position-encoder", check_position_encoder),
    ("cross-attention", check_mhca),
    ("feed-forward", check_ffn),
    ("tam-block", check_tam_block),
    ("heads", check_heads),
    ("spatial-encoder", check_spatial_encoder),
    ("arcface", check_arcface),
    ("batch-triplet", check_triplet),
]


def run_suite(instances: int = 20, verbose: bool = False) -> list[CheckResult]:
    """Run every check over ``instances`` seeded instances each."""
    results = []
    for name, check in _MODULE_CHECKS:
        start = time.perf_counter()
        worst = max(check(seed) for seed in range(instances))
        results.append(CheckResult(name, worst, MODULE_TOL))
        if verbose:
            print(f"{name}: worst rel err {worst:.3e} ({time.perf_counter() - start:.1f}s)")
    for name, silhouettes in (("end-to-end-features", False), ("end-to-end-silhouettes", True)):
        start = time.perf_counter()
        worst = max(check_end_to_end(seed, silhouettes) for seed in range(instances))
        results.append(CheckResult(name, worst, END_TO_END_TOL))
        if verbose:
            print(f"{name}: worst rel err {worst:.3e} ({time.perf_counter() - start:.1f}s)")
    return results
