"""Deterministic generator of gait-like periodic sequences with known truth.

Every identity is a small generative spec: an integer period in frames, a
per-part set of harmonic triples (amplitude, harmonic index, phase), and a
per-part channel offset. Feature sequences evaluate the harmonics at
(t + phase) mod period, spread them over channels with a fixed per-channel
phase shift, mix channels with a view-specific fixed orthogonal matrix, and
add Gaussian noise. The harmonic set always contains the fundamental k = 1 so
the true period of the noise-free signal is exactly the identity's period.

An optional appearance drift adds a slow aperiodic ramp inside one fixed
channel subspace, with a random per-sequence magnitude: an identity-irrelevant
confound (clothing sway, distance changes) that periodic structure has to be
separated from. It defaults to off so the noise-free invariants stay exact.

A silhouette mode rasterizes the same per-part signals as horizontal bands of
moving vertical bars, for exercising the image path of the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_VIEW_STREAM = 0x76696577  # distinct seed stream for view mixing matrices
_DRIFT_STREAM = 0xD21F7


@dataclass(frozen=True)
class SynthConfig:
    parts: int = 4
    channels: int = 16
    period_range: tuple[int, int] = (24, 36)
    harmonics_per_part: int = 2
    extra_harmonics: tuple[int, ...] = (2, 3)
    amp_range: tuple[float, float] = (0.6, 1.2)
    offset_sigma: float = 0.3

    def validate(self) -> "SynthConfig":
        if self.parts < 1 or self.channels < 1:
            raise ValueError("parts and channels must be positive")
        if self.period_range[0] < 4 or self.period_range[0] > self.period_range[1]:
            raise ValueError(f"period range must satisfy 4 <= lo <= hi; got {self.period_range}")
        if self.harmonics_per_part < 1:
            raise ValueError("need at least one harmonic per part")
        return self


@dataclass(frozen=True)
class SyntheticIdentity:
    """Generative spec for one subject.

    ``harmonics[p]`` is a tuple of (amplitude, harmonic index, phase) triples
    for part p; ``base_offset`` is [parts, channels].
    """

    ident: int
    period: int
    harmonics: tuple[tuple[tuple[float, int, float], ...], ...]
    base_offset: np.ndarray


@dataclass(frozen=True)
class SyntheticSequence:
    features: np.ndarray  # [parts, channels, frames], float64
    ident: int
    view: int
    phase: int
    period: int
    noise_sigma: float


@dataclass(frozen=True)
class SilhouetteSequence:
    """Rendered body-mask frames, values in [0, 1]."""

    frames: np.ndarray  # [1, frames, height, width]
    ident: int
    view: int
    ground_truth_period: int | None = None


def gen_identity(seed: int, cfg: SynthConfig = SynthConfig()) -> SyntheticIdentity:
    """Deterministically draw one identity spec from a seed."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D]))
    period = int(rng.integers(cfg.period_range[0], cfg.period_range[1] + 1))
    harmonics = []
    for _ in range(cfg.parts):
        triples = []
        for j in range(cfg.harmonics_per_part):
            # fundamental first so the true period is always the full period
            k = 1 if j == 0 else int(rng.choice(cfg.extra_harmonics))
            amp = float(rng.uniform(*cfg.amp_range))
            phase = float(rng.uniform(0.0, 2.0 * np.pi))
            triples.append((amp, k, phase))
        harmonics.append(tuple(triples))
    base_offset = rng.normal(0.0, cfg.offset_sigma, size=(cfg.parts, cfg.channels))
    return SyntheticIdentity(
        ident=seed, period=period, harmonics=tuple(harmonics), base_offset=base_offset
    )


def view_mixing(view: int, channels: int) -> np.ndarray:
    """Fixed orthogonal channel mix for a view id, deterministic in (view, channels)."""
    rng = np.random.default_rng(np.random.SeedSequence([_VIEW_STREAM, view, channels]))
    a = rng.normal(size=(channels, channels))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def drift_direction(channels: int) -> np.ndarray:
    """Fixed unit channel direction that carries the appearance drift."""
    rng = np.random.default_rng(np.random.SeedSequence([_DRIFT_STREAM, channels]))
    v = rng.normal(size=channels)
    return v / np.linalg.norm(v)


def gen_sequence(
    identity: SyntheticIdentity,
    view: int,
    phase: int,
    noise_sigma: float,
    length: int,
    seed: int,
    drift_sigma: float = 0.0,
) -> SyntheticSequence:
    """Render one feature sequence [P, C, T] for an identity under a view."""
    if length < identity.period:
        raise ValueError(f"length {length} shorter than the identity period {identity.period}")
    parts, channels = identity.base_offset.shape
    wrapped = (np.arange(length) + phase) % identity.period  # exact integer wrap
    chan_shift = 2.0 * np.pi * np.arange(channels) / channels

    feats = np.empty((parts, channels, length))
    for p in range(parts):
        signal = identity.base_offset[p][:, None] * np.ones(length)[None, :]
        for amp, k, phi in identity.harmonics[p]:
            angles = 2.0 * np.pi * k * wrapped / identity.period + phi
            signal = signal + amp * np.cos(angles[None, :] + chan_shift[:, None])
        feats[p] = signal

    mix = view_mixing(view, channels)
    feats = np.einsum("dc,pct->pdt", mix, feats)
    if drift_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1]))
        amps = rng.normal(0.0, drift_sigma, size=parts)
        ramp = np.linspace(-0.5, 0.5, length)
        feats = feats + amps[:, None, None] * drift_direction(channels)[None, :, None] * ramp
    if noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E]))
        feats = feats + rng.normal(0.0, noise_sigma, size=feats.shape)
    return SyntheticSequence(
        features=feats,
        ident=identity.ident,
        view=view,
        phase=phase,
        period=identity.period,
        noise_sigma=noise_sigma,
    )


def part_signal(identity: SyntheticIdentity, part: int, length: int, phase: int = 0) -> np.ndarray:
    """Scalar per-frame waveform of one part (no offset, channels, view or noise)."""
    wrapped = (np.arange(length) + phase) % identity.period
    out = np.zeros(length)
    for amp, k, phi in identity.harmonics[part]:
        out += amp * np.cos(2.0 * np.pi * k * wrapped / identity.period + phi)
    return out


def render_silhouettes(
    identity: SyntheticIdentity,
    view: int,
    phase: int,
    length: int,
    height: int = 64,
    width: int = 44,
) -> SilhouetteSequence:
    """Rasterize the per-part waveforms as horizontal bands of moving bars.

    Part p owns rows [p*H/P, (p+1)*H/P); its bar slides horizontally with the
    part signal, shifted a little per view so views are distinguishable.
    """
    parts = identity.base_offset.shape[0]
    if height % parts != 0:
        raise ValueError(f"height {height} not divisible by {parts} parts")
    frames = np.zeros((1, length, height, width))
    band = height // parts
    max_amp = max(
        sum(abs(a) for a, _, _ in identity.harmonics[p]) for p in range(parts)
    )
    bar_half = max(1, width // 10)
    swing = width / 2 - bar_half - 1
    view_shift = (view % 5) - 2
    for p in range(parts):
        sig = part_signal(identity, p, length, phase)
        centers = width / 2 + view_shift + swing * sig / max(max_amp, 1e-12)
        for t in range(length):
            c = int(round(centers[t]))
            lo = max(0, c - bar_half)
            hi = min(width, c + bar_half + 1)
            frames[0, t, p * band : (p + 1) * band, lo:hi] = 1.0
    return SilhouetteSequence(
        frames=frames, ident=identity.ident, view=view, ground_truth_period=identity.period
    )


@dataclass(frozen=True)
class CorpusConfig:
    """How to draw a labeled corpus of sequences from identity specs."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    n_ids: int = 50
    views: int = 4
    seqs_per_view: int = 1
    length_range: tuple[int, int] = (64, 96)
    noise_sigma: float = 0.3
    drift_sigma: float = 0.0
    seed: int = 0
    fixed_period: int | None = None  # force every identity to this period


def generate_corpus(cfg: CorpusConfig, id_offset: int = 0) -> list[SyntheticSequence]:
    """Generate n_ids x views x seqs_per_view feature sequences, deterministic in cfg."""
    synth_cfg = cfg.synth
    if cfg.fixed_period is not None:
        synth_cfg = SynthConfig(
            parts=synth_cfg.parts,
            channels=synth_cfg.channels,
            period_range=(cfg.fixed_period, cfg.fixed_period),
            harmonics_per_part=synth_cfg.harmonics_per_part,
            extra_harmonics=synth_cfg.extra_harmonics,
            amp_range=synth_cfg.amp_range,
            offset_sigma=synth_cfg.offset_sigma,
        )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0]))
    out = []
    for i in range(cfg.n_ids):
        ident = gen_identity(id_offset + i, synth_cfg)
        for v in range(cfg.views):
            for s in range(cfg.seqs_per_view):
                length = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
                length = max(length, ident.period)
                phase = int(rng.integers(0, ident.period))
                seq_seed = int(rng.integers(0, 2**31 - 1))
                out.append(
                    gen_sequence(
                        ident, v, phase, cfg.noise_sigma, length, seq_seed,
                        drift_sigma=cfg.drift_sigma,
                    )
                )
    return out
