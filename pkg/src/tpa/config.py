"""Run configuration: a flat key=value text file mapped onto a dataclass."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .losses import LossConfig

# File keys that differ from field names (the loss-weight keys are fixed by
# the file format).
_KEY_TO_FIELD = {
    "p": "weight_cls",
    "q": "weight_tri",
}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


@dataclass
class RunConfig:
    # sampling and architecture
    seq_frames: int = 30
    parts: int = 16
    td: int = 1
    tam_layers: int = 6
    window: int = 30
    channels: int = 32
    metric_channels: int = 32
    heads: int = 4
    ffn_mult: int = 2
    in_channels: int = 1  # silhouette channels for the image path
    aggregation: str = "tpa"  # "tpa" or "maxpool" (temporal max-pool ablation)
    # losses
    arc_s: float = 32.0
    arc_m: float = 0.3
    tri_margin: float = 0.2
    weight_cls: float = 0.1
    weight_tri: float = 1.0
    label_smoothing: float = 0.1
    # optimizer
    lr: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.5
    steps: int = 200
    warmup_steps: int = 20
    ids_per_batch: int = 4
    seqs_per_id: int = 4
    eval_every: int = 0  # 0: evaluate held-out rank-1 only at the end
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.seq_frames < 1 or self.parts < 1 or self.td < 1 or self.tam_layers < 1:
            raise ValueError("seq_frames, parts, td and tam_layers must be positive")
        if self.window < 1:
            raise ValueError("window must be positive")
        if self.channels % self.heads != 0:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.aggregation not in ("tpa", "maxpool"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        self.loss_config()
        return self

    def loss_config(self) -> LossConfig:
        return LossConfig(
            triplet_margin=self.tri_margin,
            arc_scale=self.arc_s,
            arc_margin=self.arc_m,
            weight_cls=self.weight_cls,
            weight_tri=self.weight_tri,
            label_smoothing=self.label_smoothing,
        ).validate()


def parse_config(text: str) -> RunConfig:
    """Parse flat key=value lines; '#' starts a comment, blank lines ignored."""
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        field_name = _KEY_TO_FIELD.get(key, key)
        if field_name not in known:
            raise ValueError(f"line {lineno}: unknown configuration key {key!r}")
        if field_name in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[field_name] = val
    cfg = RunConfig()
    for field_name, val in values.items():
        current = getattr(cfg, field_name)
        try:
            if isinstance(current, bool):
                parsed = val.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                parsed = int(val)
            elif isinstance(current, float):
                parsed = float(val)
            else:
                parsed = val
        except ValueError as exc:
            raise ValueError(f"bad value for {field_name!r}: {val!r}") from exc
        setattr(cfg, field_name, parsed)
    return cfg.validate()


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        key = _FIELD_TO_KEY.get(f.name, f.name)
        lines.append(f"{key}={getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
