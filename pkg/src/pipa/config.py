"""Training configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .bank import TemporalRange
from .losses import ContrastConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    scenario: str = "static"
    seed: int = 0
    total_iters: int = 2000
    batch_size: int = 2
    lr: float = 6e-5
    warmup_iters: int = 150
    decay_power: float = 1.0
    weight_decay: float = 0.01
    grad_clip: float = 0.0  # 0 disables
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.1
    threshold: float = 0.968
    ema_m: float = 0.999
    tau: float = 0.1
    crop: int = 32
    patch_crop: int = 48
    iou_lo: float = 0.1
    iou_hi: float = 1.0
    resize_lo: float = 0.5
    resize_hi: float = 2.0
    temporal_min: int = 1
    temporal_max: int = 3
    bank_capacity: int = 256
    max_anchors_per_class: int = 64
    negatives_per_anchor: int = 256
    normalize_by_pairs: bool = True
    use_ce_source: bool = True
    use_ce_target: bool = True
    use_bank: bool = True
    pixel_use_target: bool = False
    bank_use_target: bool = False
    photometric: bool = True
    patch_photometric: bool = False
    num_classes: int = 5
    feat_dim: int = 64
    embed_dim: int = 32
    widths: str = "32,64,64"
    precision: int = 64

    def validate(self) -> "TrainConfig":
        if self.scenario not in ("static", "video"):
            raise ConfigError(f"scenario must be static or video, got {self.scenario!r}")
        for name in ("total_iters", "batch_size", "crop", "patch_crop", "bank_capacity",
                     "max_anchors_per_class", "negatives_per_anchor", "num_classes",
                     "feat_dim", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "warmup_iters", "weight_decay", "alpha", "beta", "gamma", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 <= self.threshold <= 1 or not 0 <= self.ema_m <= 1:
            raise ConfigError("threshold and ema_m must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0 < self.iou_lo <= self.iou_hi <= 1:
            raise ConfigError("need 0 < iou_lo <= iou_hi <= 1")
        if self.crop % 4 or self.patch_crop % 4:
            raise ConfigError("crop sizes must be multiples of the feature stride 4")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        try:
            TemporalRange(self.temporal_min, self.temporal_max)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    @property
    def width_tuple(self) -> tuple:
        return tuple(int(w) for w in str(self.widths).split(","))

    @property
    def temporal_range(self) -> TemporalRange:
        return TemporalRange(self.temporal_min, self.temporal_max)

    def contrast(self) -> ContrastConfig:
        return ContrastConfig(self.tau, self.max_anchors_per_class, self.negatives_per_anchor,
                              self.normalize_by_pairs)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = "data"
    out_dir: str = "runs/default"
    checkpoint: str = ""
    resume: str = ""
    log_interval: int = 10
    eval_interval: int = 500
    checkpoint_interval: int = 0
    stop_after: int = 0  # 0 runs to total_iters

    def train_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self.train, f.name))}\n"
                       for f in fields(self.train))

    def to_text(self) -> str:
        lines = []
        for k, v in flat_items(self):
            lines.append(f"{k} = {format_value(v)}")
        return "\n".join(lines) + "\n"


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def flat_items(run: RunConfig):
    for f in fields(run.train):
        yield f.name, getattr(run.train, f.name)
    for f in fields(run):
        if f.name != "train":
            yield f.name, getattr(run, f.name)


def coerce_value(name: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def apply_overrides(run: RunConfig, pairs) -> RunConfig:
    """Apply ``(key, value-string)`` pairs; unknown keys raise ConfigError."""
    train_keys = {f.name for f in fields(TrainConfig)}
    run_keys = {f.name for f in fields(RunConfig)} - {"train"}
    train_updates, run_updates = {}, {}
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key in train_keys:
            train_updates[key] = coerce_value(key, raw, getattr(run.train, key))
        elif key in run_keys:
            run_updates[key] = coerce_value(key, raw, getattr(run, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    train = dataclasses.replace(run.train, **train_updates)
    return dataclasses.replace(run, train=train, **run_updates)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k, v))
    return apply_overrides(base or RunConfig(), pairs)


def load_config(path, overrides=()) -> RunConfig:
    run = parse_config_text(Path(path).read_text()) if path else RunConfig()
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        pairs.append(tuple(item.split("=", 1)))
    run = apply_overrides(run, pairs)
    run.train.validate()
    return run
