"""Loss-toggle ablation sweeps over several seeds, with an optional result cache."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..config import RunConfig, TrainConfig, format_value
from ..data import Dataset
from .train import Trainer

# Desk benchmark settings applied on top of TrainConfig defaults by the
# ablation command. The default learning rate is far too small for a
# network trained from scratch in 2000 steps.
BENCH = {
    "static": {"lr": 1e-3, "precision": 32},
    "video": {"lr": 1e-3, "precision": 32},
}

# Arms are named toggles: which of the weights alpha/beta/gamma stay at the
# base config's value (the rest are set to 0), plus any extra overrides.
ARMS = {
    "static": {
        "baseline": ((), {}),
        "+pixel": (("alpha",), {}),
        "+patch": (("beta",), {}),
        "+pixel+patch": (("alpha", "beta"), {}),
    },
    "video": {
        "baseline": ((), {}),
        "+pixel": (("alpha",), {}),
        "+patch": (("beta",), {}),
        "PiPa": (("alpha", "beta"), {}),
        "PiPa++": (("alpha", "beta", "gamma"), {}),
        "PiPa++ long-range": (("alpha", "beta", "gamma"), {"temporal_min": 4, "temporal_max": 16}),
    },
}
DEFAULT_ARMS = {
    "static": ["baseline", "+pixel", "+patch", "+pixel+patch"],
    "video": ["baseline", "PiPa", "PiPa++", "PiPa++ long-range"],
}


def bench_config(scenario: str, **overrides) -> TrainConfig:
    kw = dict(BENCH[scenario], scenario=scenario)
    kw.update(overrides)
    return TrainConfig(**kw).validate()


def arm_config(base: TrainConfig, arm: str, seed: int) -> TrainConfig:
    try:
        keep, extra = ARMS[base.scenario][arm]
    except KeyError:
        raise ValueError(f"unknown {base.scenario} arm {arm!r}; "
                         f"choose from {sorted(ARMS[base.scenario])}") from None
    weights = {w: (getattr(base, w) if w in keep else 0.0) for w in ("alpha", "beta", "gamma")}
    return dataclasses.replace(base, seed=seed, **weights, **extra).validate()


@dataclass
class AblationResult:
    scenario: str
    arms: list
    seeds: list
    miou: dict = field(default_factory=dict)  # arm -> {seed: mIoU in [0, 1]}
    seconds: float = 0.0  # wall time of this call
    train_seconds: dict = field(default_factory=dict)  # (arm, seed) -> original training time

    @property
    def compute_seconds(self) -> float:
        """Training time of the full sweep, counting cached runs at their recorded cost."""
        return float(sum(self.train_seconds.values()))

    def mean(self, arm: str) -> float:
        return float(np.mean([self.miou[arm][s] for s in self.seeds]))

    def table(self) -> str:
        w = max(len(a) for a in self.arms) + 2
        head = "arm".ljust(w) + "".join(f"seed{s}".rjust(9) for s in self.seeds) + "mean".rjust(9)
        lines = [head]
        for a in self.arms:
            vals = "".join(f"{100 * self.miou[a][s]:9.2f}" for s in self.seeds)
            lines.append(a.ljust(w) + vals + f"{100 * self.mean(a):9.2f}")
        return "\n".join(lines)

    def csv(self) -> str:
        rows = ["arm,seed,miou"]
        for a in self.arms:
            rows += [f"{a},{s},{self.miou[a][s]!r}" for s in self.seeds]
        return "\n".join(rows) + "\n"


def dataset_digest(data: Dataset) -> str:
    h = hashlib.sha256()
    for s in data.samples:
        h.update(f"{s.id}|{s.domain}|{s.split}|{s.clip_id}|{s.frame_idx}".encode())
        h.update(np.ascontiguousarray(s.image).tobytes())
        if s.label is not None:
            h.update(np.ascontiguousarray(s.label).tobytes())
    return h.hexdigest()


def code_digest() -> str:
    """Hash of the package sources, so cached results die with code changes."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def run_arm(cfg: TrainConfig, data: Dataset) -> float:
    prev = dc.get_default_dtype()
    dc.set_default_dtype(np.float64 if cfg.precision == 64 else np.float32)
    try:
        trainer = Trainer(cfg, data)
        while trainer.iter < cfg.total_iters:
            trainer.step()
        return float(trainer.evaluate().miou)
    finally:
        dc.set_default_dtype(prev)


def run_ablation(base: TrainConfig, data: Dataset, seeds, arms=None, cache_dir=None,
                 progress=None) -> AblationResult:
    """Train every (arm, seed) and record the final target mIoU.

    With ``cache_dir`` each run's result is stored under a hash of its full
    config, the dataset contents and the package sources.
    """
    arms = list(arms or DEFAULT_ARMS[base.scenario])
    seeds = list(seeds)
    res = AblationResult(base.scenario, arms, seeds)
    t0 = time.perf_counter()
    prefix = ""
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        prefix = dataset_digest(data) + code_digest()
    for arm in arms:
        res.miou[arm] = {}
        for seed in seeds:
            cfg = arm_config(base, arm, seed)
            cached = None
            if cache_dir is not None:
                text = RunConfig(train=cfg).train_text()
                key = hashlib.sha256((prefix + text).encode()).hexdigest()[:32]
                path = cache_dir / f"{key}.json"
                if path.exists():
                    cached = json.loads(path.read_text())
            if cached is None:
                start = time.perf_counter()
                miou = run_arm(cfg, data)
                secs = time.perf_counter() - start
                if cache_dir is not None:
                    path.write_text(json.dumps({"arm": arm, "seed": seed, "miou": miou,
                                                "seconds": secs, "config": text}))
            else:
                miou, secs = cached["miou"], cached["seconds"]
            res.miou[arm][seed] = miou
            res.train_seconds[(arm, seed)] = secs
            if progress:
                progress(arm, seed, miou, secs, cached is not None)
    res.seconds = time.perf_counter() - t0
    return res


def describe_overrides(cfg: TrainConfig) -> str:
    base = TrainConfig()
    diffs = [f"{f.name}={format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)
             if getattr(cfg, f.name) != getattr(base, f.name)]
    return " ".join(diffs)
