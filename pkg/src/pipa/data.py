"""Procedural two-domain shape scenes, video clips, and their on-disk format.

Sample file layout (little-endian)::

    0   8s   magic b"PIPADAT1"
    8   u32  version (1)
    12  u32  height
    16  u32  width
    20  u32  channels (3)
    24  u32  flags (bit 0: labeled, bit 1: target domain)
    28  u32  reserved (0)
    32  f32[channels*height*width]   image, channel-major
    ..  u16[height*width]            label, row-major (only if labeled)

The manifest is tab-separated text, one sample per line:
``relpath, domain, split, clip-id, frame-idx`` with ``-`` for no clip.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PIPADAT1"
VERSION = 1
HEADER = struct.Struct("<8sIIIIII")
IGNORE_INDEX = 255
MANIFEST_HEADER = "# pipa-manifest v1\trelpath\tdomain\tsplit\tclip\tframe"
MAX_EXTENT = 1 << 14

SHAPES = ("disk", "square", "triangle", "cross")
_DOMAIN_CODE = {"source": 0, "target": 1, "eval": 2}


@dataclass
class SceneConfig:
    num_classes: int = 5
    height: int = 64
    width: int = 64
    min_shapes: int = 2
    max_shapes: int = 4
    min_size: float = 5.0
    max_size: float = 12.0
    # 4 shape classes spaced around the hue circle; per-shape jitter in degrees
    class_hues: tuple = (0.0, 90.0, 180.0, 270.0)
    hue_jitter: float = 15.0
    hue_shift: float = 40.0
    brightness_gradient: float = 0.2
    noise_sigma: float = 0.05
    texture_amp: float = 0.05
    max_velocity: float = 1.5

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.num_classes - 1 > len(self.class_hues):
            raise ValueError("not enough class hues for the requested classes")


@dataclass
class Shape:
    kind: int  # class id, 1..C-1
    cx: float
    cy: float
    size: float
    color: tuple
    vx: float = 0.0
    vy: float = 0.0

    def at(self, t: int) -> "Shape":
        return Shape(self.kind, self.cx + t * self.vx, self.cy + t * self.vy, self.size,
                     self.color, self.vx, self.vy)


def shape_mask(shape: Shape, h: int, w: int) -> np.ndarray:
    """Analytic region of ``shape`` evaluated at pixel centers."""
    y, x = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dx, dy, s = x - shape.cx, y - shape.cy, shape.size
    name = SHAPES[(shape.kind - 1) % len(SHAPES)]
    if name == "disk":
        return dx * dx + dy * dy <= s * s
    if name == "square":
        return (np.abs(dx) <= 0.8 * s) & (np.abs(dy) <= 0.8 * s)
    if name == "triangle":
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) * 0.5)
    arm = s / 3.0
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= s)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= s))


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple:
    h = (h % 360.0) / 60.0
    i = int(h) % 6
    f = h - int(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _hue_rotation(deg: float) -> np.ndarray:
    # rotation about the gray axis (1,1,1)/sqrt(3)
    th = np.deg2rad(deg)
    c, s = np.cos(th), np.sin(th)
    k = 1.0 / 3.0
    r = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, (1 - c) * k - r * s, (1 - c) * k + r * s],
        [(1 - c) * k + r * s, c + (1 - c) * k, (1 - c) * k - r * s],
        [(1 - c) * k - r * s, (1 - c) * k + r * s, c + (1 - c) * k],
    ])


@dataclass
class SceneLayout:
    background: tuple
    shapes: list
    texture: tuple  # (fx, fy, phase)


def sample_layout(cfg: SceneConfig, rng: np.random.Generator, video: bool = False) -> SceneLayout:
    bg = _hsv_to_rgb(rng.uniform(0, 360), rng.uniform(0.0, 0.25), rng.uniform(0.2, 0.5))
    shapes = []
    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        kind = int(rng.integers(1, cfg.num_classes))
        hue = cfg.class_hues[kind - 1] + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)
        color = _hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))
        size = rng.uniform(cfg.min_size, cfg.max_size)
        cx, cy = rng.uniform(0, cfg.width), rng.uniform(0, cfg.height)
        vx = vy = 0.0
        if video:
            vx, vy = rng.uniform(-cfg.max_velocity, cfg.max_velocity, size=2)
        shapes.append(Shape(kind, cx, cy, size, color, float(vx), float(vy)))
    tex = (rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25), rng.uniform(0, 2 * np.pi))
    return SceneLayout(bg, shapes, tex)


def rasterize(layout: SceneLayout, cfg: SceneConfig, t: int = 0):
    """Flat-colored source-style image [3,H,W] and its label map at frame ``t``."""
    h, w = cfg.height, cfg.width
    img = np.empty((3, h, w))
    img[:] = np.asarray(layout.background)[:, None, None]
    label = np.zeros((h, w), dtype=np.uint16)
    for shp in layout.shapes:
        m = shape_mask(shp.at(t), h, w)
        img[:, m] = np.asarray(shp.color)[:, None]
        label[m] = shp.kind
    return img, label


def apply_style(img: np.ndarray, layout: SceneLayout, cfg: SceneConfig,
                rng: np.random.Generator) -> np.ndarray:
    """Target-domain style shift: hue rotation, brightness gradient, texture, noise."""
    h, w = img.shape[1:]
    out = np.einsum("ij,jhw->ihw", _hue_rotation(cfg.hue_shift), img)
    ramp = 1.0 + cfg.brightness_gradient * np.linspace(-1.0, 1.0, h)
    out = out * ramp[None, :, None]
    fx, fy, ph = layout.texture
    y, x = np.mgrid[0:h, 0:w]
    out = out + cfg.texture_amp * np.sin(2 * np.pi * (fx * x + fy * y) + ph)[None]
    out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


@dataclass
class DomainSample:
    image: np.ndarray  # float32 [3,H,W] in [0,1]
    label: np.ndarray | None  # uint16 [H,W] or None
    domain: str
    id: str
    split: str = "train"
    clip_id: int | None = None
    frame_idx: int | None = None


@dataclass
class ManifestRecord:
    relpath: str
    domain: str
    split: str
    clip_id: int | None = None
    frame_idx: int | None = None

    def line(self) -> str:
        clip = "-" if self.clip_id is None else str(self.clip_id)
        frame = "-" if self.frame_idx is None else str(self.frame_idx)
        return "\t".join([self.relpath, self.domain, self.split, clip, frame])


@dataclass
class Dataset:
    samples: list = field(default_factory=list)

    def select(self, domain: str | None = None, split: str | None = None) -> list:
        return [s for s in self.samples
                if (domain is None or s.domain == domain) and (split is None or s.split == split)]

    def clips(self, domain: str, split: str) -> list[list]:
        groups: dict[int, list] = {}
        for s in self.select(domain, split):
            groups.setdefault(s.clip_id, []).append(s)
        return [sorted(g, key=lambda s: s.frame_idx) for _, g in sorted(groups.items())]

    def records(self) -> list[ManifestRecord]:
        return [ManifestRecord(f"{s.id}.bin", s.domain, s.split, s.clip_id, s.frame_idx)
                for s in self.samples]


def _sample_rng(seed: int, domain: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _DOMAIN_CODE[domain], index])


def make_static_sample(cfg: SceneConfig, seed: int, domain: str, index: int) -> DomainSample:
    rng = _sample_rng(seed, domain, index)
    layout = sample_layout(cfg, rng)
    img, label = rasterize(layout, cfg)
    if domain != "source":
        img = apply_style(img, layout, cfg, rng)
    split = "eval" if domain == "eval" else "train"
    return DomainSample(img.astype(np.float32), None if domain == "target" else label,
                        "source" if domain == "source" else "target",
                        f"{domain}_{index:05d}", split)


def gen_static_dataset(cfg: SceneConfig, n_source: int, n_target: int, n_eval: int,
                       seed: int) -> Dataset:
    if min(n_source, n_target, n_eval) < 1:
        raise ValueError("sample counts must be at least 1")
    ds = Dataset()
    for domain, n in (("source", n_source), ("target", n_target), ("eval", n_eval)):
        ds.samples += [make_static_sample(cfg, seed, domain, i) for i in range(n)]
    return ds


def make_clip(cfg: SceneConfig, seed: int, domain: str, clip: int, clip_len: int) -> list:
    rng = _sample_rng(seed, domain, clip)
    layout = sample_layout(cfg, rng, video=True)
    frames = []
    for t in range(clip_len):
        img, label = rasterize(layout, cfg, t)
        if domain != "source":
            img = apply_style(img, layout, cfg, rng)
        frames.append(DomainSample(
            img.astype(np.float32), None if domain == "target" else label,
            "source" if domain == "source" else "target", f"{domain}_c{clip:04d}_f{t:03d}",
            "eval" if domain == "eval" else "train", clip, t))
    return frames


def gen_video_dataset(cfg: SceneConfig, n_clips: int, clip_len: int, seed: int,
                      n_eval_clips: int | None = None) -> Dataset:
    """Source, unlabeled target and labeled target-eval clips of ``clip_len`` frames."""
    if clip_len < 4:
        raise ValueError("clip_len must be at least 4")
    if n_clips < 1:
        raise ValueError("n_clips must be at least 1")
    n_eval_clips = max(1, n_clips // 4) if n_eval_clips is None else n_eval_clips
    ds = Dataset()
    for domain, n in (("source", n_clips), ("target", n_clips), ("eval", n_eval_clips)):
        for c in range(n):
            ds.samples += make_clip(cfg, seed, domain, c, clip_len)
    return ds


# ----------------------------------------------------------------------------
# file formats


def save_sample(path, sample: DomainSample) -> None:
    img = np.ascontiguousarray(sample.image, dtype="<f4")
    c, h, w = img.shape
    flags = (1 if sample.label is not None else 0) | (2 if sample.domain == "target" else 0)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, h, w, c, flags, 0))
        f.write(img.tobytes())
        if sample.label is not None:
            f.write(np.ascontiguousarray(sample.label, dtype="<u2").tobytes())


def load_sample(path) -> DomainSample:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, h, w, c, flags, _ = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if not (0 < h <= MAX_EXTENT and 0 < w <= MAX_EXTENT and 0 < c <= 16):
        raise ValueError(f"{path}: extents {c}x{h}x{w} out of range")
    labeled = bool(flags & 1)
    expected = HEADER.size + c * h * w * 4 + (h * w * 2 if labeled else 0)
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} != expected {expected}")
    off = HEADER.size
    img = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
    label = None
    if labeled:
        off += c * h * w * 4
        label = np.frombuffer(raw, dtype="<u2", count=h * w, offset=off).reshape(h, w)
        label = label.astype(np.uint16)
    return DomainSample(img.astype(np.float32), label, "target" if flags & 2 else "source",
                        path.stem)


def write_manifest(path, records) -> None:
    lines = [MANIFEST_HEADER] + [r.line() for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, check_files: bool = True) -> list[ManifestRecord]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# pipa-manifest"):
        raise ValueError(f"{path}: not a manifest")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{n}: expected 5 fields, got {len(parts)}")
        rel, domain, split, clip, frame = parts
        if check_files and not (path.parent / rel).is_file():
            raise FileNotFoundError(f"{path}:{n}: missing sample file {rel}")
        out.append(ManifestRecord(rel, domain, split, None if clip == "-" else int(clip),
                                  None if frame == "-" else int(frame)))
    return out


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s, rec in zip(ds.samples, ds.records()):
        save_sample(out / rec.relpath, s)
    write_manifest(out / "manifest.tsv", ds.records())
    return out / "manifest.tsv"


def read_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.tsv" if root.is_dir() else root
    ds = Dataset()
    for rec in read_manifest(manifest):
        s = load_sample(manifest.parent / rec.relpath)
        s.domain, s.split, s.clip_id, s.frame_idx = rec.domain, rec.split, rec.clip_id, rec.frame_idx
        s.id = os.path.splitext(rec.relpath)[0]
        ds.samples.append(s)
    return ds
