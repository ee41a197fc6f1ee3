"""ClassMix domain mixing and photometric jitter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

IGNORE_INDEX = 255


@dataclass
class MixSpec:
    selected_classes: np.ndarray
    source_id: str = ""
    target_id: str = ""


def choose_classes(y_s: np.ndarray, rng: np.random.Generator,
                   ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Half of the present classes (rounded half up, at least one)."""
    present = np.unique(y_s[y_s != ignore_index])
    if present.size == 0:
        return present
    k = max(1, (present.size + 1) // 2)
    return np.sort(rng.choice(present, size=k, replace=False))


def classmix(x_s: np.ndarray, y_s: np.ndarray, x_t: np.ndarray, y_pseudo: np.ndarray,
             keep_mask: np.ndarray, rng: np.random.Generator, selected=None,
             ignore_index: int = IGNORE_INDEX):
    """Paste the pixels of a random half of ``y_s``'s classes onto the target.

    Images are [3, H, W], labels and masks [H, W]. Returns ``(x_mix, y_mix,
    mix_keep_mask, MixSpec)``; pasted pixels are always kept.
    """
    if x_s.shape != x_t.shape or y_s.shape != y_pseudo.shape or y_s.shape != x_s.shape[-2:]:
        raise ValueError(f"classmix: extent mismatch {x_s.shape}/{y_s.shape} vs "
                         f"{x_t.shape}/{y_pseudo.shape}")
    if selected is None:
        selected = choose_classes(y_s, rng, ignore_index)
    selected = np.asarray(selected)
    paste = np.isin(y_s, selected) & (y_s != ignore_index)
    x_mix = np.where(paste[None], x_s, x_t)
    y_mix = np.where(paste, y_s, y_pseudo)
    keep = paste | np.asarray(keep_mask, dtype=bool)
    return x_mix, y_mix, keep, MixSpec(selected)


@dataclass
class PhotometricParams:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)


def photometric(x: np.ndarray, rng: np.random.Generator,
                params: PhotometricParams | None = None) -> np.ndarray:
    """Brightness/contrast/saturation jitter then optional Gaussian blur; clamped to [0, 1]."""
    p = params or PhotometricParams()
    out = x.astype(np.float64, copy=True)
    if p.brightness:
        out *= rng.uniform(1 - p.brightness, 1 + p.brightness)
    if p.contrast:
        m = out.mean()
        out = (out - m) * rng.uniform(1 - p.contrast, 1 + p.contrast) + m
    if p.saturation:
        gray = out.mean(axis=0, keepdims=True)
        out = (out - gray) * rng.uniform(1 - p.saturation, 1 + p.saturation) + gray
    if p.blur_prob and rng.random() < p.blur_prob:
        sigma = rng.uniform(*p.blur_sigma)
        out = gaussian_filter(out, sigma=(0, sigma, sigma), mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(x.dtype)
