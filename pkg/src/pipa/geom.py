"""Crop geometry for the two overlapping patches and their feature correspondence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_TRIALS = 1000


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate rect {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersect(self, other: "Rect") -> "Rect | None":
        x0, y0 = max(self.x0, other.x0), max(self.y0, other.y0)
        x1, y1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return Rect(x0, y0, x1, y1)


def rect_iou(a: Rect, b: Rect) -> float:
    inter = a.intersect(b)
    if inter is None:
        return 0.0
    i = inter.area
    return i / (a.area + b.area - i)


@dataclass(frozen=True)
class PatchPairSpec:
    resize_ratio: float
    img_w: int  # resized extents
    img_h: int
    rect1: Rect
    rect2: Rect
    overlap: Rect
    stride: int

    def validate(self, iou_range=(0.1, 1.0)) -> None:
        r1, r2, s = self.rect1, self.rect2, self.stride
        if (r1.width, r1.height) != (r2.width, r2.height):
            raise ValueError("patch rects differ in size")
        if r1.intersect(r2) != self.overlap:
            raise ValueError("overlap is not rect1 ∩ rect2")
        for r in (r1, r2):
            if r.x0 < 0 or r.y0 < 0 or r.x1 > self.img_w or r.y1 > self.img_h:
                raise ValueError(f"{r} outside {self.img_w}x{self.img_h}")
            if any(v % s for v in (r.x0, r.y0, r.width, r.height)):
                raise ValueError(f"{r} not aligned to stride {s}")
        iou = rect_iou(r1, r2)
        if not iou_range[0] <= iou <= iou_range[1]:
            raise ValueError(f"IoU {iou:.4f} outside {iou_range}")


def sample_patch_pair(img_w: int, img_h: int, crop: int, iou_range=(0.1, 1.0), stride: int = 4,
                      rng: np.random.Generator | None = None,
                      ratio_range=(0.5, 2.0)) -> PatchPairSpec:
    """Draw a resize ratio and two stride-aligned ``crop`` x ``crop`` patches.

    The ratio is uniform on ``ratio_range`` restricted to values where the
    resized image still holds a crop. The first offset is redrawn until some
    second offset gives an IoU within ``iou_range``; the second is then drawn
    uniformly among those.
    """
    rng = np.random.default_rng() if rng is None else rng
    if crop % stride:
        raise ValueError(f"crop {crop} is not a multiple of stride {stride}")
    lo_ratio = max(ratio_range[0], crop / min(img_w, img_h))
    if lo_ratio > ratio_range[1]:
        raise ValueError(f"crop {crop} does not fit a {img_w}x{img_h} image at any ratio")
    ratio = float(rng.uniform(lo_ratio, ratio_range[1])) if lo_ratio < ratio_range[1] else lo_ratio
    rw = max(crop, int(round(img_w * ratio)))
    rh = max(crop, int(round(img_h * ratio)))
    nx, ny = (rw - crop) // stride + 1, (rh - crop) // stride + 1
    lo, hi = iou_range
    grid_x = np.arange(nx) * stride
    grid_y = np.arange(ny) * stride
    for _ in range(MAX_TRIALS):
        ox1, oy1 = int(rng.integers(nx)) * stride, int(rng.integers(ny)) * stride
        # IoU of every stride-aligned second patch against the first
        ix = np.clip(crop - np.abs(grid_x - ox1), 0, None)
        iy = np.clip(crop - np.abs(grid_y - oy1), 0, None)
        inter = iy[:, None] * ix[None, :]
        iou = inter / (2 * crop * crop - inter)
        ok = np.flatnonzero((iou >= lo) & (iou <= hi) & (inter > 0))
        if ok.size == 0:
            continue
        k = int(ok[rng.integers(ok.size)])
        oy2, ox2 = int(grid_y[k // nx]), int(grid_x[k % nx])
        r1 = Rect(ox1, oy1, ox1 + crop, oy1 + crop)
        r2 = Rect(ox2, oy2, ox2 + crop, oy2 + crop)
        return PatchPairSpec(ratio, rw, rh, r1, r2, r1.intersect(r2), stride)
    raise ValueError(
        f"no patch pair with IoU in [{lo}, {hi}] after {MAX_TRIALS} trials "
        f"({rw}x{rh} image, crop {crop}, stride {stride})")


def overlap_correspondence(spec: PatchPairSpec) -> list[tuple[int, int]]:
    """Flat feature-grid index pairs (in patch 1, in patch 2) sharing an image location.

    Ordered row-major over the overlap.
    """
    s = spec.stride
    r1, r2, ov = spec.rect1, spec.rect2, spec.overlap
    w1, w2 = r1.width // s, r2.width // s
    pairs = []
    for y in range(ov.y0, ov.y1, s):
        for x in range(ov.x0, ov.x1, s):
            i = ((y - r1.y0) // s) * w1 + (x - r1.x0) // s
            j = ((y - r2.y0) // s) * w2 + (x - r2.x0) // s
            pairs.append((i, j))
    return pairs


def feature_cell_to_image(rect: Rect, flat: int, stride: int) -> tuple[int, int]:
    """Top-left image pixel (x, y) covered by feature cell ``flat`` of a patch."""
    w = rect.width // stride
    return rect.x0 + (flat % w) * stride, rect.y0 + (flat // w) * stride


def image_to_feature_cell(rect: Rect, x: int, y: int, stride: int) -> int:
    w = rect.width // stride
    return ((y - rect.y0) // stride) * w + (x - rect.x0) // stride
