"""Toy encoder-decoder segmentation network, projection heads and the EMA teacher."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

HEADS = ("pixel", "patch", "temp")


class SegNet:
    """Conv encoder at stride 4 plus a classifier head and three projection heads.

    Parameters live in a flat ordered dict keyed by name. Keys under ``head.``
    belong to projection heads and are never read on the inference path.
    """

    def __init__(self, num_classes: int = 5, feat_dim: int = 64, embed_dim: int = 32,
                 widths=(32, 64, 64), seed: int = 0, dtype=None):
        self.num_classes = num_classes
        self.feat_dim = feat_dim
        self.embed_dim = embed_dim
        self.widths = tuple(widths)
        self.stride = 4
        dtype = dtype or dc.get_default_dtype()
        rng = np.random.default_rng(seed)
        p = OrderedDict()
        # (name, in, out, kernel, stride)
        self.stages = [("enc0", 3, widths[0], 3, 1), ("enc1", widths[0], widths[1], 3, 2),
                       ("enc2", widths[1], widths[2], 3, 2), ("dec", widths[2], feat_dim, 3, 1)]
        for name, cin, cout, k, _ in self.stages:
            p[f"{name}.w"], p[f"{name}.b"] = _init_conv(rng, cin, cout, k, dtype)
        p["cls.fc1.w"], p["cls.fc1.b"] = _init_conv(rng, feat_dim, feat_dim, 1, dtype)
        p["cls.fc2.w"], p["cls.fc2.b"] = _init_conv(rng, feat_dim, num_classes, 1, dtype)
        for h in HEADS:
            p[f"head.{h}.fc1.w"], p[f"head.{h}.fc1.b"] = _init_conv(rng, feat_dim, feat_dim, 1, dtype)
            p[f"head.{h}.fc2.w"], p[f"head.{h}.fc2.b"] = _init_conv(rng, feat_dim, embed_dim, 1, dtype)
        self.params: OrderedDict[str, Tensor] = p
        for t in p.values():
            t.requires_grad = True

    def arch(self) -> dict:
        return {"num_classes": self.num_classes, "feat_dim": self.feat_dim,
                "embed_dim": self.embed_dim, "widths": list(self.widths)}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def forward_features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise ValueError(f"input extents {x.shape[2:]} not multiples of stride {self.stride}")
        p = self.params
        for name, _, _, k, s in self.stages:
            # stride-2 stages pad (1, 0) so even extents halve exactly
            pad = (1, 0) if s == 2 else k // 2
            x = dc.relu(dc.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=s, pad=pad))
        return x

    def forward_cls(self, feats: Tensor, out_hw=None) -> Tensor:
        """Class logits upsampled to ``out_hw`` (default: stride x feature extents)."""
        p = self.params
        h = dc.relu(dc.conv2d(feats, p["cls.fc1.w"], p["cls.fc1.b"]))
        logits = dc.conv2d(h, p["cls.fc2.w"], p["cls.fc2.b"])
        if out_hw is None:
            out_hw = (feats.shape[2] * self.stride, feats.shape[3] * self.stride)
        return dc.bilinear_resize(logits, *out_hw)

    def forward_head(self, feats: Tensor, head: str) -> Tensor:
        """Unit-norm embeddings [B, E, h, w] from one projection head."""
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        p = self.params
        h = dc.relu(dc.conv2d(feats, p[f"head.{head}.fc1.w"], p[f"head.{head}.fc1.b"]))
        e = dc.conv2d(h, p[f"head.{head}.fc2.w"], p[f"head.{head}.fc2.b"])
        return dc.l2_normalize(e, axis=1)

    def predict(self, x) -> np.ndarray:
        """Argmax class map at input resolution; uses no projection head."""
        with dc.no_grad():
            logits = self.forward_cls(self.forward_features(x))
        return np.argmax(logits.data, axis=1)


def _init_conv(rng, cin, cout, k, dtype):
    bound = np.sqrt(6.0 / (cin * k * k))
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
    return Tensor(w.astype(dtype)), Tensor(np.zeros(cout, dtype=dtype))


class Teacher:
    """EMA copy of a student's parameters; never part of a gradient graph."""

    def __init__(self, student: SegNet, momentum: float = 0.999):
        self.momentum = momentum
        self.net = SegNet.__new__(SegNet)
        self.net.__dict__.update({k: v for k, v in student.__dict__.items() if k != "params"})
        self.net.params = OrderedDict((k, Tensor(v.data.copy())) for k, v in student.params.items())

    @property
    def params(self):
        return self.net.params

    def update(self, student: SegNet, m: float | None = None) -> None:
        ema_update(self, student, self.momentum if m is None else m)


def ema_update(teacher: Teacher, student: SegNet, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    tp, sp = teacher.params, student.params
    if tp.keys() != sp.keys():
        raise ValueError("teacher and student parameter names differ")
    for k, t in tp.items():
        s = sp[k].data
        if t.shape != s.shape:
            raise ValueError(f"{k}: shape {t.shape} vs {s.shape}")
    for k, t in tp.items():
        t.data = m * t.data + (1.0 - m) * sp[k].data


def pseudo_label(teacher: Teacher, x, threshold: float):
    """Teacher argmax labels and the mask of pixels with max probability > threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    with dc.no_grad():
        logits = teacher.net.forward_cls(teacher.net.forward_features(x)).data
    return labels_from_logits(logits, threshold)


def labels_from_logits(logits: np.ndarray, threshold: float):
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=1, keepdims=True)
    return prob.argmax(axis=1), prob.max(axis=1) > threshold
