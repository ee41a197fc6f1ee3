"""Finite-difference checks over every differentiable op and every loss.

Each case builds a scalar function of a few random float64 inputs (feature
extents at most 16x16) and runs :func:`pipa.diffcore.grad_check` on it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, grad_check
from .geom import PatchPairSpec, Rect, overlap_correspondence
from .losses import (ContrastConfig, ce_source, ce_target_mixed, patch_contrast, pixel_contrast,
                     temporal_contrast, total_loss)
from .model import SegNet


@dataclass
class CaseResult:
    name: str
    passed: bool
    max_rel_error: float
    seconds: float
    message: str = ""


def _unit(t: Tensor) -> Tensor:
    return dc.l2_normalize(t, axis=1)


def _probe(shape, rng):
    """Fixed random weights so that sum-type reductions do not hide errors."""
    return Tensor(rng.normal(size=shape))


def build_cases(seed: int = 0):
    """List of (name, f, inputs) triples."""
    rng = np.random.default_rng(seed)
    n = rng.normal
    cases = []

    def add(name, f, *inputs):
        cases.append((name, f, [np.asarray(x, dtype=np.float64) for x in inputs]))

    w66 = _probe((6, 6), rng)
    add("add", lambda a, b: dc.sum(dc.mul(dc.add(a, b), w66)), n(size=(6, 6)), n(size=(6, 6)))
    add("sub", lambda a, b: dc.sum(dc.mul(dc.sub(a, b), w66)), n(size=(6, 6)), n(size=(6, 6)))
    add("mul", lambda a, b: dc.sum(dc.mul(dc.mul(a, b), w66)), n(size=(6, 6)), n(size=(6, 6)))
    add("mul_scalar", lambda a, s: dc.sum(dc.mul(dc.mul(a, s), w66)), n(size=(6, 6)), n())
    add("div", lambda a, b: dc.sum(dc.mul(dc.div(a, b), w66)),
        n(size=(6, 6)), rng.uniform(0.5, 2.0, (6, 6)) * rng.choice([-1, 1], (6, 6)))
    add("exp", lambda a: dc.sum(dc.mul(dc.exp(a), w66)), n(size=(6, 6)))
    add("log", lambda a: dc.sum(dc.mul(dc.log(a), w66)), rng.uniform(0.5, 3.0, (6, 6)))
    # keep relu inputs away from the kink at 0
    relu_in = rng.uniform(0.05, 1.0, (6, 6)) * rng.choice([-1, 1], (6, 6))
    add("relu", lambda a: dc.sum(dc.mul(dc.relu(a), w66)), relu_in)
    add("scale", lambda a: dc.sum(dc.mul(dc.scale(a, -2.5), w66)), n(size=(6, 6)))
    p53 = _probe((5, 3), rng)
    add("matmul", lambda a, b: dc.sum(dc.mul(dc.matmul(a, b), p53)),
        n(size=(5, 4)), n(size=(4, 3)))

    for k, s, pad, hw in ((3, 1, 1, 8), (3, 2, (1, 0), 8), (1, 1, 0, 8), (1, 2, (0, 1), 8),
                          (3, 1, 1, 16)):
        out = (hw + (sum(pad) if isinstance(pad, tuple) else 2 * pad) - k) // s + 1
        probe = _probe((2, 3, out, out), rng)
        add(f"conv2d_k{k}_s{s}_{hw}x{hw}",
            lambda x, w, b, k=k, s=s, pad=pad, probe=probe:
                dc.sum(dc.mul(dc.conv2d(x, w, b, s, pad), probe)),
            n(size=(2, 2, hw, hw)), n(size=(3, 2, k, k)), n(size=3))

    targets = np.array([0, 2, 255, 1, 3, 0, 2, 1])
    mask = np.array([1, 1, 1, 0, 1, 1, 1, 1], bool)
    add("softmax_ce", lambda a: dc.softmax_ce(a, targets, mask=mask), 2 * n(size=(8, 4)))

    p5, p4 = _probe((5,), rng), _probe((4,), rng)
    add("sum_axis", lambda a: dc.sum(dc.mul(dc.sum(a, axis=0), p5)), n(size=(4, 5)))
    add("mean", lambda a: dc.sum(dc.mul(dc.mean(a, axis=1), p4)), n(size=(4, 5)))
    add("max", lambda a: dc.sum(dc.mul(dc.max(a, axis=1), p4)), n(size=(4, 5)))
    p54 = _probe((5, 4), rng)
    add("reshape", lambda a: dc.sum(dc.mul(dc.reshape(a, (5, 4)), p54)),
        n(size=(4, 5)))
    p423 = _probe((4, 2, 3), rng)
    add("transpose", lambda a: dc.sum(dc.mul(dc.transpose(a, (2, 0, 1)), p423)),
        n(size=(2, 3, 4)))
    idx = np.array([0, 5, 2, 2, 1, 0])
    p63 = _probe((6, 3), rng)
    add("gather_rows", lambda a: dc.sum(dc.mul(dc.gather_rows(a, idx), p63)),
        n(size=(6, 3)))
    add("concat_rows", lambda a, b: dc.sum(dc.mul(dc.concat_rows([a, b]), p53)),
        n(size=(2, 3)), n(size=(3, 3)))
    p_up = _probe((1, 2, 16, 12), rng)
    add("bilinear_resize", lambda a: dc.sum(dc.mul(dc.bilinear_resize(a, 16, 12), p_up)),
        n(size=(1, 2, 4, 6)))
    lmask = rng.random((4, 6)) > 0.3
    lmask[:, 0] = True
    add("logsumexp_rows", lambda a: dc.sum(dc.mul(dc.logsumexp_rows(a, lmask), p4)),
        3 * n(size=(4, 6)))
    add("l2_normalize", lambda a: dc.sum(dc.mul(_unit(a), p54)), n(size=(5, 4)))

    # losses
    y = rng.integers(0, 3, (2, 4, 4))
    y[0, 0, :2] = 255
    add("ce_source", lambda z: ce_source(z, y), 2 * n(size=(2, 3, 4, 4)))
    keep = rng.random((2, 4, 4)) < 0.5
    add("ce_target_mixed", lambda z: ce_target_mixed(z, y, keep), 2 * n(size=(2, 3, 4, 4)))

    cfg = ContrastConfig(tau=0.1)
    labels = np.array([0, 0, 1, 1, 2, 2, 0, 1])
    bank = rng.normal(size=(4, 6))
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    add("pixel_contrast", lambda e: pixel_contrast(_unit(e), labels, np.arange(8), cfg, bank,
                                                   np.array([0, 1, 2, 2]))[0],
        n(size=(8, 6)))
    spec = PatchPairSpec(1.0, 32, 32, Rect(0, 0, 16, 16), Rect(4, 8, 20, 24),
                         Rect(4, 8, 16, 16), 4)
    pairs = overlap_correspondence(spec)
    add("patch_contrast", lambda a, b, x: patch_contrast(_unit(a), _unit(b), pairs, cfg,
                                                         _unit(x))[0],
        n(size=(16, 6)), n(size=(16, 6)), n(size=(4, 6)))
    add("temporal_contrast", lambda a, b: temporal_contrast(_unit(a), _unit(b), cfg)[0],
        n(size=(9, 6)), n(size=(9, 6)))

    def total(z, e, a, b):
        pix = pixel_contrast(_unit(e), labels, np.arange(8), cfg)[0]
        pat = patch_contrast(_unit(a), _unit(b), pairs, cfg)[0]
        tmp = temporal_contrast(_unit(a), _unit(b), cfg)[0]
        return total_loss(ce_source(z, y), ce_target_mixed(z, y, keep), pix, pat, tmp,
                          0.1, 0.1, 0.1, "video")

    add("total_loss", total, 2 * n(size=(2, 3, 4, 4)), n(size=(8, 6)), n(size=(16, 6)),
        n(size=(16, 6)))

    # the network end to end: features -> class logits and a projection head
    net = SegNet(num_classes=3, feat_dim=4, embed_dim=3, widths=(2, 3, 3), seed=seed)
    x = rng.random((1, 3, 8, 8))
    probe = _probe((1, 3, 8, 8), rng)
    probe_h = _probe((1, 3, 2, 2), rng)

    def with_param(name, fwd):
        def f(w):
            saved = net.params[name]
            net.params[name] = w
            try:
                return fwd()
            finally:
                net.params[name] = saved
        return f

    add("segnet_cls", with_param("enc0.w", lambda: dc.sum(dc.mul(
        net.forward_cls(net.forward_features(x)), probe))), net.params["enc0.w"].data.copy())
    add("segnet_head", with_param("head.pixel.fc1.w", lambda: dc.sum(dc.mul(
        net.forward_head(net.forward_features(x), "pixel"), probe_h))),
        net.params["head.pixel.fc1.w"].data.copy())
    return cases


def run_suite(tol: float = 1e-4, eps: float = 1e-4, seed: int = 0, progress=None):
    """Run every case in float64; returns a list of CaseResult."""
    prev = dc.get_default_dtype()
    dc.set_default_dtype(np.float64)
    results = []
    try:
        for name, f, inputs in build_cases(seed):
            t0 = time.perf_counter()
            rep = grad_check(f, inputs, eps=eps, tol=tol)
            res = CaseResult(name, rep.passed, rep.max_rel_error, time.perf_counter() - t0,
                             rep.message)
            results.append(res)
            if progress:
                progress(res)
    finally:
        dc.set_default_dtype(prev)
    return results
