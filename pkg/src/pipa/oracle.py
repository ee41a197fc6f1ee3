"""Literal double-loop reference evaluations of the contrast losses.

Deliberately naive: plain Python floats, one ``math.exp`` per pair, no
vectorization or stabilization. Used to cross-check the batched versions.
"""
from __future__ import annotations

import math


def _r(a, b, tau):
    return math.exp(sum(float(x) * float(y) for x, y in zip(a, b)) / tau)


def _term(anchor, positive, pool, tau):
    den = 0.0
    for k in pool:
        den += _r(anchor, k, tau)
    return -math.log(_r(anchor, positive, tau) / den)


def pixel_contrast_loop(emb, labels, anchor_idx, tau, bank_vecs=(), bank_labels=(),
                        normalize=True, ignore_index=255):
    """emb: sequence of vectors; labels: per-row class; bank entries join the pool."""
    pool = [(("img", n), emb[n], labels[n]) for n in range(len(emb)) if labels[n] != ignore_index]
    pool += [(("bank", n), v, c) for n, (v, c) in enumerate(zip(bank_vecs, bank_labels))]
    total, pairs = 0.0, 0
    for a in anchor_idx:
        others = [p for p in pool if p[0] != ("img", a)]
        vecs = [v for _, v, _ in others]
        for _, v, c in others:
            if c == labels[a]:
                total += _term(emb[a], v, vecs, tau)
                pairs += 1
    return total / pairs if normalize and pairs else total


def patch_contrast_loop(f1, f2, pairs, tau, extra=(), normalize=True):
    total = 0.0
    for i, j in pairs:
        pool = [v for k, v in enumerate(f1) if k != i] + list(f2) + list(extra)
        total += _term(f1[i], f2[j], pool, tau)
    return total / len(pairs) if normalize and pairs else total


def temporal_contrast_loop(fk, fr, tau, normalize=True):
    total = 0.0
    for i in range(len(fk)):
        total += _term(fk[i], fr[i], list(fr), tau)
    return total / len(fk) if normalize and len(fk) else total
