"""Training objectives: cross-entropy terms and the three InfoNCE-style contrasts.

All contrasts share one form. For an anchor ``i`` with positive ``j`` drawn
from a candidate pool, the term is ``-log r(i, j) / sum_k r(i, k)`` where
``r(a, b) = exp(<a, b> / tau)`` on unit vectors and ``k`` runs over the pool
minus the anchor itself. Terms are summed and optionally divided by the number
of (anchor, positive) pairs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

IGNORE_INDEX = 255


@dataclass
class ContrastConfig:
    tau: float = 0.1
    max_anchors_per_class: int = 64
    negatives_per_anchor: int = 256
    normalize_by_pairs: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass
class LossReport:
    ce_source: float = 0.0
    ce_target: float = 0.0
    pixel: float = 0.0
    patch: float = 0.0
    temporal: float = 0.0
    total: float = 0.0
    counts: dict = field(default_factory=dict)

    def row(self) -> list[float]:
        return [self.ce_source, self.ce_target, self.pixel, self.patch, self.temporal, self.total]


def exp_cos_sim(a, b, tau: float) -> float:
    return math.exp(float(np.dot(a, b)) / tau)


def _flat_logits(logits: Tensor) -> Tensor:
    B, C, H, W = logits.shape
    return dc.reshape(dc.transpose(logits, (0, 2, 3, 1)), (B * H * W, C))


def ce_source(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean per-pixel CE over non-ignored pixels of a [B, C, H, W] prediction."""
    return dc.softmax_ce(_flat_logits(logits), np.asarray(labels).reshape(-1), ignore_index)


def ce_target_mixed(logits: Tensor, y_mix, keep_mask, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """CE on the mixed image restricted to ``keep_mask``; 0 if nothing is kept."""
    return dc.softmax_ce(_flat_logits(logits), np.asarray(y_mix).reshape(-1), ignore_index,
                         mask=np.asarray(keep_mask, dtype=bool).reshape(-1))


def info_nce(anchors: Tensor, pool: Tensor, pos_mask: np.ndarray, cand_mask: np.ndarray,
             tau: float, normalize: bool = True) -> tuple[Tensor, int]:
    """Sum of ``-log r(i,j)/sum_k r(i,k)`` over positive (i, j) pairs.

    ``pos_mask`` and ``cand_mask`` are [n_anchor, n_pool] booleans; positives must
    be candidates. Rows without a positive contribute nothing. Returns the loss
    and the number of pairs.
    """
    pos_mask = np.asarray(pos_mask, dtype=bool)
    cand_mask = np.asarray(cand_mask, dtype=bool)
    if np.any(pos_mask & ~cand_mask):
        raise ValueError("info_nce: a positive is not in the candidate pool")
    rows = np.nonzero(pos_mask.any(axis=1))[0]
    n_pairs = int(pos_mask.sum())
    dtype = pool.data.dtype
    if n_pairs == 0:
        return Tensor(np.zeros((), dtype=dtype)), 0
    if rows.size < anchors.shape[0]:
        anchors = dc.gather_rows(anchors, rows)
        pos_mask, cand_mask = pos_mask[rows], cand_mask[rows]
    logits = dc.scale(dc.matmul(anchors, dc.transpose(pool)), 1.0 / tau)
    lse = dc.logsumexp_rows(logits, cand_mask)
    counts = Tensor(pos_mask.sum(axis=1).astype(dtype))
    loss = dc.sub(dc.sum(dc.mul(lse, counts)),
                  dc.sum(dc.mul(logits, Tensor(pos_mask.astype(dtype)))))
    if normalize:
        loss = dc.scale(loss, 1.0 / n_pairs)
    return loss, n_pairs


def select_anchors(labels: np.ndarray, cfg: ContrastConfig, rng: np.random.Generator,
                   ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Up to ``max_anchors_per_class`` indices per present class, uniform within class."""
    labels = np.asarray(labels).reshape(-1)
    out = []
    for c in np.unique(labels[labels != ignore_index]):
        idx = np.nonzero(labels == c)[0]
        if idx.size > cfg.max_anchors_per_class:
            idx = np.sort(rng.choice(idx, cfg.max_anchors_per_class, replace=False))
        out.append(idx)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def pixel_contrast(emb: Tensor, labels, anchor_idx, cfg: ContrastConfig,
                   bank_vecs: np.ndarray | None = None, bank_labels: np.ndarray | None = None,
                   ignore_index: int = IGNORE_INDEX) -> tuple[Tensor, dict]:
    """Class-supervised contrast over per-pixel embeddings ``emb`` [N, E].

    The pool is every labeled in-image embedding plus the (detached) bank
    vectors. Positives of an anchor are pool entries of its class other than
    itself. Anchors without a positive are skipped and counted.
    """
    labels = np.asarray(labels).reshape(-1)
    anchor_idx = np.asarray(anchor_idx, dtype=np.int64).reshape(-1)
    valid = np.nonzero(labels != ignore_index)[0]
    if np.any(labels[anchor_idx] == ignore_index):
        raise ValueError("pixel_contrast: anchor on an ignored pixel")
    pool_parts = [dc.gather_rows(emb, valid)]
    pool_labels = [labels[valid]]
    if bank_vecs is not None and len(bank_vecs):
        pool_parts.append(Tensor(np.asarray(bank_vecs, dtype=emb.data.dtype)))
        pool_labels.append(np.asarray(bank_labels).reshape(-1))
    pool = dc.concat_rows(pool_parts) if len(pool_parts) > 1 else pool_parts[0]
    pool_labels = np.concatenate(pool_labels)
    # anchor's own position in the pool
    pos_in_pool = np.searchsorted(valid, anchor_idx)
    anchors = dc.gather_rows(emb, anchor_idx)
    cand = np.ones((anchor_idx.size, pool_labels.size), dtype=bool)
    cand[np.arange(anchor_idx.size), pos_in_pool] = False
    pos = cand & (pool_labels[None, :] == labels[anchor_idx][:, None])
    loss, n_pairs = info_nce(anchors, pool, pos, cand, cfg.tau, cfg.normalize_by_pairs)
    skipped = int((~pos.any(axis=1)).sum())
    return loss, {"anchors": int(anchor_idx.size - skipped), "pairs": n_pairs,
                  "skipped": skipped}


def patch_contrast(f1: Tensor, f2: Tensor, pairs, cfg: ContrastConfig,
                   extra_negatives: Tensor | None = None) -> tuple[Tensor, dict]:
    """Overlap-consistency contrast between two crops' embeddings.

    ``f1`` [n1, E] and ``f2`` [n2, E] are the flattened feature grids of the two
    patches; ``pairs`` maps overlap cells (i in patch 1, j in patch 2). The pool
    is every cell of both patches plus ``extra_negatives``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("patch_contrast: empty overlap")
    n1, n2 = f1.shape[0], f2.shape[0]
    parts = [f1, f2] + ([extra_negatives] if extra_negatives is not None else [])
    pool = dc.concat_rows(parts)
    m = pool.shape[0]
    rows = np.arange(pairs.shape[0])
    cand = np.ones((pairs.shape[0], m), dtype=bool)
    cand[rows, pairs[:, 0]] = False
    pos = np.zeros_like(cand)
    pos[rows, n1 + pairs[:, 1]] = True
    anchors = dc.gather_rows(f1, pairs[:, 0])
    loss, n_pairs = info_nce(anchors, pool, pos, cand, cfg.tau, cfg.normalize_by_pairs)
    return loss, {"pairs": n_pairs, "pool": m, "n1": n1, "n2": n2}


def temporal_contrast(ft_key: Tensor, ft_ref: Tensor, cfg: ContrastConfig) -> tuple[Tensor, dict]:
    """Key cell i against reference cell i; other reference cells are negatives."""
    if ft_key.shape != ft_ref.shape:
        raise ValueError(f"temporal_contrast: {ft_key.shape} vs {ft_ref.shape}")
    n = ft_key.shape[0]
    pos = np.eye(n, dtype=bool)
    cand = np.ones((n, n), dtype=bool)
    loss, n_pairs = info_nce(ft_key, ft_ref, pos, cand, cfg.tau, cfg.normalize_by_pairs)
    return loss, {"pairs": n_pairs}


def total_loss(ce_s, ce_t, pixel, patch, temporal, alpha: float, beta: float, gamma: float,
               scenario: str = "static"):
    """Weighted sum; the temporal term is dropped in the static scenario.

    Works on Tensors (returns a Tensor) or plain floats. ``None`` terms are
    treated as absent.
    """
    if min(alpha, beta, gamma) < 0:
        raise ValueError("loss weights must be nonnegative")
    if scenario not in ("static", "video"):
        raise ValueError(f"unknown scenario {scenario!r}")
    terms = [(ce_s, 1.0), (ce_t, 1.0), (pixel, alpha), (patch, beta)]
    if scenario == "video":
        terms.append((temporal, gamma))
    tensors = any(isinstance(t, Tensor) for t, _ in terms)
    acc = None
    for t, w in terms:
        if t is None or w == 0:
            continue
        if tensors:
            t = t if isinstance(t, Tensor) else Tensor(t)
            v = t if w == 1.0 else dc.scale(t, w)
            acc = v if acc is None else dc.add(acc, v)
        else:
            acc = (0.0 if acc is None else acc) + w * t
    if acc is None:
        return Tensor(0.0) if tensors else 0.0
    return acc
