"""Task-smart sampling: per-class feature bank and short-range reference frames."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class FeatureBank:
    """Per-class FIFO queues of detached unit embeddings with capacity ``capacity``."""

    def __init__(self, num_classes: int, dim: int, capacity: int = 256):
        self.num_classes = num_classes
        self.dim = dim
        self.capacity = capacity
        self.queues = [deque(maxlen=capacity) for _ in range(num_classes)]
        self.pushed = 0
        self.evicted = 0

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    def push(self, class_id: int, embeddings) -> None:
        if not 0 <= class_id < self.num_classes:
            raise ValueError(f"class {class_id} outside [0, {self.num_classes})")
        vecs = np.array(embeddings, dtype=np.float64, copy=True).reshape(-1, self.dim)
        norms = np.linalg.norm(vecs, axis=1)
        if vecs.size and not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("bank accepts unit-norm embeddings only")
        q = self.queues[class_id]
        for v in vecs:
            if len(q) == self.capacity:
                self.evicted += 1
            v.flags.writeable = False
            q.append(v)
        self.pushed += len(vecs)

    def push_labeled(self, embeddings: np.ndarray, labels: np.ndarray, ignore_index: int = 255):
        labels = np.asarray(labels).reshape(-1)
        for c in np.unique(labels[labels != ignore_index]):
            self.push(int(c), embeddings[labels == c])

    def sample(self, class_id: int, n: int, rng: np.random.Generator) -> list[np.ndarray]:
        q = self.queues[class_id]
        k = min(max(n, 0), len(q))
        if k == 0:
            return []
        idx = rng.choice(len(q), size=k, replace=False)
        return [q[i] for i in idx]

    def sample_pool(self, total: int, rng: np.random.Generator):
        """Split ``total`` draws evenly over non-empty classes; returns (vectors, labels)."""
        classes = [c for c in range(self.num_classes) if self.queues[c]]
        if not classes or total <= 0:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=np.int64)
        per = max(1, total // len(classes))
        vecs, labs = [], []
        for c in classes:
            got = self.sample(c, per, rng)
            vecs += got
            labs += [c] * len(got)
        return np.stack(vecs), np.asarray(labs, dtype=np.int64)

    def state(self) -> dict[str, np.ndarray]:
        out = {"counters": np.array([self.pushed, self.evicted], dtype=np.int64)}
        for c, q in enumerate(self.queues):
            out[str(c)] = np.stack(q) if q else np.zeros((0, self.dim))
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.pushed, self.evicted = (int(v) for v in state["counters"])
        for c in range(self.num_classes):
            q = self.queues[c]
            q.clear()
            for v in np.asarray(state[str(c)], dtype=np.float64).reshape(-1, self.dim):
                v = v.copy()
                v.flags.writeable = False
                q.append(v)


def bank_push(bank: FeatureBank, class_id: int, embeddings) -> None:
    bank.push(class_id, embeddings)


def bank_sample(bank: FeatureBank, class_id: int, n: int, rng) -> list[np.ndarray]:
    return bank.sample(class_id, n, rng)


@dataclass(frozen=True)
class TemporalRange:
    min_gap: int = 1
    max_gap: int = 3

    def __post_init__(self):
        if not 1 <= self.min_gap <= self.max_gap:
            raise ValueError(f"invalid temporal range [{self.min_gap}, {self.max_gap}]")


def sample_reference_frame(key_index: int, clip_length: int, trange: TemporalRange,
                           rng: np.random.Generator) -> int:
    """Reference frame ``key ± gap`` with gap uniform in range, direction uniform
    among feasible ones."""
    options = []
    for d in (-1, 1):
        gaps = [g for g in range(trange.min_gap, trange.max_gap + 1)
                if 0 <= key_index + d * g < clip_length]
        if gaps:
            options.append((d, gaps))
    if not options:
        raise ValueError(f"no reference frame within {trange} of frame {key_index} "
                         f"in a clip of length {clip_length}")
    d, gaps = options[int(rng.integers(len(options)))]
    return key_index + d * gaps[int(rng.integers(len(gaps)))]
