"""Confusion-matrix IoU evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE_INDEX = 255


@dataclass
class EvalReport:
    iou: list  # per class; nan where the class is absent from both GT and prediction
    miou: float
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    iteration: int = -1

    def lines(self, tag: str = "eval") -> list[str]:
        out = [f"# {tag} iter={self.iteration} miou={self.miou!r}"]
        for c, v in enumerate(self.iou):
            out.append(f"# {tag} class={c} iou={v!r} tp={int(self.tp[c])} fp={int(self.fp[c])} "
                       f"fn={int(self.fn[c])}")
        return out


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int,
              ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """[gt, pred] pixel counts; ignored GT pixels are skipped."""
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    keep = gt != ignore_index
    if keep.any() and (gt[keep].max() >= num_classes or gt[keep].min() < 0):
        raise ValueError(f"ground-truth class {gt[keep].max()} outside [0, {num_classes})")
    idx = gt[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray, iteration: int = -1) -> EvalReport:
    tp = np.diag(conf).astype(np.int64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    iou = [float(tp[c] / union[c]) if union[c] else float("nan") for c in range(len(tp))]
    present = [v for v in iou if v == v]
    miou = float(np.mean(present)) if present else float("nan")
    return EvalReport(iou, miou, tp, fp, fn, iteration)


def evaluate(net, samples, num_classes: int | None = None, batch: int = 8,
             iteration: int = -1) -> EvalReport:
    """Per-class IoU and mIoU of ``net.predict`` over labeled samples."""
    num_classes = num_classes or net.num_classes
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    samples = list(samples)
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        if any(s.label is None for s in chunk):
            raise ValueError("evaluate needs labeled samples")
        x = np.stack([s.image for s in chunk]).astype(net_dtype(net))
        pred = net.predict(x)
        for p, s in zip(pred, chunk):
            conf += confusion(p, s.label, num_classes)
    return iou_from_confusion(conf, iteration)


def net_dtype(net):
    return next(iter(net.params.values())).data.dtype
