"""The self-training loop with pixel, patch and temporal contrast."""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..augment import classmix, photometric
from ..bank import FeatureBank, sample_reference_frame
from ..config import RunConfig, TrainConfig, parse_config_text
from ..data import Dataset
from ..geom import overlap_correspondence, sample_patch_pair
from ..losses import (IGNORE_INDEX, LossReport, ce_source, ce_target_mixed, patch_contrast,
                      pixel_contrast, select_anchors, temporal_contrast, total_loss)
from ..model import SegNet, Teacher, ema_update, pseudo_label
from . import checkpoint as ckpt
from .metrics import EvalReport, evaluate
from .optim import AdamW, lr_schedule

# Named random sub-streams. Each draw is keyed by (seed, stream, iteration), so
# switching one loss off never shifts another component's randomness, and a
# resumed run needs only the seed and the iteration counter.
STREAMS = {"init": 1, "batch": 2, "crop": 3, "mix": 4, "photo": 5, "pixel": 6,
           "patch": 7, "temporal": 8, "patch_photo": 9}

METRICS_HEADER = "iter,lr,ce_s,ce_t,pixel,patch,temporal,total"


def stream(seed: int, name: str, it: int) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name], it])


def _flat_embed(e: dc.Tensor) -> dc.Tensor:
    B, E, h, w = e.shape
    return dc.reshape(dc.transpose(e, (0, 2, 3, 1)), (B * h * w, E))


def _cell_labels(labels: np.ndarray, stride: int = 4) -> np.ndarray:
    """Label at the center pixel of each feature cell."""
    return labels[:, stride // 2::stride, stride // 2::stride]


def _mean(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return dc.scale(acc, 1.0 / len(terms)) if len(terms) > 1 else acc


class Trainer:
    """Owns student, teacher, optimizer state, bank and the iteration counter."""

    def __init__(self, cfg: TrainConfig, data: Dataset, label_hook=None):
        self.cfg = cfg.validate()
        self.dtype = np.float64 if cfg.precision == 64 else np.float32
        self.label_hook = label_hook
        init_seed = int(stream(cfg.seed, "init", 0).integers(2 ** 62))
        self.student = SegNet(cfg.num_classes, cfg.feat_dim, cfg.embed_dim, cfg.width_tuple,
                              seed=init_seed, dtype=self.dtype)
        self.teacher = Teacher(self.student, cfg.ema_m)
        self.optim = AdamW(self.student.params)
        self.bank = FeatureBank(cfg.num_classes, cfg.embed_dim, cfg.bank_capacity)
        self.iter = 0
        self.ccfg = cfg.contrast()
        self._load_data(data)

    # ------------------------------------------------------------------ data

    def _label(self, sample) -> np.ndarray:
        if self.label_hook is not None:
            self.label_hook(sample)
        return sample.label

    def _load_data(self, data: Dataset) -> None:
        cfg = self.cfg
        src = data.select("source", "train")
        if not src:
            raise ValueError("dataset has no source training samples")
        self.src_x = np.stack([s.image for s in src]).astype(self.dtype)
        self.src_y = np.stack([self._label(s) for s in src]).astype(np.int64)
        self.eval_samples = data.select("target", "eval")
        if cfg.scenario == "static":
            tgt = data.select("target", "train")
            if not tgt:
                raise ValueError("dataset has no target training samples")
            self.tgt_x = np.stack([s.image for s in tgt]).astype(self.dtype)
        else:
            clips = data.clips("target", "train")
            if not clips:
                raise ValueError("dataset has no target training clips")
            lens = {len(c) for c in clips}
            if len(lens) != 1:
                raise ValueError("target clips differ in length")
            if lens.pop() < cfg.temporal_max + 1:
                raise ValueError(f"clips shorter than temporal_max + 1 = {cfg.temporal_max + 1}")
            self.clips = np.stack([np.stack([f.image for f in c]) for c in clips]).astype(self.dtype)
        self.H, self.W = self.src_x.shape[2:]
        if cfg.crop > min(self.H, self.W):
            raise ValueError(f"crop {cfg.crop} exceeds image {self.H}x{self.W}")

    def _crop(self, imgs, rng):
        c = self.cfg.crop
        oy = rng.integers(0, self.H - c + 1, size=len(imgs))
        ox = rng.integers(0, self.W - c + 1, size=len(imgs))
        return [(int(y), int(x)) for y, x in zip(oy, ox)]

    def _batch(self, it: int):
        """Source crops, target crops, full target images and (video) reference crops."""
        cfg, B, c = self.cfg, self.cfg.batch_size, self.cfg.crop
        rb, rc = stream(cfg.seed, "batch", it), stream(cfg.seed, "crop", it)
        si = rb.integers(len(self.src_x), size=B)
        if cfg.scenario == "static":
            x_full = self.tgt_x[rb.integers(len(self.tgt_x), size=B)]
            ref_full = None
        else:
            ci = rb.integers(len(self.clips), size=B)
            clip_len = self.clips.shape[1]
            key = rb.integers(clip_len, size=B)
            rt = stream(cfg.seed, "temporal", it)
            ref = [sample_reference_frame(int(k), clip_len, cfg.temporal_range, rt) for k in key]
            x_full = self.clips[ci, key]
            ref_full = self.clips[ci, ref]
        so = self._crop(si, rc)
        to = self._crop(x_full, rc)
        xs = np.stack([self.src_x[i, :, y:y + c, x:x + c] for i, (y, x) in zip(si, so)])
        ys = np.stack([self.src_y[i, y:y + c, x:x + c] for i, (y, x) in zip(si, so)])
        xt = np.stack([img[:, y:y + c, x:x + c] for img, (y, x) in zip(x_full, to)])
        xr = None
        if ref_full is not None:
            xr = np.stack([img[:, y:y + c, x:x + c] for img, (y, x) in zip(ref_full, to)])
        return xs, ys, xt, x_full, xr

    # ------------------------------------------------------------------ step

    def step(self) -> LossReport:
        """One optimization step. Raises without mutating any state on failure."""
        cfg, it, B, net = self.cfg, self.iter, self.cfg.batch_size, self.student
        video = cfg.scenario == "video"
        use_pixel, use_patch = cfg.alpha > 0, cfg.beta > 0
        use_temp = video and cfg.gamma > 0
        lr_t = lr_schedule(it, cfg.lr, cfg.warmup_iters, cfg.total_iters, cfg.decay_power)
        xs, ys, xt, xt_full, xr = self._batch(it)

        # pseudo labels come from the unmixed target; mixing only feeds the student
        yp, keep = pseudo_label(self.teacher, xt, cfg.threshold)
        rm, rp = stream(cfg.seed, "mix", it), stream(cfg.seed, "photo", it)
        x_mix, y_mix, keep_mix = np.empty_like(xt), np.empty_like(ys), np.empty_like(keep)
        for b in range(B):
            x_mix[b], y_mix[b], keep_mix[b], _ = classmix(xs[b], ys[b], xt[b], yp[b], keep[b], rm)
            if cfg.photometric:
                x_mix[b] = photometric(x_mix[b], rp)

        net.zero_grad()
        inputs = [xs, x_mix] + ([xt, xr] if use_temp else [])
        feats = net.forward_features(np.concatenate(inputs))
        f_sm = dc.gather_rows(feats, np.arange(2 * B)) if use_temp else feats
        logits = net.forward_cls(f_sm)
        report = LossReport()
        ce_s = ce_t = pix = pat = tmp = None
        if cfg.use_ce_source:
            ce_s = ce_source(dc.gather_rows(logits, np.arange(B)), ys)
        if cfg.use_ce_target:
            ce_t = ce_target_mixed(dc.gather_rows(logits, np.arange(B, 2 * B)), y_mix, keep_mix)

        bank_push = None
        if use_pixel:
            pix, bank_push, report.counts["pixel"] = self._pixel_term(feats, ys, y_mix, keep_mix, it)
        if use_patch:
            pat, report.counts["patch"] = self._patch_term(xt_full, it)
        if use_temp:
            emb = net.forward_head(dc.gather_rows(feats, np.arange(2 * B, 4 * B)), "temp")
            flat = _flat_embed(emb)
            n = flat.shape[0] // (2 * B)
            terms = []
            for b in range(B):
                k = dc.gather_rows(flat, np.arange(b * n, (b + 1) * n))
                r = dc.gather_rows(flat, np.arange((B + b) * n, (B + b + 1) * n))
                terms.append(temporal_contrast(k, r, self.ccfg)[0])
            tmp = _mean(terms)

        total = total_loss(ce_s, ce_t, pix, pat, tmp, cfg.alpha, cfg.beta, cfg.gamma, cfg.scenario)
        if not np.isfinite(total.data).all():
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        if total.requires_grad:
            total.backward()
        grads = {k: p.grad for k, p in net.params.items()}
        if cfg.grad_clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
            if norm > cfg.grad_clip:
                grads = {k: None if g is None else g * (cfg.grad_clip / norm)
                         for k, g in grads.items()}
        self.optim.step(lr_t, cfg.weight_decay, grads)
        ema_update(self.teacher, net, cfg.ema_m)
        if bank_push is not None and cfg.use_bank:
            self.bank.push_labeled(*bank_push)
        self.iter += 1

        def val(t):
            return 0.0 if t is None else float(t.data)

        report.ce_source, report.ce_target = val(ce_s), val(ce_t)
        report.pixel, report.patch, report.temporal = val(pix), val(pat), val(tmp)
        report.total = float(total.data)
        report.counts["lr"] = lr_t
        report.counts["kept"] = int(keep.sum())
        return report

    def _pixel_term(self, feats, ys, y_mix, keep_mix, it):
        cfg, B, net = self.cfg, self.cfg.batch_size, self.student
        rpx = stream(cfg.seed, "pixel", it)
        labels = _cell_labels(ys).reshape(-1)
        rows = np.arange(B)
        if cfg.pixel_use_target:
            tl = np.where(_cell_labels(keep_mix), _cell_labels(y_mix), IGNORE_INDEX).reshape(-1)
            labels = np.concatenate([labels, tl])
            rows = np.arange(2 * B)
        emb = _flat_embed(net.forward_head(dc.gather_rows(feats, rows), "pixel"))
        anchors = select_anchors(labels, self.ccfg, rpx)
        bank_vecs = bank_labels = None
        if cfg.use_bank:
            bank_vecs, bank_labels = self.bank.sample_pool(cfg.negatives_per_anchor, rpx)
        loss, stats = pixel_contrast(emb, labels, anchors, self.ccfg, bank_vecs, bank_labels)
        n_src = B * (labels.size // len(rows))
        push_labels = labels if cfg.bank_use_target else labels[:n_src]
        push_vecs = emb.data[:push_labels.size].astype(np.float64)
        return loss, (push_vecs, push_labels), stats

    def _patch_term(self, x_full, it):
        cfg, B, net = self.cfg, self.cfg.batch_size, self.student
        rpa = stream(cfg.seed, "patch", it)
        spec = sample_patch_pair(self.W, self.H, cfg.patch_crop, (cfg.iou_lo, cfg.iou_hi), net.stride,
                                 rpa, (cfg.resize_lo, cfg.resize_hi))
        resized = dc.resize_array(x_full, spec.img_h, spec.img_w)
        crops = []
        for r in (spec.rect1, spec.rect2):
            crops.append(resized[:, :, r.y0:r.y1, r.x0:r.x1])
        if cfg.patch_photometric:
            # independent jitter per view, so the two views of a location differ
            rpp = stream(cfg.seed, "patch_photo", it)
            crops = [np.stack([photometric(c, rpp) for c in view]) for view in crops]
        emb = _flat_embed(net.forward_head(net.forward_features(np.concatenate(crops)), "patch"))
        n = emb.shape[0] // (2 * B)
        pairs = overlap_correspondence(spec)

        def block(k):
            return np.arange(k * n, (k + 1) * n)

        terms = []
        for b in range(B):
            f1 = dc.gather_rows(emb, block(b))
            f2 = dc.gather_rows(emb, block(B + b))
            others = [o for o in range(2 * B) if o not in (b, B + b)]
            extra = dc.gather_rows(emb, np.concatenate([block(o) for o in others])) if others else None
            terms.append(patch_contrast(f1, f2, pairs, self.ccfg, extra)[0])
        return _mean(terms), {"pairs": len(pairs), "iou": float(spec.overlap.area / (
            2 * spec.rect1.area - spec.overlap.area))}

    # ------------------------------------------------------------ evaluation

    def evaluate(self) -> EvalReport:
        return evaluate(self.student, self.eval_samples, self.cfg.num_classes, iteration=self.iter)

    # ------------------------------------------------------------ checkpoints

    def state_records(self, run_text: str = "") -> dict:
        rec = {"iter": np.array([self.iter]), "rng/seed": np.array([self.cfg.seed]),
               "optim/step": np.array([self.optim.step_count]),
               "arch": ckpt.text_record(_arch_text(self.student)),
               "config": ckpt.text_record(run_text)}
        for k, p in self.student.params.items():
            rec[f"student/{k}"] = p.data
        for k, p in self.teacher.params.items():
            rec[f"teacher/{k}"] = p.data
        for k in self.student.params:
            rec[f"optim/m/{k}"] = self.optim.m[k]
            rec[f"optim/v/{k}"] = self.optim.v[k]
        for k, v in self.bank.state().items():
            rec[f"bank/{k}"] = v
        return rec

    def save(self, path, run_text: str = "") -> None:
        ckpt.write_records(path, self.state_records(run_text))

    def load(self, path) -> None:
        rec = ckpt.read_records(path)
        if ckpt.record_text(rec.get("arch", np.zeros(0, np.uint8))) != _arch_text(self.student):
            raise ckpt.CheckpointError(f"{path}: architecture mismatch")
        new = {}
        for prefix, params in (("student", self.student.params), ("teacher", self.teacher.params),
                               ("optim/m", self.optim.m), ("optim/v", self.optim.v)):
            for k, p in params.items():
                key = f"{prefix}/{k}"
                arr = rec.get(key)
                shape = p.shape if hasattr(p, "shape") else p.shape
                if arr is None or arr.shape != shape:
                    raise ckpt.CheckpointError(f"{path}: missing or mis-shaped record {key}")
                new[key] = arr.astype(self.dtype)
        for k, p in self.student.params.items():
            p.data = new[f"student/{k}"]
        for k, p in self.teacher.params.items():
            p.data = new[f"teacher/{k}"]
        for k in self.student.params:
            self.optim.m[k] = new[f"optim/m/{k}"]
            self.optim.v[k] = new[f"optim/v/{k}"]
        self.optim.step_count = int(rec["optim/step"][0])
        self.iter = int(rec["iter"][0])
        self.bank.load_state({k[5:]: v for k, v in rec.items() if k.startswith("bank/")})


def _arch_text(net: SegNet) -> str:
    a = net.arch()
    dtype = next(iter(net.params.values())).data.dtype
    return (f"num_classes={a['num_classes']};feat_dim={a['feat_dim']};embed_dim={a['embed_dim']};"
            f"widths={','.join(map(str, a['widths']))};dtype={dtype.str}")


def load_inference_model(path) -> SegNet:
    """Student network from a checkpoint; projection-head records are optional."""
    rec = ckpt.read_records(path)
    if "arch" not in rec:
        raise ckpt.CheckpointError(f"{path}: no architecture record")
    fields = dict(kv.split("=") for kv in ckpt.record_text(rec["arch"]).split(";"))
    net = SegNet(int(fields["num_classes"]), int(fields["feat_dim"]), int(fields["embed_dim"]),
                 tuple(int(w) for w in fields["widths"].split(",")),
                 dtype=np.dtype(fields["dtype"]).type)
    for k, p in net.params.items():
        arr = rec.get(f"student/{k}")
        if arr is None:
            if k.startswith("head."):
                continue
            raise ckpt.CheckpointError(f"{path}: missing student/{k}")
        if arr.shape != p.shape:
            raise ckpt.CheckpointError(f"{path}: student/{k} has shape {arr.shape}, "
                                       f"expected {p.shape}")
        p.data = arr
    net.params = type(net.params)((k, p) for k, p in net.params.items()
                                  if not k.startswith("head.") or f"student/{k}" in rec)
    return net


def train_step_static(trainer: Trainer) -> LossReport:
    if trainer.cfg.scenario != "static":
        raise ValueError("train_step_static needs scenario=static")
    return trainer.step()


def train_step_video(trainer: Trainer) -> LossReport:
    if trainer.cfg.scenario != "video":
        raise ValueError("train_step_video needs scenario=video")
    return trainer.step()


def format_metrics(it: int, rep: LossReport) -> str:
    vals = [rep.counts.get("lr", 0.0)] + rep.row()
    return ",".join([str(it)] + [repr(float(v)) for v in vals])


def run_training(run: RunConfig, data: Dataset, label_hook=None, progress=None) -> Trainer:
    """Drive a Trainer to ``total_iters``, writing metrics, eval blocks and checkpoints."""
    cfg = run.train
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text())
    run_text = run.train_text()
    prev = dc.get_default_dtype()
    dc.set_default_dtype(np.float64 if cfg.precision == 64 else np.float32)
    try:
        trainer = Trainer(cfg, data, label_hook)
        metrics = out / "metrics.csv"
        if run.resume:
            trainer.load(run.resume)
            _truncate_metrics(metrics, trainer.iter)
        else:
            metrics.write_text(METRICS_HEADER + "\n")
        with open(metrics, "a") as fh:
            stop = min(cfg.total_iters, run.stop_after or cfg.total_iters)
            while trainer.iter < stop:
                rep = trainer.step()
                it = trainer.iter
                if run.log_interval and (it % run.log_interval == 0 or it == cfg.total_iters):
                    fh.write(format_metrics(it, rep) + "\n")
                    fh.flush()
                if run.eval_interval and it % run.eval_interval == 0 and trainer.eval_samples:
                    fh.write("\n".join(trainer.evaluate().lines()) + "\n")
                if run.checkpoint_interval and it % run.checkpoint_interval == 0:
                    trainer.save(out / f"ckpt_{it:06d}.bin", run_text)
                if progress:
                    progress(it, rep)
            if trainer.eval_samples:
                report = trainer.evaluate()
                fh.write("\n".join(report.lines("final")) + "\n")
                write_eval_report(out / "eval.txt", report)
        trainer.save(run.checkpoint or out / "final.bin", run_text)
    finally:
        dc.set_default_dtype(prev)
    return trainer


def _truncate_metrics(path: Path, upto: int) -> None:
    """Drop metric rows and eval blocks past iteration ``upto`` (resume)."""
    if not path.exists():
        path.write_text(METRICS_HEADER + "\n")
        return
    kept = []
    cur = 0
    for line in path.read_text().splitlines():
        # the interrupted run's closing eval block is not part of the stream
        if line.startswith("# final"):
            continue
        if line.startswith("# eval iter="):
            cur = int(line.split()[2].split("=")[1])
        elif line and not line.startswith("#") and line != METRICS_HEADER:
            cur = int(line.split(",")[0])
        if cur <= upto or line == METRICS_HEADER:
            kept.append(line)
    path.write_text("\n".join(kept) + "\n")


def write_eval_report(path, report: EvalReport) -> None:
    lines = ["class,iou,tp,fp,fn"]
    for c, v in enumerate(report.iou):
        lines.append(f"{c},{v!r},{int(report.tp[c])},{int(report.fp[c])},{int(report.fn[c])}")
    lines.append(f"miou,{report.miou!r},,,")
    Path(path).write_text("\n".join(lines) + "\n")


def trainer_from_checkpoint(path, data: Dataset) -> Trainer:
    rec = ckpt.read_records(path)
    run = parse_config_text(ckpt.record_text(rec["config"]))
    trainer = Trainer(dataclasses.replace(run.train), data)
    trainer.load(path)
    return trainer
