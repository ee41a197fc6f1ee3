"""Command-line entry point: gen-data, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, coerce_value, load_config
from .data import SceneConfig, gen_static_dataset, gen_video_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _scene(pairs) -> SceneConfig:
    base = SceneConfig()
    kw = {}
    names = {f.name for f in dataclasses.fields(SceneConfig)}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"scene override {item!r} is not key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in names:
            raise ConfigError(f"unknown scene key {k!r}")
        cur = getattr(base, k)
        if isinstance(cur, tuple):
            kw[k] = tuple(float(x) for x in v.split(","))
        else:
            kw[k] = coerce_value(k, v, cur)
    try:
        return SceneConfig(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_gen_data(args) -> int:
    scene = _scene(args.scene)
    if args.scenario == "static":
        ds = gen_static_dataset(scene, args.n_source, args.n_target, args.n_eval, args.seed)
    else:
        ds = gen_video_dataset(scene, args.n_clips, args.clip_len, args.seed, args.n_eval_clips)
    manifest = write_dataset(ds, args.out)
    counts = {}
    for s in ds.samples:
        key = f"{s.domain}/{s.split}"
        counts[key] = counts.get(key, 0) + 1
    summary = " ".join(f"{k}={v}" for k, v in counts.items())
    clips = ""
    if args.scenario == "video":
        clips = f" clips={len({(s.domain, s.split, s.clip_id) for s in ds.samples})}" \
                f" clip_len={args.clip_len}"
    print(f"wrote {len(ds.samples)} samples to {manifest.parent} ({summary}{clips})")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    for flag, key in (("data", "data_dir"), ("out", "out_dir"), ("resume", "resume")):
        if getattr(args, flag, None):
            overrides.append(f"{key}={getattr(args, flag)}")
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    from .engine.train import run_training

    run = _run_config(args)
    data = read_dataset(run.data_dir)
    cfg = run.train

    def progress(it, rep):
        if run.log_interval and it % run.log_interval == 0 and not args.quiet:
            print(f"iter {it}/{cfg.total_iters} total={rep.total:.4f} ce_s={rep.ce_source:.4f} "
                  f"ce_t={rep.ce_target:.4f} pixel={rep.pixel:.4f} patch={rep.patch:.4f} "
                  f"temporal={rep.temporal:.4f}", flush=True)

    trainer = run_training(run, data, progress=progress)
    out = Path(run.out_dir)
    if trainer.eval_samples:
        rep = trainer.evaluate()
        print(f"final mIoU {100 * rep.miou:.2f} at iter {trainer.iter}")
    print(f"metrics: {out / 'metrics.csv'}  checkpoint: {run.checkpoint or out / 'final.bin'}")
    return EXIT_OK


def format_eval(report, names=None) -> str:
    lines = []
    for c, v in enumerate(report.iou):
        name = names[c] if names else f"class {c}"
        lines.append(f"{name:<10} IoU {'   n/a' if v != v else f'{100 * v:6.2f}'}")
    lines.append(f"{'mIoU':<10}     {100 * report.miou:6.2f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    from .engine.metrics import evaluate
    from .engine.train import load_inference_model, write_eval_report

    net = load_inference_model(args.checkpoint)
    ds = read_dataset(args.data)
    samples = ds.select("target", args.split)
    if not samples:
        raise ValueError(f"{args.data}: no target samples in split {args.split!r}")
    report = evaluate(net, samples, net.num_classes)
    print(format_eval(report))
    out = Path(args.out) if args.out else Path(str(args.checkpoint) + ".eval.csv")
    write_eval_report(out, report)
    print(f"report: {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    def show(r):
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:<24} max rel err {r.max_rel_error:.2e}  ({r.seconds:.2f}s)"
              + (f"  {r.message}" if r.message else ""), flush=True)

    results = run_suite(tol=args.tol, eps=args.eps, seed=args.seed, progress=show)
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed in {total:.1f}s")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .engine.ablation import BENCH, DEFAULT_ARMS, describe_overrides, run_ablation

    if args.config:
        base = load_config(args.config, args.set or []).train
        if base.scenario != args.scenario:
            raise ConfigError(f"config scenario {base.scenario!r} != --scenario {args.scenario}")
    else:
        # the desk benchmark preset, then any overrides
        preset = [f"{k}={v}" for k, v in BENCH[args.scenario].items()]
        base = load_config(None, [f"scenario={args.scenario}"] + preset + list(args.set or [])).train
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    arms = [a.strip() for a in args.arms.split(",")] if args.arms else DEFAULT_ARMS[args.scenario]
    data = read_dataset(args.data)
    print(f"{args.scenario} ablation: arms={arms} seeds={seeds} base: {describe_overrides(base)}",
          flush=True)

    def show(arm, seed, miou, secs, cached):
        tag = " (cached)" if cached else ""
        print(f"  {arm:<20} seed {seed}: mIoU {100 * miou:6.2f}  {secs:6.1f}s{tag}", flush=True)

    res = run_ablation(base, data, seeds, arms, cache_dir=args.cache, progress=show)
    print(res.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(res.csv())
        (out / "ablation.txt").write_text(res.table() + "\n")
        print(f"results: {out / 'ablation.csv'}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pipa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic two-domain dataset")
    g.add_argument("--scenario", choices=("static", "video"), default="static")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n-source", type=int, default=200)
    g.add_argument("--n-target", type=int, default=200)
    g.add_argument("--n-eval", type=int, default=100)
    g.add_argument("--n-clips", type=int, default=24)
    g.add_argument("--clip-len", type=int, default=20)
    g.add_argument("--n-eval-clips", type=int, default=8)
    g.add_argument("--scene", action="append", metavar="KEY=VALUE",
                   help="override a scene generator setting (repeatable)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("config", nargs="?", help="config file (defaults apply when omitted)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override (repeatable)")
    t.add_argument("--data", help="dataset directory (same as --set data_dir=...)")
    t.add_argument("--out", help="output directory (same as --set out_dir=...)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class IoU and mIoU of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--split", default="eval")
    e.add_argument("--out", help="report file (default: <checkpoint>.eval.csv)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--eps", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="loss-toggle sweep over seeds")
    a.add_argument("--scenario", choices=("static", "video"), default="static")
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--arms", help="comma-separated arm names (default: the standard grid)")
    a.add_argument("--config", help="base config file (default: the desk benchmark preset)")
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.add_argument("--out", help="directory for ablation.csv and ablation.txt")
    a.add_argument("--cache", help="directory caching per-run results")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"pipa {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"pipa {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
