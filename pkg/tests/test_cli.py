import filecmp
import time

import numpy as np
import pytest

from pipa.cli import format_eval, main
from pipa.data import read_dataset
from pipa.engine.metrics import confusion, iou_from_confusion

SMALL = ["--scene", "height=32", "--scene", "width=32", "--scene", "min_size=3",
         "--scene", "max_size=7"]
TINY_NET = ["--set", "widths=4,8,8", "--set", "feat_dim=8", "--set", "embed_dim=8",
            "--set", "crop=16", "--set", "patch_crop=16", "--set", "threshold=0.3",
            "--set", "warmup_iters=2", "--set", "lr=1e-3", "--set", "bank_capacity=16",
            "--set", "max_anchors_per_class=8", "--set", "negatives_per_anchor=16"]


@pytest.fixture(scope="module")
def small_static(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "static"
    assert main(["gen-data", "--out", str(out), "--n-source", "6", "--n-target", "6",
                 "--n-eval", "3"] + SMALL) == 0
    return out


def _dirs_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(
        _dirs_equal(a / d, b / d) for d in cmp.common_dirs)


def test_gen_data_is_deterministic(tmp_path, small_static):
    again = tmp_path / "again"
    assert main(["gen-data", "--out", str(again), "--n-source", "6", "--n-target", "6",
                 "--n-eval", "3"] + SMALL) == 0
    assert _dirs_equal(small_static, again)
    other = tmp_path / "other"
    main(["gen-data", "--out", str(other), "--seed", "1", "--n-source", "6", "--n-target",
          "6", "--n-eval", "3"] + SMALL)
    assert not _dirs_equal(small_static, other)


def test_gen_data_video_clip_length(tmp_path, capsys):
    out = tmp_path / "video"
    assert main(["gen-data", "--scenario", "video", "--out", str(out), "--n-clips", "2",
                 "--clip-len", "8", "--n-eval-clips", "1"] + SMALL) == 0
    assert "clip_len=8" in capsys.readouterr().out
    ds = read_dataset(out)
    for domain, split in (("source", "train"), ("target", "train"), ("target", "eval")):
        clips = ds.clips(domain, split)
        assert clips and all(len(c) == 8 for c in clips)
        assert all([f.frame_idx for f in c] == list(range(8)) for c in clips)


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    [],
    ["gen-data"],
    ["gen-data", "--out", "x", "--scenario", "audio"],
    ["gen-data", "--out", "x", "--scene", "hue_shfit=3"],
    ["train", "--set", "alpah=0.1"],
    ["train", "--set", "tau=-1"],
    ["ablate", "--data", "x", "--seeds", "a,b"],
])
def test_usage_and_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_runtime_errors_exit_1(tmp_path, small_static):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 1
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage" * 10)
    assert main(["eval", str(bad), str(small_static)]) == 1


def test_train_smoke_and_eval(tmp_path, small_static, capsys):
    out = tmp_path / "run"
    t0 = time.perf_counter()
    assert main(["train", "--data", str(small_static), "--out", str(out), "--quiet",
                 "--set", "total_iters=50", "--set", "eval_interval=25"] + TINY_NET) == 0
    assert time.perf_counter() - t0 < 60
    text = (out / "metrics.csv").read_text().splitlines()
    assert text[0] == "iter,lr,ce_s,ce_t,pixel,patch,temporal,total"
    rows = [r for r in text if r and not r.startswith("#")][1:]
    assert [int(r.split(",")[0]) for r in rows] == list(range(10, 51, 10))
    assert any(r.startswith("# eval iter=25") for r in text)
    assert text[-1].startswith("# final") or any(r.startswith("# final") for r in text)
    assert (out / "config.txt").read_text().count("total_iters = 50") == 1
    capsys.readouterr()

    assert main(["eval", str(out / "final.bin"), str(small_static)]) == 0
    shown = capsys.readouterr().out
    assert "mIoU" in shown
    report = (out / "final.bin.eval.csv").read_text()
    assert report == (out / "eval.txt").read_text()


def test_resume_reproduces_metrics(tmp_path, small_static):
    common = ["--data", str(small_static), "--quiet", "--set", "total_iters=8",
              "--set", "log_interval=1", "--set", "eval_interval=4"] + TINY_NET
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", "--out", str(full)] + common) == 0
    assert main(["train", "--out", str(part), "--set", "stop_after=5",
                 "--set", f"checkpoint={part / 'mid.bin'}"] + common) == 0
    assert main(["train", "--out", str(part), "--resume", str(part / "mid.bin")] + common) == 0
    assert (part / "metrics.csv").read_text() == (full / "metrics.csv").read_text()
    assert (part / "final.bin").read_bytes() == (full / "final.bin").read_bytes()


def test_weights_zero_gives_baseline(tmp_path, small_static):
    common = ["--data", str(small_static), "--quiet", "--set", "total_iters=4"] + TINY_NET
    assert main(["train", "--out", str(tmp_path / "a"), "--set", "alpha=0",
                 "--set", "beta=0"] + common) == 0
    for line in (tmp_path / "a" / "metrics.csv").read_text().splitlines()[1:]:
        if line and not line.startswith("#"):
            it, lr, ce_s, ce_t, pixel, patch, temporal, total = line.split(",")
            assert float(pixel) == float(patch) == float(temporal) == 0.0


def test_format_eval_golden():
    gt = np.array([[0, 0, 1, 1], [2, 2, 2, 255]])
    pred = np.array([[0, 1, 1, 1], [2, 2, 0, 3]])
    rep = iou_from_confusion(confusion(pred, gt, 5))
    assert format_eval(rep) == (
        "class 0    IoU  33.33\n"
        "class 1    IoU  66.67\n"
        "class 2    IoU  66.67\n"
        "class 3    IoU    n/a\n"
        "class 4    IoU    n/a\n"
        "mIoU            55.56")


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "all" in out and "checks passed" in out and "FAIL" not in out


def test_gradcheck_reports_failure(capsys):
    # an impossible tolerance must fail loudly
    assert main(["gradcheck", "--tol", "0"]) == 1
    assert "checks failed" in capsys.readouterr().out


def test_ablate_table_shape(tmp_path, small_static, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(small_static), "--seeds", "0,1,2", "--out", str(out),
                 "--set", "total_iters=3", "--set", "precision=64"] + TINY_NET) == 0
    table = (out / "ablation.txt").read_text().splitlines()
    assert table[0].split() == ["arm", "seed0", "seed1", "seed2", "mean"]
    assert [r.split()[0] for r in table[1:]] == ["baseline", "+pixel", "+patch", "+pixel+patch"]
    assert all(len(r.split()) == 5 for r in table[1:])
    csv = (out / "ablation.csv").read_text().splitlines()
    assert csv[0] == "arm,seed,miou" and len(csv) == 13


def test_default_config_smoke_under_a_minute(tmp_path):
    data = tmp_path / "d"
    assert main(["gen-data", "--out", str(data), "--n-source", "4", "--n-target", "4",
                 "--n-eval", "2"]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "r"), "--quiet",
                 "--set", "total_iters=50"]) == 0
    assert time.perf_counter() - t0 < 60
