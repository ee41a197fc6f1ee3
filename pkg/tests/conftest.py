import dataclasses

import numpy as np
import pytest

from pipa.config import TrainConfig
from pipa.data import SceneConfig, gen_static_dataset, gen_video_dataset

SMALL_SCENE = SceneConfig(height=32, width=32, min_size=3.0, max_size=7.0)


def small_config(**kw) -> TrainConfig:
    base = dict(total_iters=6, warmup_iters=2, lr=1e-3, crop=16, patch_crop=16, widths="4,8,8",
                feat_dim=8, embed_dim=8, max_anchors_per_class=8, negatives_per_anchor=16,
                bank_capacity=16, threshold=0.3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def static_data():
    return gen_static_dataset(SMALL_SCENE, 6, 6, 3, seed=0)


@pytest.fixture(scope="session")
def video_data():
    return gen_video_dataset(SMALL_SCENE, 3, 6, seed=0, n_eval_clips=1)


@pytest.fixture
def small_cfg():
    return small_config


def params_bytes(params):
    return {k: p.data.tobytes() for k, p in params.items()}


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


@pytest.fixture(autouse=True)
def _float64_default():
    from pipa import diffcore as dc
    prev = dc.get_default_dtype()
    dc.set_default_dtype(np.float64)
    yield
    dc.set_default_dtype(prev)


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped:
        return
    n, title = mark.args
    failed = rep.failed
    prev = _CRITERIA.get(n, (title, True, ""))
    detail = getattr(item, "criterion_detail", "")
    _CRITERIA[n] = (title, prev[1] and not failed, detail or prev[2])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a short measurement to the criterion line of the current test."""
    def set_detail(text):
        request.node.criterion_detail = text
    return set_detail
