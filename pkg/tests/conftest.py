from __future__ import annotations

import re

import numpy as np
import pytest

from invmm.datasets import make_shapes8x8
from invmm.diffusion import DenoiserConfig, DenoiserModel, TrainConfig, make_schedule, train_denoiser


@pytest.fixture(scope="session")
def memorized():
    """Unconditional model trained only on image 0 (x64) of a 4-image set; 1-3 are unseen."""
    ds = make_shapes8x8(4, 4, seed=5)
    sched = make_schedule(1000)
    model = DenoiserModel.init(DenoiserConfig(dim=64), sched, seed=0)
    rows = np.repeat(ds.images[:1], 64, axis=0)
    model, hist = train_denoiser(rows, sched, TrainConfig(epochs=1000, batch_size=8), model)
    return model, ds, hist


@pytest.fixture(scope="session")
def untrained():
    return DenoiserModel.init(DenoiserConfig(dim=64, hidden=64), make_schedule(1000), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRIT = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRIT.search(getattr(rep, "nodeid", ""))
            if not m or rep.when != "call" and outcome != "error":
                continue
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((int(m.group(1)), "PASS" if outcome == "passed" else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
