from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from invmm import _kernels_py, kernels
from invmm.diffusion import DenoiserConfig, DenoiserModel, ddim_timesteps, make_schedule

compiled = kernels.compiled_module()
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _net(rng, widths=(7, 16, 16, 3)):
    ws = [rng.standard_normal((a, b)) * 0.5 for a, b in zip(widths[:-1], widths[1:])]
    bs = [rng.standard_normal(b) * 0.1 for b in widths[1:]]
    return ws, bs


@needs_compiled
def test_forward_backward_agree(rng):
    ws, bs = _net(rng)
    x = rng.standard_normal((9, 7))
    out_p, cache_p = _kernels_py.mlp_forward(x, ws, bs)
    out_c, cache_c = compiled.mlp_forward(x, ws, bs)
    np.testing.assert_allclose(out_c, out_p, rtol=1e-12, atol=1e-13)
    g = rng.standard_normal(out_p.shape)
    gp = _kernels_py.mlp_backward(g, ws, cache_p, True)
    gc = compiled.mlp_backward(g, ws, cache_c, True)
    np.testing.assert_allclose(gc[0], gp[0], rtol=1e-11, atol=1e-12)
    for a, b in zip(gc[1] + gc[2], gp[1] + gp[2]):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("impl", ["python", "compiled"])
def test_frozen_backward_returns_input_gradient_only(rng, impl):
    k = _kernels_py if impl == "python" else compiled
    if k is None:
        pytest.skip("compiled extension not built")
    ws, bs = _net(rng)
    x = rng.standard_normal((4, 7))
    out, cache = k.mlp_forward(x, ws, bs)
    g = np.ones_like(out)
    gx, gws, gbs = k.mlp_backward(g, ws, cache, False)
    full = k.mlp_backward(g, ws, k.mlp_forward(x, ws, bs)[1], True)
    np.testing.assert_allclose(gx, full[0], rtol=1e-12)
    assert all(v is None for v in gws) and all(v is None for v in gbs)


@needs_compiled
@pytest.mark.parametrize("eta", [0.0, 0.7])
def test_ddim_loop_agrees(rng, eta):
    model = DenoiserModel.init(DenoiserConfig(dim=4, hidden=16), make_schedule(100), seed=1)
    sched = model.schedule
    ts = ddim_timesteps(sched.T, 10)[::-1]
    prev = np.concatenate([ts[1:], [0]])
    ab_t, ab_p = sched.ab(ts), sched.ab(prev)
    sigma = eta * np.sqrt((1 - ab_p) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_p)
    x = rng.standard_normal((5, 4))
    noise = rng.standard_normal((len(ts), 5, 4))
    args = ([w.data for w in model.weights], [b.data for b in model.biases], model.temb, ts, ab_t, ab_p, sigma,
            model._out_a[ts], model._out_b[ts], None, None, 1.0, noise)
    np.testing.assert_allclose(compiled.ddim_loop(x, *args), _kernels_py.ddim_loop(x, *args), rtol=1e-10,
                               atol=1e-12)


def test_pure_python_switch():
    code = "from invmm import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, INVMM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
