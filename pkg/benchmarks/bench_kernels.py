"""Compiled vs numpy kernels on the shapes used by training and inversion.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with per-call times, the speedup and the max
absolute difference between the two backends.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from invmm import _kernels_py
from invmm.diffusion import DenoiserConfig, DenoiserModel, ddim_timesteps, make_schedule
from invmm.kernels import compiled_module


def _cases(model: DenoiserModel, batch: int):
    rng = np.random.default_rng(0)
    cfg = model.config
    w = [p.data for p in model.weights]
    b = [p.data for p in model.biases]
    x = rng.standard_normal((batch, cfg.input_dim))

    def fwd(k):
        return k.mlp_forward(x, w, b)[0]

    def bwd(k):
        out, cache = k.mlp_forward(x, w, b)
        g = np.ones_like(out)
        gx, gws, _ = k.mlp_backward(g, w, cache, True)
        return np.concatenate([gx.ravel()] + [gw.ravel() for gw in gws])

    def bwd_frozen(k):
        out, cache = k.mlp_forward(x, w, b)
        return k.mlp_backward(np.ones_like(out), w, cache, False)[0]

    sched = model.schedule
    ts = ddim_timesteps(sched.T, 50)[::-1]
    prev = np.concatenate([ts[1:], [0]])
    ab_t, ab_p = sched.ab(ts), sched.ab(prev)
    xt = rng.standard_normal((16, cfg.dim))

    def ddim(k):
        return k.ddim_loop(xt, w, b, model.temb, ts, ab_t, ab_p, np.zeros(len(ts)), model._out_a[ts],
                           model._out_b[ts], None, None, 1.0, None)

    return {"mlp_forward": fwd, "mlp_backward": bwd, "mlp_backward_frozen": bwd_frozen, "ddim_loop_50": ddim}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args(argv)
    compiled = compiled_module()
    model = DenoiserModel.init(DenoiserConfig(dim=64), make_schedule(1000), seed=0)
    cases = _cases(model, args.batch)
    print(f"{'kernel':<22}{'python ms':>12}{'cython ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, fn in cases.items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:<22}{t_py:>12.3f}{'n/a':>12}{'n/a':>10}{'n/a':>14}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(np.asarray(fn(_kernels_py)) - np.asarray(fn(compiled)))))
        print(f"{name:<22}{t_py:>12.3f}{t_cy:>12.3f}{t_py / t_cy:>9.2f}x{diff:>14.2e}")
    if compiled is None:
        print("compiled extension not built; only the numpy backend was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
