"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` call for call; :mod:`invmm.kernels` picks the
compiled version when it imports.
"""
from __future__ import annotations

import numpy as np


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def mlp_forward(x, weights, biases):
    """Run the MLP; SiLU on every layer except the last.

    Returns ``(out, cache)`` where cache holds what :func:`mlp_backward` needs.
    """
    acts = [x]
    sigs = []
    pres = []
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w
        z += b
        if i < last:
            h, s = _silu(z)
            pres.append(z)
            sigs.append(s)
            acts.append(h)
        else:
            h = z
    return h, (acts, pres, sigs)


def mlp_backward(gout, weights, cache, need_params=True):
    """Gradients w.r.t. the input, each weight and each bias.

    With ``need_params`` false only the input gradient is computed and the
    parameter lists hold None.
    """
    acts, pres, sigs = cache
    gws = [None] * len(weights)
    gbs = [None] * len(weights)
    g = gout
    for i in range(len(weights) - 1, -1, -1):
        if need_params:
            gws[i] = acts[i].T @ g
            gbs[i] = g.sum(axis=0)
        g = g @ weights[i].T
        if i > 0:
            s = sigs[i - 1]
            z = pres[i - 1]
            g = g * (s * (1.0 + z * (1.0 - s)))
    return g, gws, gbs


def mlp_apply(x, weights, biases):
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w
        h += b
        if i < last:
            h = h / (1.0 + np.exp(-h))
    return h


def _eps(x, temb_row, cemb, weights, biases, out_a, out_b):
    b = x.shape[0]
    parts = [x, np.broadcast_to(temb_row, (b, temb_row.shape[0]))]
    if cemb is not None and cemb.shape[1]:
        parts.append(cemb)
    net = mlp_apply(np.concatenate(parts, axis=1), weights, biases)
    return out_a * x + out_b * net


def ddim_loop(x_T, weights, biases, temb, steps, ab_t, ab_prev, sigma, out_a, out_b,
              cemb_cond, cemb_null, cfg_scale, noise):
    """Deterministic (``sigma == 0``) or stochastic DDIM over a sub-schedule.

    ``steps`` are row indices into ``temb`` in sampling order (descending t);
    ``ab_t``/``ab_prev``/``sigma``/``out_a``/``out_b`` are per-step scalars.
    ``cemb_null`` is None for unconditional models.  ``noise`` has shape
    ``(len(steps), B, N)`` and is only read where ``sigma > 0``.
    """
    x = np.array(x_T, dtype=np.float64, copy=True)
    for i in range(len(steps)):
        row = temb[steps[i]]
        a, bb = out_a[i], out_b[i]
        if cemb_null is None:
            eps = _eps(x, row, cemb_cond, weights, biases, a, bb)
        elif cfg_scale == 1.0:
            eps = _eps(x, row, cemb_cond, weights, biases, a, bb)
        elif cfg_scale == 0.0:
            eps = _eps(x, row, cemb_null, weights, biases, a, bb)
        else:
            eu = _eps(x, row, cemb_null, weights, biases, a, bb)
            ec = _eps(x, row, cemb_cond, weights, biases, a, bb)
            eps = eu + cfg_scale * (ec - eu)
        at, ap, s = ab_t[i], ab_prev[i], sigma[i]
        x0 = (x - np.sqrt(1.0 - at) * eps) / np.sqrt(at)
        x = np.sqrt(ap) * x0 + np.sqrt(max(1.0 - ap - s * s, 0.0)) * eps
        if s > 0.0:
            x = x + s * noise[i]
    return x
