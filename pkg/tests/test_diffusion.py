from __future__ import annotations

import math

import numpy as np
import pytest

from invmm import ndtensor as nt
from invmm.datasets import make_gauss2d, make_shapes8x8
from invmm.diffusion import (DenoiserConfig, DenoiserModel, SamplerConfig, TrainConfig, cfg_predict, ddim_sample,
                             ddim_timesteps, ddpm_sample, eps_loss, forward_diffuse, make_schedule, train_denoiser,
                             x0_loss, x0_weights)
from invmm.errors import ConfigError, ContractError, TrainingError
from invmm.ndtensor import Tensor
from invmm.replication import ReplicationJudge, calibrate_beta

# frozen: product over i of (1 - linspace(1e-4, 0.02, 1000)[i]) in pure Python
ALPHA_BAR_1000 = 4.0358297653756754e-05
# measured 0.0754 for one image x64, batch 8, 200 epochs; 0.05 needs about 1000 epochs
MEMORIZE_EMA_CEILING = 0.08


def test_alpha_bar_product():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bars[-1] == pytest.approx(ALPHA_BAR_1000, rel=1e-12)
    assert s.alpha_bars[-1] < 1e-3
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(s.alphas), rtol=0, atol=1e-12)


def test_schedule_properties():
    s = make_schedule(2, 0.01, 0.01 + 1e-9)
    assert s.alphas[0] == pytest.approx(s.alphas[1])
    s = make_schedule(50, 1e-3, 0.05)
    assert np.all(np.diff(s.alpha_bars) < 0)
    with pytest.raises(ConfigError):
        make_schedule(1)
    with pytest.raises(ConfigError):
        make_schedule(10, 0.02, 0.01)


class _FakeSchedule:
    def __init__(self, ab):
        self._ab = ab
        self.T = 1

    def ab(self, t):
        return np.full(np.shape(t), self._ab)


def test_forward_diffuse_cases():
    s = make_schedule(1000)
    x0, eps = np.array([[2.0]]), np.array([[1.0]])
    out = forward_diffuse(x0, 1, eps, _FakeSchedule(0.25))
    assert out[0, 0] == pytest.approx(0.5 * 2 + math.sqrt(0.75), abs=1e-12)
    assert out[0, 0] == pytest.approx(1.8660, abs=1e-4)
    np.testing.assert_allclose(forward_diffuse(x0, 1, eps, _FakeSchedule(1.0)), x0)
    np.testing.assert_allclose(forward_diffuse(x0, 1, eps, _FakeSchedule(0.0)), eps)
    with pytest.raises(ContractError):
        forward_diffuse(x0, 0, eps, s)
    with pytest.raises(ContractError):
        forward_diffuse(x0, 1, np.zeros((1, 2)), s)


def test_forward_diffuse_superposition(rng):
    s = make_schedule(1000)
    for t in (1, 250, 1000):
        x1, x2, e1, e2 = rng.standard_normal((4, 3, 5))
        a, b = rng.standard_normal(2)
        lhs = forward_diffuse(a * x1 + b * x2, t, a * e1 + b * e2, s)
        rhs = a * forward_diffuse(x1, t, e1, s) + b * forward_diffuse(x2, t, e2, s)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class _Perfect:
    """Model stub whose prediction is supplied per test."""

    def __init__(self, schedule, fn):
        self.schedule = schedule
        self.fn = fn

    def eps(self, x_t, t, cond=None):
        return Tensor(self.fn(x_t.data if isinstance(x_t, Tensor) else x_t, t))


def test_eps_loss_examples():
    s = make_schedule(100)
    eps = np.array([[1.0, 1.0]])
    zero = _Perfect(s, lambda x, t: np.zeros_like(x))
    assert eps_loss(zero, np.zeros((1, 2)), eps, 5).item() == pytest.approx(1.0)
    # x0 = 0 makes x_t = sqrt(1-ab) eps, so the exact noise is recoverable
    perfect = _Perfect(s, lambda x, t: x / np.sqrt(1 - s.ab(t)))
    assert eps_loss(perfect, np.zeros((1, 2)), eps, 5).item() == pytest.approx(0.0, abs=1e-20)
    assert x0_loss(perfect, np.zeros((1, 2)), eps, 5).item() == pytest.approx(0.0, abs=1e-20)


def test_x0_loss_weights():
    s = make_schedule(1000)
    t_half = int(np.argmin(np.abs(s.alpha_bars - 0.5))) + 1
    t_quarter = int(np.argmin(np.abs(s.alpha_bars - 0.25))) + 1
    for t in (t_half, t_quarter):
        ab = s.ab(t)
        assert x0_weights(t, s)[()] == pytest.approx((1 - ab) / ab)
    model = DenoiserModel.init(DenoiserConfig(dim=3, hidden=8), s, seed=0)
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    for t, target in ((t_half, 0.5), (t_quarter, 0.25)):
        ratio = x0_loss(model, x0, eps, t).item() / eps_loss(model, x0, eps, t).item()
        ab = s.ab(t)
        assert ratio == pytest.approx((1 - ab) / ab, rel=1e-12)
        assert abs(ab - target) < 2e-3
    # exact analytic weights at the two named values
    assert (1 - 0.5) / 0.5 == 1.0 and (1 - 0.25) / 0.25 == 3.0


def test_random_init_loss_nonnegative_and_deterministic():
    s = make_schedule(100)
    m = DenoiserModel.init(DenoiserConfig(dim=4, hidden=8), s, seed=3)
    rng = np.random.default_rng(1)
    x0, eps, t = rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), rng.integers(1, 101, 5)
    v = eps_loss(m, x0, eps, t).item()
    assert v >= 0 and math.isfinite(v)
    assert eps_loss(m, x0, eps, t).item() == v


def test_single_image_200_epochs_loss_drops():
    ds = make_shapes8x8(4, 4, seed=5)
    s = make_schedule(1000)
    m = DenoiserModel.init(DenoiserConfig(dim=64), s, seed=0)
    _, hist = train_denoiser(np.repeat(ds.images[:1], 64, axis=0), s, TrainConfig(epochs=200, batch_size=8), m)
    assert hist.epochs_done == 200
    assert hist.ema_loss[-1] < MEMORIZE_EMA_CEILING
    assert hist.ema_loss[-1] < 0.5 * hist.epoch_loss[0]


def test_memorized_fixture_loss(memorized):
    _, _, hist = memorized
    assert hist.ema_loss[-1] < 0.05


def test_zero_epochs_is_identity():
    s = make_schedule(100)
    m = DenoiserModel.init(DenoiserConfig(dim=4, hidden=8), s, seed=0)
    before = {k: v.data.copy() for k, v in m.params.items()}
    m, h = train_denoiser(np.zeros((3, 4)), s, TrainConfig(epochs=0), m)
    assert h.epochs_done == 0
    for k, v in m.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def _train_small(seed=0, epochs=5):
    s = make_schedule(100)
    m = DenoiserModel.init(DenoiserConfig(dim=2, hidden=16), s, seed=seed)
    g = make_gauss2d(32, seed=0)
    return train_denoiser(g.images, s, TrainConfig(epochs=epochs, batch_size=8, seed=seed), m)


def test_training_deterministic():
    a, _ = _train_small()
    b, _ = _train_small()
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_training_resume_matches_uninterrupted():
    s = make_schedule(100)
    g = make_gauss2d(32, seed=0)

    def fresh():
        return DenoiserModel.init(DenoiserConfig(dim=2, hidden=16), s, seed=0)

    cfg = dict(batch_size=8, lr_schedule="constant")
    full, hf = train_denoiser(g.images, s, TrainConfig(epochs=6, **cfg), fresh())
    part, hp = train_denoiser(g.images, s, TrainConfig(epochs=3, **cfg), fresh())
    part, hp = train_denoiser(g.images, s, TrainConfig(epochs=6, **cfg), part, history=hp)
    assert hp.epochs_done == 6
    assert hp.epoch_loss == hf.epoch_loss
    assert hp.ema_loss == hf.ema_loss
    for k in full.params:
        np.testing.assert_array_equal(part.params[k].data, full.params[k].data)


def test_training_non_finite_raises():
    s = make_schedule(100)
    m = DenoiserModel.init(DenoiserConfig(dim=2, hidden=8), s, seed=0)
    with pytest.raises(TrainingError):
        train_denoiser(np.array([[np.inf, 0.0]]), s, TrainConfig(epochs=1), m)


def _cond_model():
    s = make_schedule(50)
    return DenoiserModel.init(DenoiserConfig(dim=3, hidden=8, n_conditions=4), s, seed=2)


def test_cfg_identities():
    m = _cond_model()
    rng = np.random.default_rng(0)
    x, t = rng.standard_normal((5, 3)), 7
    cond = np.array([0, 1, 2, 0, 1])
    np.testing.assert_allclose(cfg_predict(m, x, t, cond, 1.0), m.eps_numpy(x, t, cond), atol=1e-14)
    np.testing.assert_allclose(cfg_predict(m, x, t, cond, 0.0), m.eps_numpy(x, t, None), atol=1e-14)
    null = np.full(5, m.null_id)
    for scale in (0.0, 2.5, 7.0):
        np.testing.assert_allclose(cfg_predict(m, x, t, null, scale), m.eps_numpy(x, t, None), atol=1e-14)


def test_cfg_affine_in_scale(rng):
    m = _cond_model()
    x, cond = rng.standard_normal((4, 3)), np.array([0, 1, 2, 1])
    for s1, s2 in ((0.5, 3.0), (1.0, 7.0)):
        for w in (0.0, 0.3, 1.0):
            mixed = cfg_predict(m, x, 11, cond, w * s1 + (1 - w) * s2)
            blend = w * cfg_predict(m, x, 11, cond, s1) + (1 - w) * cfg_predict(m, x, 11, cond, s2)
            np.testing.assert_allclose(mixed, blend, atol=1e-12)


def test_eps_numpy_matches_graph_prediction():
    m = _cond_model()
    rng = np.random.default_rng(4)
    x, t = rng.standard_normal((6, 3)), rng.integers(1, 51, 6)
    c = np.array([0, 1, 2, 3, 0, 1])
    np.testing.assert_allclose(m.eps(x, t, c).data, m.eps_numpy(x, t, c), rtol=1e-12, atol=1e-13)


def test_ddim_deterministic():
    m = _cond_model()
    z = np.random.default_rng(0).standard_normal((4, 3))
    a = ddim_sample(m, z, SamplerConfig(ddim_steps=10), cond=1)
    b = ddim_sample(m, z, SamplerConfig(ddim_steps=10), cond=1)
    assert np.array_equal(a, b)


def test_ddim_timesteps_end_at_T():
    ts = ddim_timesteps(1000, 50)
    assert ts[-1] == 1000 and np.all(np.diff(ts) > 0) and len(ts) == 50


def test_sampler_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(ddim_steps=0).validate(10)
    with pytest.raises(ConfigError):
        SamplerConfig(eta=1.5).validate(10)


def test_ddim_full_steps_eta1_matches_ddpm_in_distribution():
    s = make_schedule(100)
    g = make_gauss2d(256, 4, seed=0)
    m = DenoiserModel.init(DenoiserConfig(dim=2, hidden=64), s, seed=0)
    m, _ = train_denoiser(g.images, s, TrainConfig(epochs=300, batch_size=64), m)
    z = np.random.default_rng(0).standard_normal((1000, 2))
    a = ddim_sample(m, z, SamplerConfig(ddim_steps=100, eta=1.0), rng=np.random.default_rng(1))
    b = ddpm_sample(m, z, np.random.default_rng(2))
    assert np.all(np.abs(a.mean(0) - b.mean(0)) < 0.1)
    assert np.all(np.abs(a.var(0) - b.var(0)) < 0.1)


def test_memorized_model_regenerates_its_image(memorized):
    model, ds, _ = memorized
    judge = ReplicationJudge(calibrate_beta(ds.images))
    z = np.random.default_rng(11).standard_normal((16, 64))
    gen = ddim_sample(model, z, SamplerConfig())
    assert judge.replicates(gen, ds.images[0]).all()


def test_unconditional_model_rejects_condition():
    m = DenoiserModel.init(DenoiserConfig(dim=2, hidden=4), make_schedule(10), seed=0)
    with pytest.raises(ContractError):
        m.eps(np.zeros((1, 2)), 1, cond=0)


def test_smoothed_condition_gradient_reaches_weights():
    m = _cond_model().frozen()
    w = Tensor(np.full((1, 4), 0.25), requires_grad=True)
    out = m.eps(np.ones((2, 3)), 3, cond=w)
    nt.backward(nt.sum(out))
    assert w.grad is not None and w.grad.shape == (1, 4)
