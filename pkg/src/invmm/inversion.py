"""Sensitive-noise inversion with adaptive KL weighting.

The score of an image is the smallest per-dimension KL divergence to N(0, I)
of a Gaussian noise distribution whose samples all regenerate the image.  The
KL weight follows an additive-increase / multiplicative-decrease schedule:
it grows by ``increment`` every step and is halved at a cycle boundary when
the denoising error has stopped improving.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import ndtensor as nt
from .diffusion import LOSSES, DenoiserModel, SamplerConfig, ddim_sample
from .errors import ConfigError, ContractError, InversionError
from .ndtensor import Tensor
from .replication import ReplicationJudge

EVENTS = ("none", "halve", "cycle", "earlystop")


@dataclass
class NoiseDistribution:
    """Diagonal Gaussian N(mu, exp(log_var)) over the N-dim noise space."""

    mu: Tensor
    log_var: Tensor

    @classmethod
    def standard(cls, n: int) -> NoiseDistribution:
        return cls(Tensor(np.zeros(n), requires_grad=True, name="mu"),
                   Tensor(np.zeros(n), requires_grad=True, name="log_var"))

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape or self.mu.ndim != 1:
            raise ContractError("mu and log_var must be 1-d of equal length")

    @property
    def N(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)

    def params(self) -> dict[str, Tensor]:
        return {"mu": self.mu, "log_var": self.log_var}


def kl_to_standard(dist: NoiseDistribution) -> Tensor:
    """(1/2N) * sum(mu^2 + sigma^2 - log sigma^2 - 1), differentiable.

    sigma^2 - 1 - log sigma^2 is evaluated as expm1(lv) - lv, which stays >= 0
    in floating point.
    """
    terms = nt.add(nt.square(dist.mu), nt.sub(nt.expm1(dist.log_var), dist.log_var))
    return nt.mul(nt.mean(terms), 0.5)


def kl_value(mu, log_var) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    lv = np.asarray(log_var, dtype=np.float64)
    return float(0.5 * np.mean(mu * mu + (np.expm1(lv) - lv)))


def sample_noise(dist: NoiseDistribution, count: int, rng: np.random.Generator) -> Tensor:
    """``count`` reparameterised draws ``eps' * sigma + mu``, shape (count, N)."""
    if count < 1:
        raise ContractError("count must be >= 1")
    n = dist.N
    base = rng.standard_normal((count, n))
    sigma = nt.exp(nt.mul(dist.log_var, 0.5))
    shape = (count, n)
    return nt.add(nt.mul(Tensor(base), nt.broadcast_to(nt.reshape(sigma, (1, n)), shape)),
                  nt.broadcast_to(nt.reshape(dist.mu, (1, n)), shape))


@dataclass(frozen=True)
class InversionConfig:
    iterations: int = 2000
    cycle: int = 10
    increment: float = 1e-4
    threshold: float = 1e-3
    lr: float = 1e-1
    sensitivity_samples: int = 16
    batch_size: int = 16
    timestep_samples: int = 8
    loss_mode: str = "x0"
    seed: int = 0
    lambda_init: float = 1.0
    lambda_floor: float = 1e-8
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if min(self.iterations, self.cycle, self.sensitivity_samples, self.batch_size, self.timestep_samples) < 1:
            raise ConfigError("iterations, cycle, K, batch_size and timestep_samples must be >= 1")
        if self.cycle > self.iterations:
            raise ConfigError("cycle must not exceed iterations")
        if not (self.increment > 0 and self.threshold > 0 and self.lr > 0):
            raise ConfigError("increment, threshold and lr must be > 0")
        if self.loss_mode not in LOSSES:
            raise ConfigError(f"loss_mode must be one of {sorted(LOSSES)}")
        if self.lambda_init < 0 or self.lambda_floor < 0:
            raise ConfigError("lambda values must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRow:
    step: int
    lam: float
    l_de: float
    l_kl: float
    event: str = "none"


@dataclass
class InversionResult:
    score: float
    success: bool
    stop_step: int
    trace: list[TraceRow]
    sensitivity_fraction: float
    mu: np.ndarray | None = None
    log_var: np.ndarray | None = None

    def __post_init__(self):
        if self.success == math.isinf(self.score):
            raise ContractError("success must coincide with a finite score")

    @property
    def invertible(self) -> bool:
        return self.success

    def to_record(self) -> dict:
        return {"score": self.score if self.success else "inf", "success": self.success,
                "stop_step": self.stop_step, "sensitivity_fraction": self.sensitivity_fraction}

    def trace_to_csv(self, path) -> None:
        write_trace_csv(self.trace, path)


def write_trace_csv(trace: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lambda", "l_de", "l_kl", "event"])
        for r in trace:
            w.writerow([r.step, repr(r.lam), repr(r.l_de), repr(r.l_kl), r.event])


def lambda_update(lam: float, l_de_now: float, l_de_prev: float, at_boundary: bool, xi: float, delta: float,
                  floor: float = 1e-8) -> tuple[float, str]:
    """One AIMD step; returns the new weight and the event name."""
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    if at_boundary and (l_de_prev - l_de_now) < xi:
        return max(lam / 2.0, floor), "halve"
    return lam + delta, "cycle" if at_boundary else "none"


def _grid(x0: np.ndarray, eps: Tensor, t_draws: np.ndarray, cond):
    """Pair every noise draw with every timestep draw: rows = S * B."""
    b, n = eps.shape
    s = len(t_draws)
    eps_rows = nt.reshape(nt.broadcast_to(nt.reshape(eps, (1, b, n)), (s, b, n)), (s * b, n))
    x0_rows = np.broadcast_to(x0, (s * b, n))
    t_rows = np.repeat(t_draws, b)
    if isinstance(cond, Tensor) and cond.ndim == 3:
        m, v = cond.shape[1:]
        cond = nt.reshape(nt.broadcast_to(nt.reshape(cond, (1, b, m, v)), (s, b, m, v)), (s * b, m, v))
    elif cond is not None and not isinstance(cond, Tensor) and np.ndim(cond) == 1 and len(cond) == b:
        cond = np.tile(np.asarray(cond), s)
    return x0_rows, eps_rows, t_rows, cond


def denoising_error(model: DenoiserModel, x0, dist: NoiseDistribution, config: InversionConfig,
                    rng: np.random.Generator, cond_source: Callable | None = None, cond=None) -> Tensor:
    """Monte-Carlo l_de: ``batch_size`` noises from ``dist`` crossed with
    ``timestep_samples`` uniform timesteps.

    ``cond_source(rng, B)`` returns per-draw (smoothed) conditions; ``cond``
    is a fixed condition used when no source is given.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    if x0.shape[1] != dist.N:
        raise ContractError("x0 and noise distribution differ in dimension")
    eps = sample_noise(dist, config.batch_size, rng)
    t_draws = rng.integers(1, model.schedule.T + 1, size=config.timestep_samples)
    c = cond_source(rng, config.batch_size) if cond_source is not None else cond
    x0_rows, eps_rows, t_rows, c = _grid(x0, eps, t_draws, c)
    return LOSSES[config.loss_mode](model, x0_rows, eps_rows, t_rows, c)


def sensitivity_test(model: DenoiserModel, dist: NoiseDistribution, x0, judge: ReplicationJudge, K: int,
                     sampler: SamplerConfig, rng: np.random.Generator, cond_source: Callable | None = None,
                     cond=None, cfg_scales=None) -> tuple[float, bool]:
    """Fraction of K generations from ``dist`` that replicate ``x0``.

    With several ``cfg_scales`` a sample counts as replicated if any scale
    replicates it.
    """
    if K < 1:
        raise ContractError("K must be >= 1")
    noise = dist.mu.data + dist.sigma * rng.standard_normal((K, dist.N))
    c = cond_source(rng, K) if cond_source is not None else cond
    if isinstance(c, Tensor):
        c = c.data
    scales = [sampler.cfg_scale] if cfg_scales is None else list(cfg_scales)
    hit = np.zeros(K, dtype=bool)
    for s in scales:
        cfg = SamplerConfig(sampler.ddim_steps, sampler.eta, float(s), sampler.seed)
        gen = ddim_sample(model, noise, cfg, cond=c, rng=rng)
        hit |= judge.replicates(gen, x0)
        if hit.all():
            break
    return float(hit.mean()), bool(hit.all())


def _optimize(model: DenoiserModel, x0, config: InversionConfig, judge: ReplicationJudge, params: dict,
              dist: NoiseDistribution, adaptive: bool, lam: float, cond_source=None, cond=None,
              sens_cond_source=None, cfg_scales=None, extra_loss=None) -> InversionResult:
    """Shared loop for the adaptive, fixed-weight and joint inversions."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    opt = nt.Adam(params, lr=config.lr)
    rng_de = np.random.default_rng([config.seed, 1])
    rng_sens = np.random.default_rng([config.seed, 2])
    trace: list[TraceRow] = []
    prev = math.inf
    window: list[float] = []
    frac = 0.0
    success = False
    step = 0
    for step in range(1, config.iterations + 1):
        opt.zero_grad()
        l_de = denoising_error(model, x0, dist, config, rng_de, cond_source, cond)
        l_kl = kl_to_standard(dist)
        loss = nt.add(l_de, nt.mul(l_kl, lam))
        if extra_loss is not None:
            loss = nt.add(loss, extra_loss())
        row = TraceRow(step, lam, l_de.item(), l_kl.item())
        trace.append(row)
        if not math.isfinite(loss.item()):
            raise InversionError(f"non-finite inversion loss at step {step}", trace)
        nt.backward(loss)
        try:
            opt.step()
        except nt.NonFiniteGradientError as exc:
            raise InversionError(str(exc), trace) from exc
        window.append(row.l_de)
        boundary = step > 1 and step % config.cycle == 0
        if boundary:
            now = float(np.mean(window))
            window = []
            if adaptive:
                lam, row.event = lambda_update(lam, now, prev, True, config.threshold, config.increment,
                                               config.lambda_floor)
            else:
                row.event = "cycle"
            prev = now
            frac, success = sensitivity_test(model, dist, x0, judge, config.sensitivity_samples, config.sampler,
                                             rng_sens, sens_cond_source, cond, cfg_scales)
            if success:
                row.event = "earlystop"
                break
        elif adaptive:
            lam += config.increment
    score = kl_value(dist.mu.data, dist.log_var.data) if success else math.inf
    return InversionResult(score, success, step, trace, frac, dist.mu.data.copy(), dist.log_var.data.copy())


def invert(model: DenoiserModel, x0, config: InversionConfig, judge: ReplicationJudge,
           cond=None) -> InversionResult:
    """Adaptive-weight inversion of ``x0``; ``cond`` fixes the condition of a
    conditional model (default: the null condition)."""
    model = model.frozen()
    dist = NoiseDistribution.standard(model.config.dim)
    return _optimize(model, x0, config, judge, dist.params(), dist, True, config.lambda_init, cond=cond)


def fixed_lambda_invert(model: DenoiserModel, x0, config: InversionConfig, judge: ReplicationJudge,
                        lambda_fixed: float, cond=None) -> InversionResult:
    if lambda_fixed < 0:
        raise ConfigError("lambda_fixed must be >= 0")
    model = model.frozen()
    dist = NoiseDistribution.standard(model.config.dim)
    return _optimize(model, x0, config, judge, dist.params(), dist, False, float(lambda_fixed), cond=cond)
