"""Joint inversion of the noise distribution and a categorical condition.

The condition at each of M positions is a categorical over the vocabulary of
class ids (null id included).  During optimisation it is relaxed with
Gumbel-Softmax samples whose weights mix the model's condition embeddings, so
gradients reach the logits.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from . import ndtensor as nt
from .diffusion import DenoiserModel
from .errors import ConfigError, ContractError
from .inversion import InversionConfig, InversionResult, NoiseDistribution, _optimize
from .ndtensor import DomainError, Tensor
from .replication import ReplicationJudge


@dataclass
class PromptDistribution:
    logits: Tensor  # (M, V)
    tau: float = 2.0

    def __post_init__(self):
        if self.logits.ndim != 2:
            raise ContractError("logits must be (M, V)")
        if not self.tau > 0:
            raise ConfigError("temperature must be > 0")

    @property
    def M(self) -> int:
        return self.logits.shape[0]

    @property
    def V(self) -> int:
        return self.logits.shape[1]

    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def entropy(self) -> np.ndarray:
        p = self.probs()
        return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)

    def to_csv(self, path) -> None:
        p = self.probs()
        h = self.entropy()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["position"] + [f"p{j}" for j in range(self.V)] + ["entropy"])
            for i in range(self.M):
                w.writerow([i] + [repr(float(v)) for v in p[i]] + [repr(float(h[i]))])


@dataclass
class SmoothedTokens:
    weights: Tensor  # (M, V) or (B, M, V)

    @property
    def one_hot(self) -> bool:
        w = self.weights.data
        return bool(np.all((w == 0.0) | (w == 1.0)))


def init_prompt_dist(M: int, V: int, tau: float = 2.0) -> PromptDistribution:
    if M < 1 or V < 1:
        raise ConfigError("M and V must be >= 1")
    return PromptDistribution(Tensor(np.zeros((M, V)), requires_grad=True, name="logits"), tau)


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.gumbel(size=shape)


def gumbel_softmax_sample(dist: PromptDistribution, rng: np.random.Generator,
                          count: int | None = None) -> SmoothedTokens:
    """Relaxed sample softmax((log pi + g) / tau); ``count`` stacks draws."""
    m, v = dist.M, dist.V
    logp = nt.log_softmax(dist.logits, axis=1)
    if count is None:
        z = nt.add(logp, Tensor(_gumbel(rng, (m, v))))
    else:
        logp = nt.broadcast_to(nt.reshape(logp, (1, m, v)), (count, m, v))
        z = nt.add(logp, Tensor(_gumbel(rng, (count, m, v))))
    return SmoothedTokens(nt.softmax(nt.mul(z, 1.0 / dist.tau), axis=-1))


def embed_smooth(tokens: SmoothedTokens | Tensor, table) -> Tensor:
    """Per-position convex combination of embedding-table rows."""
    w = tokens.weights if isinstance(tokens, SmoothedTokens) else tokens
    table = table if isinstance(table, Tensor) else Tensor(table)
    if w.shape[-1] != table.shape[0]:
        raise ContractError(f"token weights over {w.shape[-1]} ids but table has {table.shape[0]} rows")
    flat = nt.reshape(w, (-1, w.shape[-1])) if w.ndim != 2 else w
    out = nt.matmul(flat, table)
    return nt.reshape(out, (*w.shape[:-1], table.shape[1]))


def discretize(dist: PromptDistribution, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """Gumbel-argmax token ids (lowest index wins ties)."""
    shape = (dist.M, dist.V) if count is None else (count, dist.M, dist.V)
    logp = log_softmax(dist.logits.data, axis=1)
    return np.argmax(logp + _gumbel(rng, shape), axis=-1)


def condition_regularizer(dist: PromptDistribution, prior=None) -> Tensor:
    """Mean over positions of KL(softmax(logits) || prior); uniform prior by default."""
    v = dist.V
    prior = np.full(v, 1.0 / v) if prior is None else np.asarray(prior, dtype=np.float64)
    if prior.shape != (v,) or np.any(prior < 0) or not np.isclose(prior.sum(), 1.0):
        raise ContractError("prior must be a categorical over the vocabulary")
    if np.any(prior == 0.0):
        raise DomainError("prior assigns zero mass to an id the distribution can reach")
    logp = nt.log_softmax(dist.logits, axis=1)
    p = nt.exp(logp)
    log_prior = Tensor(np.broadcast_to(np.log(prior), (dist.M, v)).copy())
    return nt.mean(nt.sum(nt.mul(p, nt.sub(logp, log_prior)), axis=1))


@dataclass(frozen=True)
class PromptConfig:
    positions: int = 1
    tau: float = 2.0
    w_cr: float = 0.0
    cfg_scales: tuple[float, ...] = field(default_factory=lambda: tuple(float(s) for s in range(1, 8)))
    prior: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.w_cr < 0:
            raise ConfigError("w_cr must be >= 0")
        if not self.cfg_scales or min(self.cfg_scales) < 0:
            raise ConfigError("cfg_scales must be a non-empty list of values >= 0")


def joint_invert(model: DenoiserModel, x0, config: InversionConfig, prompt: PromptConfig,
                 judge: ReplicationJudge) -> tuple[InversionResult, PromptDistribution]:
    """Adaptive inversion over (noise distribution, condition distribution).

    The returned score is the noise-distribution KL only; the condition
    regulariser (weight ``w_cr``) shapes the search but is not scored.
    """
    if not model.config.conditional:
        raise ContractError("joint inversion needs a conditional model")
    if prompt.positions != model.config.cond_positions:
        raise ContractError("prompt positions must match the model's condition positions")
    model = model.frozen()
    dist = NoiseDistribution.standard(model.config.dim)
    pd = init_prompt_dist(prompt.positions, model.config.n_conditions, prompt.tau)
    params = {**dist.params(), "logits": pd.logits}

    def source(rng, count):
        return gumbel_softmax_sample(pd, rng, count).weights

    def sens_source(rng, count):
        with nt.no_grad():
            return gumbel_softmax_sample(pd, rng, count).weights.data

    extra = None
    if prompt.w_cr > 0:
        def extra():
            return nt.mul(condition_regularizer(pd, prompt.prior), prompt.w_cr)

    result = _optimize(model, x0, config, judge, params, dist, True, config.lambda_init, cond_source=source,
                       sens_cond_source=sens_source, cfg_scales=prompt.cfg_scales, extra_loss=extra)
    return result, pd
