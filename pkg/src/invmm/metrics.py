"""Detection metrics, set collation and the training-loss membership baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .diffusion import LOSSES, DenoiserModel
from .errors import ContractError, MetricError
from .ndtensor import no_grad

NOT_APPLICABLE = "N/A(0)"


@dataclass
class ScoredSet:
    """Parallel arrays of ids, scores (may be +inf) and boolean labels."""

    ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if not (len(self.ids) == len(self.scores) == len(self.labels)):
            raise ContractError("ids, scores and labels must have equal length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ContractError("ids must be unique")
        if np.any(np.isnan(self.scores)):
            raise ContractError("scores must not be NaN")

    @classmethod
    def from_pairs(cls, entries) -> ScoredSet:
        ids, scores, labels = zip(*entries)
        return cls(np.array(ids), np.array(scores, dtype=np.float64), np.array(labels, dtype=bool))

    def _oriented(self, lower_is_positive: bool) -> np.ndarray:
        if self.labels.all() or not self.labels.any():
            raise MetricError("ranking metrics need at least one positive and one negative")
        # higher oriented value = more positive; +inf under "lower" becomes -inf (least memorised)
        return -self.scores if lower_is_positive else self.scores


def auc(scored: ScoredSet, lower_is_positive: bool = True) -> float:
    """Probability that a random positive outranks a random negative (ties 1/2)."""
    s = scored._oriented(lower_is_positive)
    ranks = rankdata(s)  # average ranks handle ties, including tied infinities
    pos = scored.labels
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def tpr_at_fpr(scored: ScoredSet, fpr_budget: float = 0.01, lower_is_positive: bool = True) -> float:
    """Best TPR over thresholds ``oriented >= thr`` whose FPR stays within budget."""
    if not 0.0 < fpr_budget <= 1.0:
        raise ContractError("fpr_budget must lie in (0, 1]")
    s = scored._oriented(lower_is_positive)
    pos = scored.labels
    n_pos, n_neg = pos.sum(), (~pos).sum()
    best = 0.0
    for thr in np.unique(s):
        sel = s >= thr
        fpr = (sel & ~pos).sum() / n_neg
        if fpr <= fpr_budget + 1e-12:
            best = max(best, (sel & pos).sum() / n_pos)
    return float(best)


def lowest_ids(scores: dict[int, float], k: int) -> set[int]:
    """The ``k`` ids with the lowest scores; ties broken by smaller id."""
    order = sorted(scores, key=lambda i: (scores[i], i))
    return set(order[:k])


def iou_collation(scores: dict[int, float], s_nn) -> float | str:
    """IoU of the |S_nn| lowest-scoring ids with S_nn, or ``NOT_APPLICABLE``."""
    s_nn = {int(i) for i in s_nn}
    if not s_nn:
        return NOT_APPLICABLE
    s_inv = lowest_ids(scores, len(s_nn))
    return len(s_inv & s_nn) / len(s_inv | s_nn)


@dataclass(frozen=True)
class LossEstimatorConfig:
    n_noise: int = 16
    n_timesteps: int = 50
    loss_mode: str = "eps"
    seed: int = 0


def loss_mi_baseline(model: DenoiserModel, images, config: LossEstimatorConfig = LossEstimatorConfig(),
                     cond=None) -> np.ndarray:
    """Average denoising loss per image under N(0, I) noise (lower = more member-like).

    Every image sees the same noise/timestep panel, so scores are paired.
    """
    if config.loss_mode not in LOSSES:
        raise ContractError(f"unknown loss mode {config.loss_mode!r}")
    imgs = np.atleast_2d(np.asarray(images, dtype=np.float64))
    rng = np.random.default_rng([config.seed, 3])
    eps = rng.standard_normal((config.n_noise, imgs.shape[1]))
    ts = rng.integers(1, model.schedule.T + 1, size=config.n_timesteps)
    t_rows = np.repeat(ts, config.n_noise)
    e_rows = np.tile(eps, (config.n_timesteps, 1))
    frozen = model.frozen()
    out = np.empty(len(imgs))
    with no_grad():
        for k, x in enumerate(imgs):
            x_rows = np.broadcast_to(x, e_rows.shape)
            out[k] = LOSSES[config.loss_mode](frozen, x_rows, e_rows, t_rows, cond).item()
    return out


def median_score(scores) -> float:
    """Median with +inf allowed (an infinite middle element gives +inf)."""
    s = np.asarray(scores, dtype=np.float64)
    return float(np.median(s)) if s.size else math.nan


def median_finite(scores) -> float:
    """Median over finite scores only; +inf when none is finite."""
    s = np.asarray(scores, dtype=np.float64)
    s = s[np.isfinite(s)]
    return float(np.median(s)) if s.size else math.inf
