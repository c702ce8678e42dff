"""Pixel-space replication judge and the nearest-neighbour generation test."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial.distance import pdist

from .diffusion import DenoiserModel, SamplerConfig, ddim_sample
from .errors import CalibrationError, ConfigError, ContractError


class NormalizationError(ContractError):
    """An image embeds to the zero vector and cannot be unit-normalised."""


@dataclass(frozen=True)
class ReplicationJudge:
    """Distance threshold on unit-normalised (optionally projected) images.

    ``mode="raw"`` uses the flattened pixels; ``mode="projection"`` first maps
    them through a fixed Gaussian matrix (seeded by ``proj_seed``) to
    ``proj_dim`` dimensions.
    """

    beta: float
    mode: str = "raw"
    proj_dim: int = 32
    proj_seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("replication threshold beta must be > 0")
        if self.mode not in ("raw", "projection"):
            raise ConfigError(f"unknown embed mode {self.mode!r}")

    def _projection(self, dim: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_proj_cache", {})
        if dim not in cache:
            rng = np.random.default_rng([self.proj_seed, dim])
            cache[dim] = rng.standard_normal((dim, self.proj_dim)) / np.sqrt(self.proj_dim)
        return cache[dim]

    def embed(self, x) -> np.ndarray:
        """Embeddings of one image (1-d input) or a batch (2-d input)."""
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        arr = arr.reshape(1, -1) if single else arr.reshape(arr.shape[0], -1)
        if self.mode == "projection":
            arr = arr @ self._projection(arr.shape[1])
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise NormalizationError("cannot normalise an all-zero embedding")
        out = arr / norms
        return out[0] if single else out

    def distances(self, generated, target) -> np.ndarray:
        g = np.atleast_2d(self.embed(generated))
        t = self.embed(np.asarray(target).reshape(-1))
        return np.linalg.norm(g - t, axis=1)

    def replicates(self, generated, target) -> np.ndarray:
        """Boolean per generated row: distance to ``target`` <= beta."""
        return self.distances(generated, target) <= self.beta


def embed_image(x, judge: ReplicationJudge) -> np.ndarray:
    return judge.embed(x)


def is_replication(generated, target, judge: ReplicationJudge) -> bool:
    generated = np.asarray(generated, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if generated.shape != target.shape:
        raise ContractError("generated and target images differ in shape")
    return bool(judge.replicates(generated, target)[0])


def pairwise_distances(images, judge: ReplicationJudge) -> np.ndarray:
    """Condensed (pdist order) embedding distances; identical rows give exactly 0."""
    return pdist(judge.embed(np.atleast_2d(images)))


def calibrate_beta(images, judge: ReplicationJudge | None = None, percentile: float = 0.0,
                   scale: float = 0.6) -> float:
    """Threshold from the spread of distinct training images.

    ``beta = scale * percentile(distances between distinct images)``.
    Exact duplicates (distance 0) are dropped from the pool.  The default,
    0.6 of the closest distinct pair, means no two distinct training images
    judge each other as replications.
    """
    judge = judge or ReplicationJudge(beta=1.0)
    imgs = np.atleast_2d(np.asarray(images, dtype=np.float64))
    if len(imgs) < 2:
        raise CalibrationError("need at least two images")
    pool = pairwise_distances(imgs, judge)
    pool = pool[pool > 1e-12]
    if pool.size == 0:
        raise CalibrationError("all images are identical")
    if not 0.0 <= percentile <= 100.0 or scale <= 0:
        raise ConfigError("percentile must be in [0, 100] and scale > 0")
    beta = float(scale * np.percentile(pool, percentile))
    if pool.size < 3 or beta >= np.sqrt(2.0):
        warnings.warn(f"degenerate calibration set ({pool.size} distinct pairs, beta={beta:.3f})",
                      RuntimeWarning, stacklevel=2)
    return beta


@dataclass
class NNResult:
    """Outcome of the nearest-neighbour test."""

    hit_counts: dict[int, int] = field(default_factory=dict)
    first_hit: dict[int, int] = field(default_factory=dict)
    n_samples: int = 0

    @cached_property
    def ids(self) -> set[int]:
        return {i for i, c in self.hit_counts.items() if c > 0}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "hit_count", "first_hit_sample_index"])
            for i in sorted(self.ids):
                w.writerow([i, self.hit_counts[i], self.first_hit[i]])


def nearest_neighbor_test(model: DenoiserModel, images, n_samples: int, judge: ReplicationJudge,
                          sampler: SamplerConfig, rng: np.random.Generator, labels=None,
                          cond_mode: str = "uniform", chunk: int = 250) -> NNResult:
    """Generate ``n_samples`` images from N(0, I) and record which training
    images they replicate.

    For conditional models the class of each sample is drawn uniformly over
    classes (``cond_mode="uniform"``) or with training frequencies
    (``"frequency"``, using ``labels`` of the training rows).
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    imgs = np.atleast_2d(np.asarray(images, dtype=np.float64))
    emb = judge.embed(imgs)
    result = NNResult(n_samples=n_samples)
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        noise = rng.standard_normal((b, model.config.dim))
        cond = None
        if model.config.conditional:
            n_cls = model.config.n_conditions - 1
            if cond_mode == "uniform":
                cond = rng.integers(n_cls, size=b)
            elif cond_mode == "frequency":
                if labels is None:
                    raise ContractError("frequency mode needs training labels")
                cond = rng.choice(np.asarray(labels), size=b)
            else:
                raise ConfigError(f"unknown cond_mode {cond_mode!r}")
        gen = ddim_sample(model, noise, sampler, cond=cond, rng=rng)
        ge = judge.embed(gen)
        d2 = np.clip(2.0 - 2.0 * ge @ emb.T, 0.0, None)
        hits = np.sqrt(d2) <= judge.beta
        for s, i in zip(*np.nonzero(hits)):
            i = int(i)
            result.hit_counts[i] = result.hit_counts.get(i, 0) + 1
            result.first_hit.setdefault(i, done + int(s))
        done += b
    return result
