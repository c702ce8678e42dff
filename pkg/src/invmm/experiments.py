"""Batch inversion and the duplication / epoch / weight-ablation drivers.

Every per-image job seeds its own generators from ``(base seed, image id)``,
so results do not depend on worker count or completion order.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import multiprocessing as mp
import numpy as np

from .checkpoint import load_checkpoint
from .diffusion import DenoiserModel, SamplerConfig
from .errors import ConfigError, ManifestError
from .inversion import InversionConfig, InversionResult, fixed_lambda_invert, invert
from .metrics import (NOT_APPLICABLE, LossEstimatorConfig, ScoredSet, auc, iou_collation, loss_mi_baseline,
                      median_finite, median_score, tpr_at_fpr)
from .promptinv import PromptConfig, PromptDistribution, joint_invert
from .replication import NNResult, ReplicationJudge, nearest_neighbor_test

FACTORS = ("duplication", "epoch", "lambda")


def job_seed(base_seed: int, image_id: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(image_id)]).generate_state(1)[0])


def parse_mode(mode: str) -> tuple[str, float | None]:
    """``adaptive`` | ``joint`` | ``fixed:<lambda>``."""
    if mode in ("adaptive", "joint"):
        return mode, None
    if mode.startswith("fixed:"):
        try:
            lam = float(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad fixed-weight mode {mode!r}") from None
        if lam < 0:
            raise ConfigError("fixed lambda must be >= 0")
        return "fixed", lam
    raise ConfigError(f"unknown inversion mode {mode!r}")


# --------------------------------------------------------------------------- batch inversion

_WORKER: dict = {}


def _init_worker(model, config, judge, mode, prompt):
    _WORKER.update(model=model, config=config, judge=judge, mode=mode, prompt=prompt)


def _run_job(image_id: int, x0, cond, base_seed: int):
    w = _WORKER
    return image_id, invert_one(w["model"], x0, w["config"], w["judge"], w["mode"], base_seed, image_id, cond,
                                w["prompt"])


def invert_one(model: DenoiserModel, x0, config: InversionConfig, judge: ReplicationJudge, mode: str,
               base_seed: int, image_id: int, cond=None, prompt: PromptConfig | None = None):
    kind, lam = parse_mode(mode)
    cfg = replace(config, seed=job_seed(base_seed, image_id))
    if kind == "adaptive":
        return invert(model, x0, cfg, judge, cond=cond), None
    if kind == "fixed":
        return fixed_lambda_invert(model, x0, cfg, judge, lam, cond=cond), None
    return joint_invert(model, x0, cfg, prompt or PromptConfig(), judge)


def invert_images(model: DenoiserModel, images: dict[int, np.ndarray], config: InversionConfig,
                  judge: ReplicationJudge, mode: str = "adaptive", base_seed: int = 0, workers: int = 1,
                  conds: dict[int, int] | None = None, prompt: PromptConfig | None = None
                  ) -> dict[int, tuple[InversionResult, PromptDistribution | None]]:
    """Invert every image; returns ``id -> (result, prompt distribution or None)``."""
    parse_mode(mode)
    conds = conds or {}
    ids = sorted(images)
    out = {}
    if workers <= 1 or len(ids) <= 1:
        for i in ids:
            out[i] = invert_one(model, images[i], config, judge, mode, base_seed, i, conds.get(i), prompt)
        return out
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(model, config, judge, mode, prompt)) as pool:
        futs = [pool.submit(_run_job, i, images[i], conds.get(i), base_seed) for i in ids]
        for f in futs:
            i, res = f.result()
            out[i] = res
    return dict(sorted(out.items()))


# --------------------------------------------------------------------------- tables


def fmt_float(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return repr(float(x))


@dataclass(frozen=True)
class ResultRow:
    cell: str
    image_id: int
    score: float
    success: bool
    stop_step: int


@dataclass(frozen=True)
class SummaryRow:
    cell: str
    median_score: float
    success_rate: float
    n: int


def result_rows(cell: str, results: dict) -> list[ResultRow]:
    rows = []
    for i, res in sorted(results.items()):
        r = res[0] if isinstance(res, tuple) else res
        rows.append(ResultRow(cell, int(i), r.score, r.success, r.stop_step))
    return rows


def write_results_csv(rows: list[ResultRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "image_id", "score", "success", "stop_step"])
        for r in rows:
            w.writerow([r.cell, r.image_id, fmt_float(r.score), int(r.success), r.stop_step])


def read_results_csv(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        return [ResultRow(d["cell"], int(d["image_id"]), float(d["score"]), d["success"] == "1",
                          int(d["stop_step"])) for d in csv.DictReader(fh)]


def summarize(rows: list[ResultRow]) -> list[SummaryRow]:
    cells: dict[str, list[ResultRow]] = {}
    for r in rows:
        cells.setdefault(r.cell, []).append(r)
    return [SummaryRow(c, median_score([r.score for r in rs]), float(np.mean([r.success for r in rs])), len(rs))
            for c, rs in cells.items()]


def write_summary_csv(summary: list[SummaryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "median_score", "success_rate", "n"])
        for s in summary:
            w.writerow([s.cell, fmt_float(s.median_score), fmt_float(s.success_rate), s.n])


def cell_scores(rows: list[ResultRow]) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r.cell, []).append(r.score)
    return out


# --------------------------------------------------------------------------- manifest + drivers


@dataclass
class ExperimentManifest:
    """Grid of cells, each resolving to one checkpoint and one inversion mode."""

    factor: str
    target_ids: list[int]
    cells: dict[str, str]
    modes: dict[str, str] = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.factor not in FACTORS:
            raise ManifestError(f"unknown factor {self.factor!r}")
        if not self.cells:
            raise ManifestError("manifest has no cells")

    def mode(self, cell: str) -> str:
        return self.modes.get(cell, "adaptive")

    def validate(self) -> None:
        for cell, path in self.cells.items():
            if not path or not Path(path).is_file():
                raise ManifestError(f"cell {cell!r} has no checkpoint at {path!r}")
            parse_mode(self.mode(cell))

    def to_dict(self) -> dict:
        return {"factor": self.factor, "target_ids": list(self.target_ids), "cells": dict(self.cells),
                "modes": dict(self.modes), "dataset": self.dataset}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentManifest:
        try:
            return cls(d["factor"], [int(i) for i in d["target_ids"]], dict(d["cells"]), dict(d.get("modes", {})),
                       d.get("dataset", {}))
        except KeyError as exc:
            raise ManifestError(f"manifest missing {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def run_grid(manifest: ExperimentManifest, images, config: InversionConfig, judge: ReplicationJudge,
             base_seed: int = 0, workers: int = 1, expected: str | None = None) -> list[ResultRow]:
    if expected is not None and manifest.factor != expected:
        raise ManifestError(f"manifest factor is {manifest.factor!r}, expected {expected!r}")
    manifest.validate()
    images = np.asarray(images)
    targets = {i: images[i] for i in manifest.target_ids}
    rows: list[ResultRow] = []
    models: dict[str, DenoiserModel] = {}
    for cell, path in manifest.cells.items():
        if path not in models:
            models[path] = load_checkpoint(path)[0]
        res = invert_images(models[path], targets, config, judge, manifest.mode(cell), base_seed, workers)
        rows += result_rows(cell, res)
    return rows


def run_duplication_experiment(manifest, images, config, judge, base_seed=0, workers=1) -> list[ResultRow]:
    return run_grid(manifest, images, config, judge, base_seed, workers, "duplication")


def run_epoch_experiment(manifest, images, config, judge, base_seed=0, workers=1) -> list[ResultRow]:
    return run_grid(manifest, images, config, judge, base_seed, workers, "epoch")


def run_lambda_ablation(manifest, images, config, judge, base_seed=0, workers=1) -> list[ResultRow]:
    return run_grid(manifest, images, config, judge, base_seed, workers, "lambda")


def lambda_ablation_summary(rows: list[ResultRow], adaptive="adaptive", zero="lambda0", one="lambda1") -> dict:
    """Success rates per mode and mean scores on images every mode inverted."""
    by = {c: {r.image_id: r for r in rows if r.cell == c} for c in (adaptive, zero, one)}
    rate = {c: float(np.mean([r.success for r in v.values()])) if v else math.nan for c, v in by.items()}
    joint = sorted(i for i in by[adaptive] if by[adaptive][i].success and i in by[zero] and by[zero][i].success)
    mean = {c: float(np.mean([by[c][i].score for i in joint])) if joint else math.nan for c in (adaptive, zero)}
    return {"success_rate": rate, "joint_ids": joint, "mean_score_joint": mean}


# --------------------------------------------------------------------------- audit


@dataclass
class AuditReport:
    scores: dict[int, float]
    positives: list[int]
    nn: NNResult
    metrics: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str]]:
        return [(k, fmt_float(v) if isinstance(v, float) else str(v)) for k, v in self.metrics.items()]


def _ranking(scores: dict[int, float], positives: set[int], lower: bool, fpr: float) -> tuple:
    ids = sorted(scores)
    labels = [i in positives for i in ids]
    if all(labels) or not any(labels):
        return NOT_APPLICABLE, NOT_APPLICABLE
    s = ScoredSet(np.array(ids), np.array([scores[i] for i in ids]), np.array(labels))
    return auc(s, lower), tpr_at_fpr(s, fpr, lower)


def run_audit(model: DenoiserModel, images, positives, config: InversionConfig, judge: ReplicationJudge,
              n_samples: int = 1000, sampler: SamplerConfig | None = None, base_seed: int = 0, workers: int = 1,
              fpr: float = 0.01, loss_config: LossEstimatorConfig | None = None, labels=None,
              cond_mode: str = "uniform", results: dict | None = None) -> AuditReport:
    """Nearest-neighbour test, InvMM for every image and the detection metrics.

    ``positives`` are the ids treated as memorised (duplicated) when ranking.
    ``results`` may supply precomputed inversions to skip that stage.
    """
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    sampler = sampler or config.sampler
    nn = nearest_neighbor_test(model, images, n_samples, judge, sampler, np.random.default_rng([base_seed, 11]),
                               labels=labels, cond_mode=cond_mode)
    if results is None:
        results = invert_images(model, dict(enumerate(images)), config, judge, "adaptive", base_seed, workers)
    scores = {i: (r[0] if isinstance(r, tuple) else r).score for i, r in results.items()}
    pos = {int(i) for i in positives}
    m: dict = {}
    m["n_images"] = len(images)
    m["n_positive"] = len(pos)
    m["s_nn_size"] = len(nn.ids)
    m["success_rate"] = float(np.mean([math.isfinite(s) for s in scores.values()]))
    m["median_score"] = median_score(list(scores.values()))
    m["median_finite_score"] = median_finite(list(scores.values()))
    m["invmm_auc"], m["invmm_tpr_at_fpr"] = _ranking(scores, pos, True, fpr)
    lc = loss_config or LossEstimatorConfig(seed=base_seed)
    for mode in ("eps", "x0"):
        loss = loss_mi_baseline(model, images, replace(lc, loss_mode=mode))
        m[f"{mode}_loss_auc"], m[f"{mode}_loss_tpr_at_fpr"] = _ranking(dict(enumerate(loss)), pos, True, fpr)
    m["iou"] = iou_collation(scores, nn.ids)
    return AuditReport(scores, sorted(pos), nn, m)


# --------------------------------------------------------------------------- membership vs memorisation


def run_membership_study(model: DenoiserModel, images, member_mask, config: InversionConfig,
                         judge: ReplicationJudge, base_seed: int = 0, workers: int = 1,
                         loss_config: LossEstimatorConfig | None = None, results: dict | None = None) -> dict:
    """Loss-based membership AUC next to InvMM score crossings.

    A holdout image "crosses" if its score is below the member median; a
    member crosses if its score is above the holdout median.
    """
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    member = np.asarray(member_mask, dtype=bool)
    loss = loss_mi_baseline(model, images, loss_config or LossEstimatorConfig(seed=base_seed))
    ids = np.arange(len(images))
    loss_auc = auc(ScoredSet(ids, loss, member), lower_is_positive=True)
    if results is None:
        results = invert_images(model, dict(enumerate(images)), config, judge, "adaptive", base_seed, workers)
    scores = np.array([(results[i][0] if isinstance(results[i], tuple) else results[i]).score for i in ids])
    med_m = median_score(scores[member])
    med_h = median_score(scores[~member])
    hold_cross = [int(i) for i in ids[~member] if scores[i] < med_m]
    mem_cross = [int(i) for i in ids[member] if scores[i] > med_h]
    return {"loss_auc": loss_auc, "member_median": med_m, "holdout_median": med_h,
            "holdout_below_member_median": hold_cross, "member_above_holdout_median": mem_cross,
            "scores": scores, "loss": loss}


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p

