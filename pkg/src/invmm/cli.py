"""Command-line entry point: ``invmm <command> [flags]``.

Every output directory gets a ``manifest.json`` holding the resolved config,
the base seed and the list of files written; JSON/JSON-lines records and
checkpoints carry the config themselves.  Exit codes: 0 success, 2 config
error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as rc
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import DenoiserModel, train_denoiser
from .errors import CheckpointError, ConfigError, InvMMError, ManifestError
from .experiments import (ExperimentManifest, fmt_float, invert_images, job_seed, lambda_ablation_summary,
                          parse_mode, read_results_csv, result_rows, run_audit, run_grid, summarize,
                          write_results_csv, write_summary_csv)
from .metrics import LossEstimatorConfig, median_finite

log = logging.getLogger("invmm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# --------------------------------------------------------------------------- output helpers


def _jsonable(x):
    if isinstance(x, float):
        return fmt_float(x) if not math.isfinite(x) else x
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def _dumps(obj, indent=None) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=indent, allow_nan=False)


class Output:
    """Collects the files a command writes and emits ``manifest.json`` last."""

    def __init__(self, root, cfg: dict, command: str):
        self.root = Path(root)
        self.cfg = cfg
        self.command = command
        self.files: list[str] = []
        self.extra: dict = {}
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def json(self, name: str, obj) -> None:
        self.path(name).write_text(_dumps(obj, indent=2) + "\n")

    def jsonl(self, name: str, records) -> None:
        self.path(name).write_text("".join(_dumps(r) + "\n" for r in records))

    def finish(self) -> None:
        self.json("manifest.json", {"command": self.command, "seed": self.cfg["seed"], "config": self.cfg,
                                    "config_hash": rc.config_hash(self.cfg), "files": sorted(self.files),
                                    **self.extra})


# --------------------------------------------------------------------------- shared steps


def _train(cfg: dict, ds, epochs: int | None = None, resume=None):
    schedule = rc.build_schedule(cfg)
    mcfg = rc.build_model_config(cfg, ds)
    tcfg = rc.build_train_config(cfg, epochs)
    history = None
    if resume is not None:
        model, header, history = load_checkpoint(resume)
        if model.config != mcfg:
            raise ConfigError("resume checkpoint has a different model architecture")
    else:
        model = DenoiserModel.init(mcfg, schedule, seed=int(cfg["seed"]))
    rows, labels, _ = ds.training_rows()
    log.info("training %d rows for %d epochs", len(rows), tcfg.epochs)
    return train_denoiser(rows, schedule, tcfg, model, labels, history)


def _ckpt_manifest(cfg: dict, ds) -> dict:
    return {"config": cfg, "dataset": ds.manifest()}


def _load_for_eval(path):
    """Checkpoint plus the dataset and judge recorded in its embedded config."""
    if path is None:
        raise ConfigError("a checkpoint path is required (--checkpoint or the command's config section)")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model, header, _ = load_checkpoint(path)
    man = header["manifest"]
    if "config" not in man or "dataset" not in man:
        raise CheckpointError("checkpoint carries no run manifest", "manifest")
    train_cfg = man["config"]
    ds = rc.build_dataset(train_cfg, man["dataset"]["copies"])
    if ds.content_hash() != man["dataset"]["content_hash"]:
        raise CheckpointError("dataset regenerated from the checkpoint does not match its content hash",
                              "manifest.dataset.content_hash")
    train_cfg = dict(train_cfg, checkpoint_sha256=hashlib.sha256(Path(path).read_bytes()).hexdigest())
    return model, ds, train_cfg


def _conds(model, ds, ids, how):
    if not model.config.conditional or how != "label" or ds.labels is None:
        return {}
    return {i: int(ds.labels[i]) for i in ids}


def _record(cfg, mode, image_id, res, pd=None) -> dict:
    rec = {"image_id": image_id, "mode": mode, "seed": cfg["seed"], "job_seed": job_seed(cfg["seed"], image_id),
           **res.to_record(), "config": cfg}
    if pd is not None:
        rec["prompt_probs"] = pd.probs().tolist()
        rec["prompt_entropy"] = pd.entropy().tolist()
    return rec


# --------------------------------------------------------------------------- commands


def cmd_gen_dataset(cfg: dict, out) -> None:
    ds = rc.build_dataset(cfg)
    o = Output(out, cfg, "gen-dataset")
    buf = io.BytesIO()
    arrays = {"images": ds.images, "training_ids": ds.training_ids()}
    if ds.labels is not None:
        arrays["labels"] = ds.labels
    np.savez(buf, **arrays)
    o.path("dataset.npz").write_bytes(buf.getvalue())
    o.json("dataset.json", {"seed": cfg["seed"], "config": cfg, "dataset": ds.manifest()})
    o.finish()


def cmd_train(cfg: dict, out, resume=None) -> None:
    ds = rc.build_dataset(cfg)
    if resume is not None and not Path(resume).is_file():
        raise ConfigError(f"resume checkpoint not found: {resume}")
    o = Output(out, cfg, "train")
    model, history = _train(cfg, ds, resume=resume)
    save_checkpoint(o.path("model.ckpt"), model, cfg["seed"], _ckpt_manifest(cfg, ds), history)
    with open(o.path("train_loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "ema_loss"])
        for e, (l, m) in enumerate(zip(history.epoch_loss, history.ema_loss)):
            w.writerow([e, repr(l), repr(m)])
    o.extra["epochs_done"] = history.epochs_done
    o.finish()


def cmd_invert(cfg: dict, out, checkpoint=None) -> None:
    inv = cfg["invert"]
    model, ds, train_cfg = _load_for_eval(checkpoint or inv["checkpoint"])
    ids = rc.resolve_ids(inv["ids"], ds)
    mode = inv["mode"]
    kind, _ = parse_mode(mode)
    if kind == "joint" and not model.config.conditional:
        raise ConfigError("mode 'joint' needs a conditional checkpoint")
    judge = rc.build_judge(cfg, ds)
    icfg = rc.build_inversion(cfg)
    prompt = rc.build_prompt(cfg)
    conds = {} if kind == "joint" else _conds(model, ds, ids, inv["cond"])
    o = Output(out, cfg, "invert")
    log.info("inverting %d images (mode %s, beta %.4g)", len(ids), mode, judge.beta)
    res = invert_images(model, {i: ds.images[i] for i in ids}, icfg, judge, mode, cfg["seed"], cfg["workers"],
                        conds, prompt)
    recs = []
    for i, (r, pd) in res.items():
        r.trace_to_csv(o.path(f"traces/trace_{i}.csv"))
        if pd is not None:
            pd.to_csv(o.path(f"prompts/prompt_{i}.csv"))
        recs.append(_record(cfg, mode, i, r, pd))
    o.jsonl("results.jsonl", recs)
    rows = result_rows(mode, res)
    write_results_csv(rows, o.path("results.csv"))
    write_summary_csv(summarize(rows), o.path("summary.csv"))
    o.extra.update(judge_beta=judge.beta, checkpoint_sha256=train_cfg["checkpoint_sha256"],
                   checkpoint_dataset=train_cfg["dataset"], image_ids=ids)
    o.finish()


def cmd_audit(cfg: dict, out, checkpoint=None) -> None:
    a = cfg["audit"]
    model, ds, train_cfg = _load_for_eval(checkpoint or a["checkpoint"])
    pos = rc.resolve_ids(a["positives"], ds)
    judge = rc.build_judge(cfg, ds)
    icfg = rc.build_inversion(cfg)
    o = Output(out, cfg, "audit")
    seed = cfg["seed"]
    lc = LossEstimatorConfig(int(a["loss_noise"]), int(a["loss_timesteps"]), "eps", seed)
    rep = run_audit(model, ds.images, pos, icfg, judge, a["n_samples"], icfg.sampler, seed, cfg["workers"],
                    float(a["fpr_budget"]), lc, ds.labels, a["cond_mode"])
    with open(o.path("summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(rep.rows())
    rep.nn.to_csv(o.path("s_nn.csv"))
    rows = [r for r in (_score_row(i, s) for i, s in sorted(rep.scores.items()))]
    write_results_csv(rows, o.path("results.csv"))
    o.jsonl("results.jsonl", [{"image_id": r.image_id, "score": r.score, "success": r.success,
                               "positive": r.image_id in set(pos), "seed": seed,
                               "job_seed": job_seed(seed, r.image_id), "config": cfg} for r in rows])
    o.extra.update(judge_beta=judge.beta, metrics=rep.metrics, checkpoint_sha256=train_cfg["checkpoint_sha256"],
                   seeds={"base": seed, "nn_test": [seed, 11], "loss_panel": [seed, 3],
                          "inversion_jobs": "SeedSequence([base, image_id])"})
    o.finish()


def _score_row(i, s):
    from .experiments import ResultRow

    return ResultRow("audit", int(i), float(s), math.isfinite(s), 0)


def _cell_checkpoint(o: Output, cfg: dict, ds, name: str, epochs: int | None = None) -> str:
    """Train (or reuse an identical earlier run of) one grid cell's model."""
    rel = f"cells/{name}/model.ckpt"
    path = o.root / rel
    cell_cfg = json.loads(json.dumps(cfg))
    cell_cfg["dataset"]["copies"] = {str(k): v for k, v in sorted(ds.copies.items())}
    if epochs is not None:
        cell_cfg["train"]["epochs"] = epochs
    man = _ckpt_manifest(cell_cfg, ds)
    if path.is_file():
        try:
            _, header, _ = load_checkpoint(path)
            if _dumps(header["manifest"]) == _dumps(man):
                log.info("reusing %s", rel)
                o.files.append(rel)
                return str(path)
        except CheckpointError:
            pass
    model, history = _train(cell_cfg, ds)
    save_checkpoint(o.path(rel), model, cfg["seed"], man, history)
    return str(path)


def cmd_experiment(cfg: dict, out, factor: str, mode: str | None = None) -> None:
    e = cfg["experiment"]
    base = rc.build_dataset(cfg)
    targets = rc.resolve_ids(e["target_ids"], base)
    judge = rc.build_judge(cfg, base)
    icfg = rc.build_inversion(cfg)
    o = Output(out, cfg, f"experiment {factor}")
    cells, modes = {}, {}
    if factor == "duplication":
        for c in e["duplication_grid"]:
            ds = base.with_copies({i: c for i in targets} if c > 1 else {})
            cells[f"x{c}"] = _cell_checkpoint(o, cfg, ds, f"x{c}")
            modes[f"x{c}"] = mode or "adaptive"
    elif factor == "epoch":
        for m in e["epoch_grid"]:
            ep = int(e["base_epochs"]) * m
            cells[f"e{ep}"] = _cell_checkpoint(o, cfg, base, f"e{ep}", ep)
            modes[f"e{ep}"] = mode or "adaptive"
    else:
        targets = rc.resolve_ids(e["lambda_ids"], base)
        ck = _cell_checkpoint(o, cfg, base, "model")
        for name, mode in e["lambda_modes"].items():
            cells[name] = ck
            modes[name] = mode
    man = ExperimentManifest(factor, targets, cells, modes, base.manifest())
    rows = run_grid(man, base.images, icfg, judge, cfg["seed"], cfg["workers"], factor)
    write_results_csv(rows, o.path("results.csv"))
    write_summary_csv(summarize(rows), o.path("summary.csv"))
    o.jsonl("results.jsonl", [{"cell": r.cell, "mode": man.mode(r.cell), "image_id": r.image_id,
                               "score": r.score, "success": r.success, "stop_step": r.stop_step,
                               "seed": cfg["seed"], "job_seed": job_seed(cfg["seed"], r.image_id),
                               "config": cfg} for r in rows])
    md = man.to_dict()
    md["cells"] = {k: str(Path(v).relative_to(o.root)) for k, v in cells.items()}
    o.extra.update(experiment=md, judge_beta=judge.beta)
    o.finish()


def report_data(run_dir) -> dict:
    """Summary tables recomputed from a run directory's manifest and result file."""
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.is_file():
        raise ManifestError(f"no manifest.json in {run_dir}")
    man = json.loads(mpath.read_text())
    if "results.csv" not in man.get("files", []):
        raise ManifestError(f"run in {run_dir} recorded no results.csv")
    rows = read_results_csv(run_dir / "results.csv")
    cells: dict[str, list] = {}
    for r in rows:
        cells.setdefault(r.cell, []).append(r)
    table = [{"cell": s.cell, "median_score": s.median_score, "success_rate": s.success_rate, "n": s.n,
              "median_finite_score": median_finite([r.score for r in cells[s.cell]]),
              "successes": sum(r.success for r in cells[s.cell])} for s in summarize(rows)]
    data = {"source": str(run_dir.name), "command": man["command"], "seed": man["seed"], "config": man["config"],
            "config_hash": man["config_hash"], "cells": table}
    exp = man.get("experiment")
    if exp and exp.get("factor") == "lambda":
        names = list(exp["modes"])
        if {"adaptive", "lambda0", "lambda1"} <= set(names):
            data["lambda_ablation"] = lambda_ablation_summary(rows)
    return data


def cmd_report(cfg: dict, out, inputs) -> None:
    inputs = list(inputs or cfg["report"]["inputs"])
    if not inputs:
        raise ConfigError("report needs at least one run directory")
    reports = [report_data(p) for p in inputs]
    o = Output(out, cfg, "report")
    with open(o.path("report.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "cell", "median_score", "median_finite_score", "success_rate", "successes", "n"])
        for rep in reports:
            for c in rep["cells"]:
                w.writerow([rep["source"], c["cell"], fmt_float(c["median_score"]),
                            fmt_float(c["median_finite_score"]), fmt_float(c["success_rate"]), c["successes"],
                            c["n"]])
    o.json("report.json", {"seed": cfg["seed"], "config": cfg, "runs": reports})
    o.finish()


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults fill every missing key)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--workers", type=int, help="parallel inversion jobs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="invmm", description="Inversion-based memorization scores for toy diffusion "
                                "models. Config keys can be overridden with INVMM_<SECTION>__<KEY>=<json>.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-dataset", parents=[common], help="write the synthetic dataset and its manifest")
    t = sub.add_parser("train", parents=[common], help="train a denoiser checkpoint")
    t.add_argument("--resume", help="checkpoint to continue training from")
    for name, helptext in (("invert", "invert images of a checkpoint"), ("audit", "full memorization audit")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint")
        if name == "invert":
            s.add_argument("--mode", help="adaptive | joint | fixed:<lambda>")
            s.add_argument("--ids", help="'all', 'duplicated' or comma-separated ids")
    x = sub.add_parser("experiment", parents=[common], help="train and invert a factor grid")
    x.add_argument("factor", choices=("duplication", "epoch", "lambda"))
    x.add_argument("--mode", help="inversion mode for every duplication/epoch cell (default adaptive)")
    r = sub.add_parser("report", parents=[common], help="recompute summaries from run directories")
    r.add_argument("inputs", nargs="*", help="run directories (default: report.inputs)")
    return p


def _flags(args) -> dict:
    flags = {"seed": args.seed, "workers": args.workers}
    if args.command == "invert":
        flags["invert.mode"] = args.mode
        if args.ids is not None:
            ids = args.ids.strip()
            try:
                flags["invert.ids"] = ids if ids in ("all", "duplicated") else [int(v) for v in ids.split(",")]
            except ValueError:
                raise ConfigError(f"bad --ids value {args.ids!r}") from None
    return flags


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        cfg = rc.load_config(args.config, _flags(args))
        if args.command == "experiment" and args.mode is not None:
            parse_mode(args.mode)
            if args.factor == "lambda":
                raise ConfigError("the lambda ablation takes its modes from experiment.lambda_modes")
        if args.command == "gen-dataset":
            cmd_gen_dataset(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.out, args.resume)
        elif args.command == "invert":
            cmd_invert(cfg, args.out, args.checkpoint)
        elif args.command == "audit":
            cmd_audit(cfg, args.out, args.checkpoint)
        elif args.command == "experiment":
            cmd_experiment(cfg, args.out, args.factor, args.mode)
        else:
            cmd_report(cfg, args.out, args.inputs)
    except (ConfigError, ManifestError) as exc:
        print(f"invmm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvMMError, OSError) as exc:
        print(f"invmm: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
