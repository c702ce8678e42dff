"""Run configuration: defaults, JSON file, environment overrides, validation.

Precedence (lowest first): built-in defaults, the ``--config`` JSON file,
``INVMM_<SECTION>__<KEY>`` environment variables (values parsed as JSON when
possible), then explicit command-line flags.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .datasets import KINDS, ToyDataset, make_dataset, prototypes
from .diffusion import DenoiserConfig, SamplerConfig, TrainConfig, make_schedule
from .errors import ConfigError
from .inversion import InversionConfig
from .promptinv import PromptConfig
from .replication import ReplicationJudge, calibrate_beta

ENV_PREFIX = "INVMM_"
# env vars with the prefix that are not config overrides
_ENV_RESERVED = {"INVMM_PURE_PYTHON"}

DEFAULTS: dict = {
    "seed": 0,
    "workers": 1,
    "dataset": {"kind": "shapes8x8", "n": 64, "n_classes": 4, "seed": 1,
                "copies": {str(i): 20 for i in range(8)}, "params": {"texture": 0.35}},
    "schedule": {"T": 1000, "beta_min": 1e-4, "beta_max": 0.02},
    "model": {"hidden": 256, "depth": 3, "temb_dim": 32, "cond_dim": 16, "cond_positions": 1, "output": "v",
              "conditional": False},
    "train": {"epochs": 3000, "batch_size": 64, "lr": 1e-3, "cond_drop": 0.1, "ema": 0.99,
              "lr_schedule": "cosine"},
    "sampler": {"ddim_steps": 50, "eta": 0.0, "cfg_scale": 1.0},
    "inversion": {"iterations": 2000, "cycle": 10, "increment": 1e-4, "threshold": 1e-3, "lr": 0.1,
                  "sensitivity_samples": 16, "batch_size": 16, "timestep_samples": 8, "loss_mode": "x0",
                  "lambda_init": 1.0, "lambda_floor": 1e-8},
    "prompt": {"positions": 1, "tau": 2.0, "w_cr": 0.0, "cfg_scales": [1, 2, 3, 4, 5, 6, 7]},
    "judge": {"beta": None, "mode": "raw", "percentile": 0.0, "scale": 0.6, "proj_dim": 32, "proj_seed": 0},
    "invert": {"checkpoint": None, "ids": "duplicated", "mode": "adaptive", "cond": "label"},
    "audit": {"checkpoint": None, "n_samples": 1000, "cond_mode": "uniform", "fpr_budget": 0.01,
              "loss_noise": 16, "loss_timesteps": 50, "positives": "duplicated"},
    "experiment": {"target_ids": "duplicated", "duplication_grid": [1, 5, 10, 20], "epoch_grid": [1, 2, 4],
                   "base_epochs": 750, "lambda_ids": "all",
                   "lambda_modes": {"adaptive": "adaptive", "lambda0": "fixed:0", "lambda1": "fixed:1"}},
    "report": {"inputs": []},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and k not in ("copies", "params", "lambda_modes"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    over: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or name in _ENV_RESERVED:
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__")]
        node = over
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_env_value(raw)
    return over


def load_config(path=None, flags: dict | None = None, environ=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    cfg = _merge(cfg, env_overrides(environ))
    for key, value in (flags or {}).items():
        if value is None:
            continue
        section, _, leaf = key.rpartition(".")
        node = cfg
        for p in section.split(".") if section else []:
            node = node[p]
        node[leaf] = value
    validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- builders


def _int(cfg, *keys) -> int:
    node = cfg
    for k in keys:
        node = node[k]
    if isinstance(node, bool) or not isinstance(node, int):
        raise ConfigError(f"{'.'.join(keys)} must be an integer")
    return node


def build_dataset(cfg: dict, copies: dict | None = None) -> ToyDataset:
    d = cfg["dataset"]
    if d["kind"] not in KINDS:
        raise ConfigError(f"dataset.kind must be one of {KINDS}")
    n = _int(cfg, "dataset", "n")
    if n < 1:
        raise ConfigError("dataset.n must be >= 1")
    try:
        cp = {int(k): int(v) for k, v in (d["copies"] if copies is None else copies).items()}
    except (TypeError, ValueError):
        raise ConfigError("dataset.copies must map image ids to copy counts") from None
    for k, v in cp.items():
        if not 0 <= k < n and d["kind"] != "variants8x8":
            raise ConfigError(f"dataset.copies id {k} out of range")
        if v < 1:
            raise ConfigError("copy counts must be >= 1")
    try:
        return make_dataset(d["kind"], n, _int(cfg, "dataset", "n_classes"), _int(cfg, "dataset", "seed"),
                            cp, **d["params"])
    except TypeError as exc:
        raise ConfigError(f"bad dataset.params: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_schedule(cfg: dict):
    s = cfg["schedule"]
    return make_schedule(_int(cfg, "schedule", "T"), float(s["beta_min"]), float(s["beta_max"]))


def build_model_config(cfg: dict, ds: ToyDataset) -> DenoiserConfig:
    m = dict(cfg["model"])
    conditional = bool(m.pop("conditional"))
    if conditional and not ds.n_classes:
        raise ConfigError("conditional model needs a labelled dataset")
    try:
        return DenoiserConfig(dim=ds.dim, n_conditions=ds.vocab_size if conditional else 0, **m)
    except TypeError as exc:
        raise ConfigError(f"bad model section: {exc}") from None


def build_train_config(cfg: dict, epochs: int | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    if epochs is not None:
        t["epochs"] = epochs
    try:
        return TrainConfig(seed=int(cfg["seed"]), **t)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from None


def build_sampler(cfg: dict) -> SamplerConfig:
    s = cfg["sampler"]
    out = SamplerConfig(int(s["ddim_steps"]), float(s["eta"]), float(s["cfg_scale"]), int(cfg["seed"]))
    out.validate(_int(cfg, "schedule", "T"))
    return out


def build_inversion(cfg: dict) -> InversionConfig:
    try:
        return InversionConfig(seed=int(cfg["seed"]), sampler=build_sampler(cfg), **cfg["inversion"])
    except TypeError as exc:
        raise ConfigError(f"bad inversion section: {exc}") from None


def build_prompt(cfg: dict) -> PromptConfig:
    p = dict(cfg["prompt"])
    p["cfg_scales"] = tuple(float(s) for s in p["cfg_scales"])
    try:
        return PromptConfig(**p)
    except TypeError as exc:
        raise ConfigError(f"bad prompt section: {exc}") from None


def build_judge(cfg: dict, ds: ToyDataset) -> ReplicationJudge:
    j = cfg["judge"]
    base = ReplicationJudge(1.0, j["mode"], int(j["proj_dim"]), int(j["proj_seed"]))
    beta = j["beta"]
    if beta is None:
        beta = calibrate_beta(prototypes(ds), base, float(j["percentile"]), float(j["scale"]))
    return ReplicationJudge(float(beta), j["mode"], int(j["proj_dim"]), int(j["proj_seed"]))


def resolve_ids(spec, ds: ToyDataset) -> list[int]:
    if spec == "all":
        return list(range(len(ds)))
    if spec == "duplicated":
        return sorted(i for i, c in ds.copies.items() if c > 1)
    if isinstance(spec, int) and not isinstance(spec, bool):
        spec = [spec]
    if not isinstance(spec, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in spec):
        raise ConfigError("ids must be 'all', 'duplicated' or a list of integers")
    for i in spec:
        if not 0 <= i < len(ds):
            raise ConfigError(f"image id {i} not in dataset (size {len(ds)})")
    return sorted(set(spec))


def validate(cfg: dict) -> None:
    """Build every component once so bad values fail before any work starts."""
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers must be an integer >= 1")
    try:
        ds = build_dataset(cfg)
        build_schedule(cfg)
        build_model_config(cfg, ds)
        build_train_config(cfg)
        build_inversion(cfg)
        build_prompt(cfg)
        j = cfg["judge"]
        ReplicationJudge(1.0 if j["beta"] is None else float(j["beta"]), j["mode"], int(j["proj_dim"]),
                         int(j["proj_seed"]))
        resolve_ids(cfg["invert"]["ids"], ds)
        resolve_ids(cfg["experiment"]["target_ids"], ds)
        resolve_ids(cfg["experiment"]["lambda_ids"], ds)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    a = cfg["audit"]
    if not isinstance(a["n_samples"], int) or a["n_samples"] < 1:
        raise ConfigError("audit.n_samples must be an integer >= 1")
    if not 0.0 < float(a["fpr_budget"]) <= 1.0:
        raise ConfigError("audit.fpr_budget must lie in (0, 1]")
    if a["cond_mode"] not in ("uniform", "frequency"):
        raise ConfigError("audit.cond_mode must be 'uniform' or 'frequency'")
    e = cfg["experiment"]
    for key in ("duplication_grid", "epoch_grid"):
        g = e[key]
        if not g or not all(isinstance(v, int) and v >= 0 for v in g):
            raise ConfigError(f"experiment.{key} must be a non-empty list of non-negative integers")
    if any(v < 1 for v in e["duplication_grid"]):
        raise ConfigError("duplication counts must be >= 1")
    if _int(cfg, "experiment", "base_epochs") < 0:
        raise ConfigError("experiment.base_epochs must be >= 0")
    from .experiments import parse_mode

    parse_mode(cfg["invert"]["mode"])
    for mode in e["lambda_modes"].values():
        parse_mode(mode)
