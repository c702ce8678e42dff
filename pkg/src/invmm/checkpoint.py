"""Versioned, deterministic checkpoint container.

Layout::

    b"INVMM-CKPT\\n"
    u32 little-endian format version
    u64 header length, then that many bytes of UTF-8 JSON (sorted keys)
    raw little-endian float64 payload for every array named in the header,
    in header order

No timestamps and no compression, so saving the same model twice yields the
same bytes and loading restores every weight bit for bit.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .diffusion import DenoiserConfig, DenoiserModel, TrainHistory, make_schedule
from .errors import CheckpointError
from .ndtensor import Tensor

MAGIC = b"INVMM-CKPT\n"
VERSION = 1


def _pack(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values()]
    return b"".join(parts)


def _unpack(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file", "magic")
    pos = len(MAGIC)
    if len(raw) < pos + 12:
        raise CheckpointError("truncated checkpoint", "header")
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", "version")
    (hlen,) = struct.unpack_from("<Q", raw, pos + 4)
    pos += 12
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header", "header") from exc
    pos += hlen
    arrays = {}
    for spec in header.get("arrays", []):
        name = spec["name"]
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CheckpointError("truncated array payload", name)
        arr = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError("non-finite values in array", name)
        arrays[name] = arr
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError("trailing bytes after payload", "payload")
    return header, arrays


_REQUIRED = ("model", "schedule", "seed", "manifest")


def save_checkpoint(path, model: DenoiserModel, seed: int, manifest: dict,
                    history: TrainHistory | None = None) -> None:
    cfg = model.config
    header = {
        "model": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "schedule": {"T": model.schedule.T, "beta_min": model.schedule.beta_min,
                     "beta_max": model.schedule.beta_max},
        "seed": int(seed),
        "manifest": manifest,
        "history": history.to_dict() if history is not None else None,
    }
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    if history is not None and history.optimizer_state is not None:
        st = history.optimizer_state
        header["adam_t"] = int(st["t"])
        for k in model.params:
            arrays[f"adam_m/{k}"] = st["m"][k]
            arrays[f"adam_v/{k}"] = st["v"][k]
    Path(path).write_bytes(_pack(header, arrays))


def load_checkpoint(path) -> tuple[DenoiserModel, dict, TrainHistory | None]:
    """Returns the model, the raw header and (if stored) the training history."""
    header, arrays = _unpack(Path(path).read_bytes())
    for key in _REQUIRED:
        if key not in header:
            raise CheckpointError("missing field", key)
    try:
        cfg = DenoiserConfig(**header["model"])
    except TypeError as exc:
        raise CheckpointError(f"bad model section ({exc})", "model") from exc
    sch = header["schedule"]
    try:
        schedule = make_schedule(int(sch["T"]), float(sch["beta_min"]), float(sch["beta_max"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad schedule section ({exc})", "schedule") from exc
    expected = DenoiserModel.init(cfg, schedule, seed=0).params
    params = {}
    for k, ref in expected.items():
        name = f"param/{k}"
        if name not in arrays:
            raise CheckpointError("missing parameter", name)
        if arrays[name].shape != ref.shape:
            raise CheckpointError(f"shape {arrays[name].shape} != {ref.shape}", name)
        params[k] = Tensor(arrays[name], requires_grad=True)
    model = DenoiserModel(cfg, schedule, params)
    history = None
    if header.get("history") is not None:
        h = header["history"]
        history = TrainHistory(list(h["epoch_loss"]), list(h["ema_loss"]), int(h["epochs_done"]))
        if "adam_t" in header:
            history.optimizer_state = {
                "t": int(header["adam_t"]),
                "m": {k: arrays[f"adam_m/{k}"] for k in params},
                "v": {k: arrays[f"adam_v/{k}"] for k in params},
            }
    return model, header, history
