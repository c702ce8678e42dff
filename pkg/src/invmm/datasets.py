"""Synthetic toy datasets: 2-D point clouds and 8x8 procedural shapes."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

SHAPES = ("square", "disk", "ring", "cross", "hbar", "vbar", "diag", "frame")


@dataclass
class ToyDataset:
    """Distinct images plus a duplication manifest.

    ``images`` holds one row per distinct image (values in [-1, 1]); the
    training set repeats image ``i`` ``copies[i]`` times.  ``labels`` are class
    ids (< n_classes); the condition vocabulary is ``n_classes + 1`` with the
    null id last.
    """

    kind: str
    images: np.ndarray
    labels: np.ndarray | None = None
    copies: dict[int, int] = field(default_factory=dict)
    n_classes: int = 0
    seed: int = 0
    shape: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 2 or self.images.shape[0] == 0:
            raise ContractError("dataset needs at least one image, stored as (n, N)")
        if np.any(np.abs(self.images) > 1.0 + 1e-12) and self.kind != "gauss2d":
            raise ContractError("images must lie in [-1, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ContractError("one label per image required")
            if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
                raise ContractError("labels must be < n_classes (the null id is reserved)")
        for k, c in self.copies.items():
            if not 0 <= int(k) < len(self.images) or int(c) < 1:
                raise ContractError(f"bad duplication entry {k}: {c}")
        self.copies = {int(k): int(c) for k, c in self.copies.items()}
        if not self.shape:
            self.shape = (self.images.shape[1],)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.n_classes + 1 if self.n_classes else 0

    def copy_count(self, i: int) -> int:
        return self.copies.get(int(i), 1)

    def training_ids(self) -> np.ndarray:
        return np.concatenate([np.full(self.copy_count(i), i, dtype=np.int64) for i in range(len(self))])

    def training_rows(self) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
        ids = self.training_ids()
        labels = None if self.labels is None else self.labels[ids]
        return self.images[ids], labels, ids

    def with_copies(self, copies: dict[int, int]) -> ToyDataset:
        return ToyDataset(self.kind, self.images, self.labels, dict(copies), self.n_classes, self.seed,
                          self.shape, dict(self.meta))

    def subset(self, ids) -> ToyDataset:
        ids = [int(i) for i in ids]
        remap = {old: new for new, old in enumerate(ids)}
        copies = {remap[k]: v for k, v in self.copies.items() if k in remap}
        labels = None if self.labels is None else self.labels[ids]
        return ToyDataset(self.kind, self.images[ids], labels, copies, self.n_classes, self.seed, self.shape,
                          dict(self.meta))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.astype("<f8").tobytes())
        if self.labels is not None:
            h.update(self.labels.astype("<i8").tobytes())
        h.update(json.dumps(sorted(self.copies.items())).encode())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "n_images": len(self),
            "n_training_rows": int(sum(self.copy_count(i) for i in range(len(self)))),
            "dim": self.dim,
            "shape": list(self.shape),
            "n_classes": self.n_classes,
            "seed": self.seed,
            "copies": {str(k): v for k, v in sorted(self.copies.items())},
            "content_hash": self.content_hash(),
            "meta": self.meta,
        }


def _shape_mask(kind: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "disk":
        return dx * dx + dy * dy <= r * r + 0.5
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= (r + 0.5) ** 2) & (d2 >= (r - 0.8) ** 2)
    if kind == "cross":
        return ((np.abs(dx) <= 0.5) & (np.abs(dy) <= r)) | ((np.abs(dy) <= 0.5) & (np.abs(dx) <= r))
    if kind == "hbar":
        return (np.abs(dy) <= 0.5) & (np.abs(dx) <= r + 1)
    if kind == "vbar":
        return (np.abs(dx) <= 0.5) & (np.abs(dy) <= r + 1)
    if kind == "diag":
        return (np.abs(dx - dy) <= 0.6) & (np.abs(dx) <= r)
    if kind == "frame":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return inside & ~((np.abs(dx) <= r - 1) & (np.abs(dy) <= r - 1))
    raise ConfigError(f"unknown shape {kind!r}")


def make_shapes8x8(n: int, n_classes: int = 4, seed: int = 0, texture: float = 0.35,
                   smooth_fraction: float = 0.0, size: int = 8) -> ToyDataset:
    """Procedural single-channel images: one shape on a dark background.

    Each image gets its own fixed pixel texture of amplitude ``texture``; a
    ``smooth_fraction`` of images get none.  The label is the shape type.
    Images are distinct by construction (rejection on exact repeats).
    """
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    if not 1 <= n_classes <= len(SHAPES):
        raise ConfigError(f"n_classes must be in 1..{len(SHAPES)}")
    rng = np.random.default_rng(seed)
    images, labels, seen = [], [], set()
    smooth = np.zeros(n, dtype=bool)
    smooth[: int(round(smooth_fraction * n))] = True
    smooth = rng.permutation(smooth)
    while len(images) < n:
        k = len(images)
        label = int(rng.integers(n_classes))
        r = float(rng.integers(1, 3))
        cx = float(rng.integers(2, size - 2))
        cy = float(rng.integers(2, size - 2))
        fg = float(rng.choice([0.4, 0.7, 1.0]))
        bg = -1.0
        img = np.where(_shape_mask(SHAPES[label], cx, cy, r, size), fg, bg)
        tex = np.zeros_like(img) if smooth[k] else texture * rng.standard_normal(img.shape)
        img = np.clip(img + tex, -1.0, 1.0).reshape(-1)
        key = img.round(6).tobytes()
        if key in seen:
            continue
        seen.add(key)
        images.append(img)
        labels.append(label)
    return ToyDataset("shapes8x8", np.array(images), np.array(labels), {}, n_classes, seed, (size, size),
                      {"texture": texture, "smooth_fraction": smooth_fraction, "smooth": smooth.tolist()})


def make_gauss2d(n: int, n_classes: int = 4, seed: int = 0, spread: float = 0.08) -> ToyDataset:
    """2-D points drawn around ``n_classes`` centres on a circle of radius 0.7."""
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    if n_classes < 1:
        raise ConfigError("n_classes must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(n_classes, size=n)
    ang = 2 * np.pi * labels / n_classes
    centres = 0.7 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts = centres + spread * rng.standard_normal((n, 2))
    return ToyDataset("gauss2d", pts, labels, {}, n_classes, seed, (2,), {"spread": spread})


def make_variants8x8(n: int, n_classes: int = 4, seed: int = 0, variants: int = 6, jitter: float = 0.04,
                     texture: float = 0.35) -> ToyDataset:
    """``n`` prototype shapes, each with ``variants`` lightly jittered copies.

    Mimics near-duplicate clusters.  ``meta["prototype"]`` and ``meta["slot"]``
    give each image's cluster and position within it.
    """
    if variants < 1 or jitter < 0:
        raise ConfigError("variants must be >= 1 and jitter >= 0")
    proto = make_shapes8x8(n, n_classes, seed, texture=texture)
    rng = np.random.default_rng([seed, 7])
    imgs = np.repeat(proto.images, variants, axis=0)
    imgs = np.clip(imgs + jitter * rng.standard_normal(imgs.shape), -1.0, 1.0)
    labels = np.repeat(proto.labels, variants)
    meta = {"texture": texture, "jitter": jitter, "variants": variants,
            "prototype": np.repeat(np.arange(n), variants).tolist(),
            "slot": np.tile(np.arange(variants), n).tolist()}
    return ToyDataset("variants8x8", imgs, labels, {}, n_classes, seed, proto.shape, meta)


def prototypes(ds: ToyDataset) -> np.ndarray:
    """One representative (slot 0) per cluster, or all images for other kinds."""
    if ds.kind != "variants8x8":
        return ds.images
    return ds.images[np.asarray(ds.meta["slot"]) == 0]


KINDS = ("gauss2d", "shapes8x8", "variants8x8")


def make_dataset(kind: str, n: int, n_classes: int = 4, seed: int = 0, copies: dict[int, int] | None = None,
                 **kwargs) -> ToyDataset:
    if kind == "shapes8x8":
        ds = make_shapes8x8(n, n_classes, seed, **kwargs)
    elif kind == "gauss2d":
        ds = make_gauss2d(n, n_classes, seed, **kwargs)
    elif kind == "variants8x8":
        ds = make_variants8x8(n, n_classes, seed, **kwargs)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if copies:
        ds = ds.with_copies(copies)
    return ds
