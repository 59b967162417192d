"""Synthetic classification datasets (blobs, spirals, patchgrid) and the analytic quadratic."""
from dataclasses import asdict, dataclass

import numpy as np

from .core_math import RandomStream

KINDS = ("blobs", "spirals", "patchgrid", "quadratic")
IMAGE_SIDE = 8


class ConfigError(ValueError):
    """Invalid dataset/model/benchmark configuration."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "spirals"
    classes: int = 3
    samples_per_class: int = 200
    dims: int = 2
    noise: float = 0.2
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "image_side" in d and int(d["image_side"]) != IMAGE_SIDE:
            raise ConfigError(f"patchgrid images are {IMAGE_SIDE}x{IMAGE_SIDE}")
        return cls(**known)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Dataset:
    spec: DatasetSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def input_dim(self):
        return self.x_train.shape[1]

    @property
    def classes(self):
        return self.spec.classes


def spiral_point(arm, t, classes, angle_noise=0.0):
    phi = 2.0 * np.pi * (1.75 * t + arm / classes) + angle_noise
    return t * np.cos(phi), t * np.sin(phi)


def _blobs(spec, rng):
    centers = rng.normal((spec.classes, spec.dims), scale=3.0)
    xs = []
    for c in range(spec.classes):
        pts = centers[c] + spec.noise * rng.normal((spec.samples_per_class, spec.dims))
        xs.append(pts)
    return xs


def _spirals(spec, rng):
    t = np.linspace(0.1, 1.0, spec.samples_per_class)
    xs = []
    for c in range(spec.classes):
        eps = spec.noise * rng.normal(spec.samples_per_class)
        px, py = spiral_point(c, t, spec.classes, eps)
        xs.append(np.stack([px, py], axis=1))
    return xs


def _patchgrid(spec, rng):
    side = IMAGE_SIDE
    yy, xx = np.meshgrid(np.arange(side, dtype=np.float64), np.arange(side, dtype=np.float64), indexing="ij")
    xs = []
    for c in range(spec.classes):
        ang = np.pi * c / spec.classes
        u, v = np.cos(ang), np.sin(ang)
        freq = 1.0 + c
        base = np.sin(2.0 * np.pi * freq * (xx * u + yy * v) / side).ravel()
        noise = spec.noise * rng.normal((spec.samples_per_class, side * side))
        xs.append(base[None, :] + noise)
    return xs


_GENERATORS = {"blobs": _blobs, "spirals": _spirals, "patchgrid": _patchgrid}


def generate_dataset(spec):
    """Build a deterministic dataset with a stratified 80/20 train/val split."""
    if spec.kind not in KINDS:
        raise ConfigError(f"unknown dataset kind {spec.kind!r}")
    if spec.kind == "quadratic":
        return None
    if spec.classes < 2:
        raise ConfigError("classification datasets need at least 2 classes")
    if spec.samples_per_class < 2:
        raise ConfigError("need at least 2 samples per class for a split")
    rng = RandomStream(spec.seed)
    per_class = _GENERATORS[spec.kind](spec, rng)
    split = rng.fork("split")
    n_train = int(round(0.8 * spec.samples_per_class))
    xt, yt, xv, yv = [], [], [], []
    for c, pts in enumerate(per_class):
        order = split.permutation(len(pts))
        xt.append(pts[order[:n_train]])
        xv.append(pts[order[n_train:]])
        yt.append(np.full(n_train, c, dtype=np.int64))
        yv.append(np.full(len(pts) - n_train, c, dtype=np.int64))
    return Dataset(
        spec=spec,
        x_train=np.ascontiguousarray(np.concatenate(xt)),
        y_train=np.concatenate(yt),
        x_val=np.ascontiguousarray(np.concatenate(xv)),
        y_val=np.concatenate(yv),
    )
