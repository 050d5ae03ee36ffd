"""Desk-scale datasets with fixed train/val/test splits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import DatasetMissingError
from .config import DatasetConfig, DatasetName


@dataclass
class Split:
    x: torch.Tensor
    y: torch.Tensor

    def __len__(self) -> int:
        return self.y.shape[0]


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    n_classes: int

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train.x.shape[1:])

    def split(self, name: str) -> Split:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _gaussians(cfg: DatasetConfig, rng: np.random.Generator, n: int):
    # each class is a mixture of clusters_per_class isotropic components
    m = cfg.n_classes * cfg.clusters_per_class
    means = rng.standard_normal((m, cfg.dim))
    means *= cfg.separation / np.linalg.norm(means, axis=1, keepdims=True)
    comp = rng.integers(0, m, n)
    y = comp % cfg.n_classes
    x = means[comp] + cfg.noise * rng.standard_normal((n, cfg.dim))
    return x, y


def _spirals(cfg: DatasetConfig, rng: np.random.Generator, n: int):
    k = cfg.n_classes
    y = rng.integers(0, k, n)
    r = rng.uniform(0.05, 1.0, n)
    theta = 3.0 * math.pi * r + 2.0 * math.pi * y / k
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], 1)
    x = x + 0.05 * cfg.noise * rng.standard_normal(x.shape)
    return 3.0 * x, y


def _tiny_images(cfg: DatasetConfig):
    path = Path(cfg.path)
    if not path.is_file():
        raise DatasetMissingError(f"dataset archive not found: {path}")
    try:
        with np.load(path) as arc:
            x, y = arc["x"], arc["y"]
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetMissingError(f"cannot read {path}: expected an .npz with 'x' and 'y'") from exc
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    elif x.ndim == 4 and x.shape[-1] in (1, 3) and x.shape[1] not in (1, 3):
        x = x.transpose(0, 3, 1, 2)
    if x.ndim != 4 or len(x) != len(y):
        raise DatasetMissingError(f"{path}: x must be (n, H, W[, C]) with one label per image")
    if x.max() > 1.5:
        x = x / 255.0
    return x, np.asarray(y, dtype=np.int64)


def make_dataset(cfg: DatasetConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    total = cfg.n_train + cfg.n_val + cfg.n_test
    if cfg.name is DatasetName.TINY_IMAGES:
        x, y = _tiny_images(cfg)
        if len(y) < total:
            raise DatasetMissingError(f"{cfg.path} holds {len(y)} samples, config needs {total}")
        order = rng.permutation(len(y))[:total]
        x, y = x[order], y[order]
        n_classes = max(cfg.n_classes, int(y.max()) + 1)
        mean, std = x[: cfg.n_train].mean(), x[: cfg.n_train].std() + 1e-8
        x = (x - mean) / std
    else:
        gen = _gaussians if cfg.name is DatasetName.SYNTHETIC_GAUSSIANS else _spirals
        x, y = gen(cfg, rng, total)
        n_classes = cfg.n_classes
    x = torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)
    y = torch.as_tensor(y, dtype=torch.int64)
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return Dataset(Split(x[:a], y[:a]), Split(x[a:b], y[a:b]), Split(x[b:], y[b:]), n_classes)
