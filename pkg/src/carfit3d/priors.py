"""Dimension encoding against class-mean dimensions and its regression loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


class NonPositiveDimension(ValueError):
    pass


@dataclass(frozen=True)
class MeanDims:
    """Average car/van dimensions in meters.

    The defaults are the means of the Car and Van rows of the KITTI training
    labels (recompute with ``scripts/mean_dims.py``).
    """

    h: float = 1.53
    l: float = 3.88
    w: float = 1.63

    def __post_init__(self):
        if not (self.h > 0 and self.l > 0 and self.w > 0):
            raise NonPositiveDimension(f"mean dims must be positive: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.h, self.l, self.w])


@dataclass(frozen=True)
class DimensionLossConfig:
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("loss weight must be positive")


def encode_dims(actual, mean: MeanDims = MeanDims()) -> np.ndarray:
    """Log-ratio of ``(h, l, w)`` to the mean dims."""
    a = np.asarray(actual, dtype=np.float64)
    if np.any(~(a > 0)):
        raise NonPositiveDimension(f"dims must be positive, got {actual}")
    return np.log(a / mean.as_array())


def decode_dims(delta, mean: MeanDims = MeanDims()) -> np.ndarray:
    return mean.as_array() * np.exp(np.asarray(delta, dtype=np.float64))


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def dimension_loss(pred, target, is_car: int, cfg: DimensionLossConfig = DimensionLossConfig()) -> float:
    """``weight * is_car * sum(smooth_l1(pred - target))``."""
    if not is_car:
        return 0.0
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(cfg.weight * smooth_l1(diff).sum())


def mean_dims_from_labels(records: Iterable, classes=("Car", "Van")) -> MeanDims:
    dims = np.array([r.dims for r in records if r.cls in classes], dtype=np.float64)
    if len(dims) == 0:
        raise ValueError("no records of the requested classes")
    h, l, w = dims.mean(axis=0)
    return MeanDims(float(h), float(l), float(w))
