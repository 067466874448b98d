"""Regression metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {target.size} targets")
    return pred, target


def r2(pred, target) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    pred, target = _pair(pred, target)
    if target.size < 2:
        raise ValueError("r2 needs at least two points")
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r2 is undefined for constant targets")
    return 1.0 - float(np.sum((target - pred) ** 2)) / ss_tot


def rmse(pred, target) -> float:
    pred, target = _pair(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


@dataclass(frozen=True)
class Metrics:
    r2: float
    rmse: float

    @classmethod
    def of(cls, pred, target) -> "Metrics":
        return cls(r2(pred, target), rmse(pred, target))

    def to_json(self) -> dict:
        return asdict(self)
