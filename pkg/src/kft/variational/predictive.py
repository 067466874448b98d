"""Posterior predictive sampling and interval calibration."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..metrics import r2 as r2_score
from ..tensor_ops import DTYPE
from .state import VariationalKft

ALPHAS = (0.05, 0.15, 0.25, 0.35, 0.45)
MIN_SAMPLES = 100


def posterior_predictive(state: VariationalKft, idx, n_samples: int, seed: int, noise: bool = True) -> np.ndarray:
    """Draws of the observation at each index, shape (n_samples, len(idx))."""
    m = state.model
    idx = m.check_indices(idx)
    gen = torch.Generator().manual_seed(int(seed))
    out = np.empty((n_samples, idx.shape[0]))
    with torch.no_grad():
        mats = m.side_matrices()
        sd = math.sqrt(state.prior.noise_var)
        for s in range(n_samples):
            params = state.sample_params(gen)
            f = m.predict(idx, params=params, mats=mats)
            if noise:
                f = f + sd * torch.randn(f.shape, generator=gen, dtype=DTYPE)
            out[s] = f.numpy()
    return out


def mean_prediction(state: VariationalKft, idx) -> np.ndarray:
    """Output of the mean chain (every core at its posterior mean)."""
    with torch.no_grad():
        return state.model.predict(idx).numpy()


@dataclass(frozen=True)
class CalibrationReport:
    alphas: tuple[float, ...]
    rates: tuple[float, ...]
    deviations: tuple[float, ...]
    total: float
    r2: float
    eta: float

    def to_json(self) -> dict:
        return {
            "alphas": list(self.alphas),
            "rates": list(self.rates),
            "deviations": list(self.deviations),
            "total": self.total,
            "r2": self.r2,
            "eta": self.eta,
        }


def coverage(samples, targets, alphas: Sequence[float] = ALPHAS) -> np.ndarray:
    """Boolean (n_alpha, n_points): target inside the central 1 - 2 alpha interval."""
    samples = np.asarray(samples, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if samples.ndim != 2 or samples.shape[1] != targets.size:
        raise ValueError("samples must have shape (n_samples, n_points)")
    if samples.shape[0] < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} predictive samples per point, got {samples.shape[0]}")
    rows = []
    for a in alphas:
        lo, hi = np.quantile(samples, [a, 1.0 - a], axis=0)
        rows.append((targets >= lo) & (targets <= hi))
    return np.array(rows)


def calibration(samples, targets, mean_pred=None, alphas: Sequence[float] = ALPHAS) -> CalibrationReport:
    """Calibration rates, their total deviation and the selection score ``total - R^2``.

    R^2 uses ``mean_pred`` (the mean chain) when given, else the sample mean.
    """
    inside = coverage(samples, targets, alphas)
    rates = inside.mean(axis=1)
    dev = np.abs(rates - (1.0 - 2.0 * np.asarray(alphas)))
    total = math.fsum(dev.tolist())
    pred = np.asarray(samples).mean(axis=0) if mean_pred is None else mean_pred
    score = r2_score(pred, targets)
    return CalibrationReport(
        tuple(float(a) for a in alphas),
        tuple(float(r) for r in rates),
        tuple(float(d) for d in dev),
        total,
        score,
        total - score,
    )


def calibration_heatmap(indices, samples, targets, modes=(0, 1), alphas: Sequence[float] = ALPHAS) -> list[tuple]:
    """Coverage per (mode-A index, mode-B index, alpha), aggregated over other modes."""
    indices = np.asarray(indices)
    inside = coverage(samples, targets, alphas)
    a, b = modes
    keys = sorted(set(zip(indices[:, a].tolist(), indices[:, b].tolist())))
    rows = []
    for ia, ib in keys:
        sel = (indices[:, a] == ia) & (indices[:, b] == ib)
        for j, alpha in enumerate(alphas):
            rows.append((ia, ib, float(alpha), float(inside[j, sel].mean())))
    return rows


def write_heatmap_csv(rows, path, modes=(0, 1)) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"mode{modes[0]}_index", f"mode{modes[1]}_index", "alpha", "coverage"])
        for ia, ib, alpha, cov in rows:
            w.writerow([ia, ib, repr(alpha), repr(cov)])
