"""Observation datasets, CSV persistence, splitting and synthetic generators.

Observations are stored in coordinate form: one integer index tuple and one
target per record.  Side-information files hold one row per index of a mode,
with the mode index in the first column.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .kernels import SideInfo

SYNTH_KINDS = ("informative", "constant", "gaussian-noise", "none")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ZTransform:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "ZTransform":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        # constant columns are left untouched
        keep = std == 0
        return cls(np.where(keep, 0.0, mean), np.where(keep, 1.0, std))

    def forward(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": np.atleast_1d(self.mean).tolist(), "std": np.atleast_1d(self.std).tolist()}

    @classmethod
    def from_json(cls, d: Mapping) -> "ZTransform":
        mean, std = np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64)
        if mean.size == 1:
            mean, std = mean.reshape(()), std.reshape(())
        return cls(mean, std)


@dataclass(frozen=True)
class CooDataset:
    extents: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray
    target_transform: ZTransform | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, len(self.extents))
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "extents", tuple(int(n) for n in self.extents))
        if len(idx) != len(vals):
            raise DataError("indices and values differ in length")
        if not np.isfinite(vals).all():
            raise DataError("targets must be finite")
        if len(idx) and ((idx < 0).any() or (idx >= np.asarray(self.extents)).any()):
            raise DataError("index outside extents")
        if len(np.unique(idx, axis=0)) != len(idx):
            raise DataError("duplicate index tuple")

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def n_modes(self) -> int:
        return len(self.extents)

    @property
    def targets(self) -> np.ndarray:
        """Targets on the training scale (z-scored when a transform is set)."""
        if self.target_transform is None:
            return self.values
        return self.target_transform.forward(self.values)

    def to_original(self, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) if self.target_transform is None else self.target_transform.inverse(y)

    def subset(self, rows) -> "CooDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return CooDataset(self.extents, self.indices[rows], self.values[rows], self.target_transform)


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split(dataset: CooDataset | int, seed: int) -> Split:
    """Seeded 60/20/20 split; rounding remainders go to the training part."""
    n = dataset if isinstance(dataset, int) else dataset.n
    if n < 5:
        raise DataError("need at least 5 records to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = int(math.floor(0.2 * n))
    n_train = n - 2 * n_hold
    return Split(perm[:n_train], perm[n_train : n_train + n_hold], perm[n_train + n_hold :], seed)


# ---------------------------------------------------------------- CSV files
def _float(field_value: str, path, line: int) -> float:
    try:
        v = float(field_value)
    except ValueError:
        raise DataError(f"{path}:{line}: non-numeric field {field_value!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{line}: non-finite field {field_value!r}")
    return v


def _int(field_value: str, path, line: int) -> int:
    v = _float(field_value, path, line)
    if v != int(v) or v < 0:
        raise DataError(f"{path}:{line}: index must be a non-negative integer, got {field_value!r}")
    return int(v)


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty file")
            rows = [(reader.line_num, r) for r in reader if r]
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
    for line, r in rows:
        if len(r) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(r)}")
    return header, rows


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_side_file(path, mode: int, scale: bool = True, max_categories: int = 50) -> SideInfo:
    """Parse a side-information file; non-numeric columns are one-hot encoded."""
    header, rows = _read_rows(path)
    if len(header) < 2:
        raise DataError(f"{path}: side file needs an index column and at least one feature")
    order = [_int(r[0], path, line) for line, r in rows]
    n = len(order)
    if sorted(order) != list(range(n)):
        missing = sorted(set(range(max(order, default=-1) + 1)) - set(order))
        raise DataError(f"{path}: side rows must cover indices 0..{n - 1} exactly once (missing {missing[:5]})")
    cols, names = [], []
    for c in range(1, len(header)):
        raw = [r[c] for _, r in rows]
        if all(_is_number(v) for v in raw):
            vals = np.array([_float(v, path, line) for v, (line, _) in zip(raw, rows)])
            if scale:
                vals = ZTransform.fit(vals).forward(vals)
            cols.append(vals[:, None])
            names.append(header[c])
        else:
            levels = sorted(set(raw))
            if len(levels) > max_categories:
                raise DataError(f"{path}: column {header[c]!r} has {len(levels)} categories (cap {max_categories})")
            onehot = np.array([[1.0 if v == lv else 0.0 for lv in levels] for v in raw])
            cols.append(onehot)
            names.extend(f"{header[c]}={lv}" for lv in levels)
    feats = np.concatenate(cols, axis=1)
    feats = feats[np.argsort(order)]
    return SideInfo(mode, feats, columns=tuple(names))


def load(
    data_path,
    side_paths: Mapping[int, str | Path] | None = None,
    scale_targets: bool = True,
    scale_features: bool = True,
    max_categories: int = 50,
    extents: Sequence[int] | None = None,
) -> tuple[CooDataset, dict[int, SideInfo]]:
    """Read an observation file and optional per-mode side files."""
    header, rows = _read_rows(data_path)
    P = len(header) - 1
    if P < 1:
        raise DataError(f"{data_path}: need at least one index column and a target column")
    idx = np.array([[_int(v, data_path, line) for v in r[:P]] for line, r in rows], dtype=np.int64).reshape(-1, P)
    vals = np.array([_float(r[P], data_path, line) for line, r in rows], dtype=np.float64)
    side = {int(p): read_side_file(path, int(p), scale_features, max_categories) for p, path in (side_paths or {}).items()}
    for p in side:
        if not 0 <= p < P:
            raise DataError(f"side file given for mode {p}, data has {P} modes")
    if extents is None:
        extents = [side[p].n if p in side else (int(idx[:, p].max()) + 1 if len(idx) else 0) for p in range(P)]
    for p in range(P):
        bad = np.nonzero(idx[:, p] >= extents[p])[0]
        if len(bad):
            line = rows[bad[0]][0]
            raise DataError(f"{data_path}:{line}: unknown index {int(idx[bad[0], p])} for mode {p}")
    seen = {}
    for (line, _), key in zip(rows, map(tuple, idx)):
        if key in seen:
            raise DataError(f"{data_path}:{line}: duplicate index tuple {key} (first on line {seen[key]})")
        seen[key] = line
    transform = ZTransform.fit(vals) if scale_targets and len(vals) else None
    return CooDataset(tuple(extents), idx, vals, transform), side


def save(dataset: CooDataset, data_path, side: Mapping[int, SideInfo] | None = None, side_paths: Mapping[int, str | Path] | None = None):
    """Write observations (original scale) and side files; floats use round-trip repr."""
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"i{p + 1}" for p in range(dataset.n_modes)] + ["y"])
        for row, v in zip(dataset.indices, dataset.values):
            w.writerow([int(i) for i in row] + [repr(float(v))])
    for p, info in (side or {}).items():
        path = side_paths[p]
        feats = info.features.numpy() if hasattr(info.features, "numpy") else np.asarray(info.features)
        names = list(info.columns) if info.columns and len(info.columns) == feats.shape[1] else [f"f{j}" for j in range(feats.shape[1])]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index"] + [n.replace("=", "_") for n in names])
            for i, r in enumerate(feats):
                w.writerow([i] + [repr(float(x)) for x in r])


# ---------------------------------------------------------- synthetic data
@dataclass
class SynthData:
    dataset: CooDataset
    side: dict[int, SideInfo]
    truth: np.ndarray
    features: dict[int, np.ndarray] = field(default_factory=dict)


def _smooth_factor(x: np.ndarray, r_left: int, r_right: int, rng, bandwidth: float) -> np.ndarray:
    """Random smooth functions of the features, shape (r_left, n, r_right)."""
    n, c = x.shape
    n_terms = 8
    freq = rng.standard_normal((n_terms, c)) / bandwidth
    phase = rng.uniform(0, 2 * np.pi, n_terms)
    amp = rng.standard_normal((r_left, n_terms, r_right)) / np.sqrt(n_terms / 2)
    basis = np.cos(x @ freq.T + phase)  # n x n_terms
    return np.einsum("nt,atb->anb", basis, amp)


def synth(
    extents: Sequence[int],
    rank: int = 2,
    kind: str = "informative",
    noise: float = 0.0,
    seed: int = 0,
    side_dim: int = 3,
    observed_fraction: float = 1.0,
    index_effect: float = 0.0,
    bandwidth: float = 1.5,
    clusters: int | None = None,
    popularity: float = 0.0,
) -> SynthData:
    """Plant a tensor train whose factors are smooth functions of per-mode features.

    ``index_effect`` multiplies each factor entry by ``1 + index_effect * eps``
    with independent ``eps ~ N(0, 1)``, a component the features cannot explain.
    Side information handed to the model depends on ``kind``; the targets do
    not, so every kind sees the same observations for a given seed.

    With ``clusters`` set, the indices of each mode share that many distinct
    feature vectors (index ``i`` gets centre ``i mod clusters``), so features
    alone cannot tell indices of one cluster apart.

    ``popularity`` > 0 skews which cells are observed: each index gets a
    log-normal weight with that log-scale and a cell is drawn with probability
    proportional to the product of its index weights, leaving a tail of rarely
    observed indices.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown side-information kind {kind!r}")
    if not 0.0 < observed_fraction <= 1.0:
        raise ValueError("observed_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    extents = tuple(int(n) for n in extents)
    P = len(extents)
    ranks = [1] + [rank] * (P - 1) + [1]
    if popularity < 0:
        raise ValueError("popularity must be non-negative")
    if clusters is not None and clusters < 1:
        raise ValueError("clusters must be >= 1")
    feats = {}
    for p, n in enumerate(extents):
        if clusters is None:
            feats[p] = rng.standard_normal((n, side_dim))
        else:
            centres = rng.standard_normal((min(clusters, n), side_dim))
            feats[p] = centres[np.arange(n) % len(centres)]
    factors = []
    for p, n in enumerate(extents):
        f = _smooth_factor(feats[p], ranks[p], ranks[p + 1], rng, bandwidth)
        f = f * (1.0 + index_effect * rng.standard_normal(f.shape))
        factors.append(f)
    full = factors[0][0]
    for f in factors[1:]:
        full = np.tensordot(full, f, axes=([-1], [0]))
    full = full[..., 0]

    total = int(np.prod(extents))
    n_obs = max(1, int(round(observed_fraction * total)))
    if popularity > 0:
        pop_rng = np.random.default_rng([seed, 2])
        weights = np.ones(())
        for n in extents:
            weights = np.multiply.outer(weights, np.exp(popularity * pop_rng.standard_normal(n)))
        probs = weights.reshape(-1) / weights.sum()
        cells = np.sort(rng.choice(total, n_obs, replace=False, p=probs))
    else:
        cells = np.sort(rng.choice(total, n_obs, replace=False))
    idx = np.stack(np.unravel_index(cells, extents), axis=1).astype(np.int64)
    truth = full.reshape(-1)[cells]
    noise_draw = rng.standard_normal(n_obs)
    values = truth + noise * noise_draw

    side_rng = np.random.default_rng([seed, 1])
    if kind == "informative":
        side = {p: SideInfo(p, feats[p]) for p in range(P)}
    elif kind == "constant":
        side = {p: SideInfo(p, np.ones((n, side_dim))) for p, n in enumerate(extents)}
    elif kind == "gaussian-noise":
        side = {p: SideInfo(p, side_rng.standard_normal((n, side_dim))) for p, n in enumerate(extents)}
    else:
        side = {}
    return SynthData(CooDataset(extents, idx, values), side, truth, feats)
