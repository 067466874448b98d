"""Metrics, random hyperparameter search and the side-information ablation."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch

from .data import CooDataset, SynthData, split, synth
from .kernels import KERNELS, SideInfo
from .metrics import Metrics, r2, rmse
from .model import KftModel
from .train import DivergenceError, TrainConfig, em_train

__all__ = [
    "ABLATION_CONDITIONS",
    "AblationDesign",
    "AblationResult",
    "Metrics",
    "SearchError",
    "SearchResult",
    "SearchSpace",
    "Trial",
    "ablation_suite",
    "evaluate_split",
    "r2",
    "random_search",
    "rmse",
]


class SearchError(RuntimeError):
    pass


# ---------------------------------------------------------------- search
@dataclass(frozen=True)
class SearchSpace:
    """Bounds for uniform random search; continuous positive ranges are sampled on a log scale."""

    batch_fraction: tuple[float, float] = (0.1, 1.0)
    lr: tuple[float, float] = (1e-3, 1e-1)
    rank: tuple[int, int] = (2, 8)
    reg: tuple[float, float] = (1e-6, 1e-1)
    noise_var: tuple[float, float] = (1e-3, 1.0)
    prior_var: tuple[float, float] = (1e-2, 10.0)
    kernels: tuple[str, ...] = ("rbf", "matern-0.5", "matern-1.5")

    def __post_init__(self):
        for name in ("batch_fraction", "lr", "rank", "reg", "noise_var", "prior_var"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
            if lo <= 0:
                raise ValueError(f"{name}: bounds must be positive")
        if self.batch_fraction[1] > 1.0:
            raise ValueError("batch_fraction upper bound must be <= 1")
        if not self.kernels or any(k not in KERNELS for k in self.kernels):
            raise ValueError(f"kernels must be a non-empty subset of {KERNELS}")

    def sample(self, rng: np.random.Generator) -> dict:
        def log_uniform(bounds):
            lo, hi = bounds
            return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

        return {
            "batch_fraction": float(rng.uniform(*self.batch_fraction)),
            "lr": log_uniform(self.lr),
            "rank": int(rng.integers(self.rank[0], self.rank[1] + 1)),
            "reg": log_uniform(self.reg),
            "noise_var": log_uniform(self.noise_var),
            "prior_var": log_uniform(self.prior_var),
            "kernel": str(self.kernels[int(rng.integers(len(self.kernels)))]),
        }

    def to_json(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: Mapping) -> "SearchSpace":
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass
class Trial:
    index: int
    params: dict
    metrics: dict | None
    score: float | None
    wall_time: float
    error: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SearchResult:
    best: Trial
    trials: list[Trial]


def evaluate_split(model: KftModel, data: CooDataset) -> Metrics:
    with torch.no_grad():
        pred = model.predict(data.indices).numpy()
    return Metrics.of(pred, data.targets)


def _run_trial(params, dataset, parts, side, variant, space, epochs, iterations, seed, bayesian):
    train, val = dataset.subset(parts.train), dataset.subset(parts.val)
    model = KftModel(
        dataset.extents,
        variant=variant,
        space=space,
        rank=params["rank"],
        side=side,
        kernel=params["kernel"],
        reg=0.0 if bayesian else params["reg"],
        seed=seed,
    )
    config = TrainConfig(
        epochs=epochs,
        iterations_per_epoch=iterations,
        batch_fraction=params["batch_fraction"],
        lr=params["lr"],
        seed=seed,
    )
    if not bayesian:
        em_train(model, train, config)
        m = evaluate_split(model, val)
        return m.to_json(), m.r2
    from .variational import PriorHyper, VariationalKft, calibration, mean_prediction, posterior_predictive, vi_train

    prior = PriorHyper(var=params["prior_var"], aux_var=params["prior_var"], noise_var=params["noise_var"])
    state = VariationalKft(model, "univariate", prior=prior, seed=seed)
    vi_train(state, train, config)
    samples = posterior_predictive(state, val.indices, 100, seed)
    rep = calibration(samples, val.targets, mean_pred=mean_prediction(state, val.indices))
    return {**Metrics.of(mean_prediction(state, val.indices), val.targets).to_json(), "xi": rep.total, "eta": rep.eta}, -rep.eta


def random_search(
    space: SearchSpace,
    dataset: CooDataset,
    n_iters: int,
    seed: int,
    *,
    side: Mapping[int, SideInfo] | None = None,
    variant: str = "wlr",
    model_space: str = "dual-exact",
    epochs: int = 10,
    iterations_per_epoch: int | None = None,
    bayesian: bool = False,
    log_path=None,
) -> SearchResult:
    """Train ``n_iters`` uniformly sampled configurations and keep the best on the validation split.

    Frequentist trials are ranked by validation R^2, Bayesian ones by the
    calibration score ``total deviation - R^2`` (lower is better).  Trials that
    diverge are logged and skipped.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    rng = np.random.default_rng(seed)
    parts = split(dataset, seed)
    trials = []
    log = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for i in range(n_iters):
            params = space.sample(rng)
            start = time.perf_counter()
            try:
                metrics, score = _run_trial(
                    params, dataset, parts, side, variant, model_space, epochs, iterations_per_epoch, seed + i, bayesian
                )
                error = None
            except (DivergenceError, FloatingPointError, ValueError) as exc:
                metrics, score, error = None, None, f"{type(exc).__name__}: {exc}"
            trial = Trial(i, params, metrics, score, time.perf_counter() - start, error)
            trials.append(trial)
            if log is not None:
                log.write(json.dumps(trial.to_json(), sort_keys=True) + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    ok = [t for t in trials if t.score is not None and math.isfinite(t.score)]
    if not ok:
        raise SearchError(f"all {n_iters} trials failed")
    best = max(ok, key=lambda t: (t.score, -t.index))
    return SearchResult(best, trials)


# ---------------------------------------------------------------- ablation
ABLATION_CONDITIONS = (
    # name, variant, side-information kind handed to the model
    ("vanilla-no-side", "vanilla", "none"),
    ("vanilla-side", "vanilla", "informative"),
    ("wlr-constant", "wlr", "constant"),
    ("wlr-noise", "wlr", "gaussian-noise"),
    ("wlr-informative", "wlr", "informative"),
)


@dataclass(frozen=True)
class AblationDesign:
    """Synthetic data and training budget shared by every ablation condition."""

    extents: tuple[int, ...] = (15, 15, 15)
    planted_rank: int = 2
    noise: float = 0.05
    observed_fraction: float = 0.1
    index_effect: float = 0.5
    clusters: int | None = 5
    popularity: float = 1.0
    rank: int = 2
    lengthscale: float = 0.5
    reg: float = 1e-3
    epochs: int = 25
    iterations_per_epoch: int = 50
    batch_fraction: float = 0.5
    lr: float = 0.03
    n_seeds: int = 5

    def data(self, kind: str, seed: int) -> SynthData:
        return synth(
            self.extents,
            rank=self.planted_rank,
            kind=kind,
            noise=self.noise,
            seed=seed,
            observed_fraction=self.observed_fraction,
            index_effect=self.index_effect,
            clusters=self.clusters,
            popularity=self.popularity,
        )


@dataclass
class AblationResult:
    design: AblationDesign
    seeds: tuple[int, ...]
    r2: dict[str, list[float]] = field(default_factory=dict)

    def summary(self) -> dict[str, tuple[float, float]]:
        """Mean and sample standard deviation of test R^2 per condition."""
        return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0) for k, v in self.r2.items()}

    def margins(self, better: str, worse: str) -> list[float]:
        return [a - b for a, b in zip(self.r2[better], self.r2[worse])]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition", *[f"seed{s}" for s in self.seeds], "mean", "sd"])
            for name, (mean, sd) in self.summary().items():
                w.writerow([name, *[repr(v) for v in self.r2[name]], repr(mean), repr(sd)])


def train_with_validation(model: KftModel, train: CooDataset, val: CooDataset, config: TrainConfig) -> float:
    """Train and keep the parameters of the epoch with the best validation R^2.

    A divergence ends training early; the best parameters seen so far are kept.
    Returns the best validation R^2.
    """
    best = {"r2": -math.inf, "state": None}

    def track(epoch):
        score = evaluate_split(model, val).r2
        if math.isfinite(score) and score > best["r2"]:
            best["r2"] = score
            best["state"] = {k: v.detach().clone() for k, v in model.state_dict().items()}

    try:
        em_train(model, train, config, on_epoch_end=track)
    except DivergenceError:
        if best["state"] is None:
            raise
    if best["state"] is not None:
        model.load_state_dict(best["state"])
    return best["r2"]


def run_condition(design: AblationDesign, variant: str, kind: str, seed: int) -> float:
    """Test R^2 of one condition on one seed (early-stopped on the validation split)."""
    data = design.data(kind, seed)
    ds = data.dataset
    parts = split(ds, seed)
    model = KftModel(
        ds.extents,
        variant=variant,
        space="dual-exact",
        rank=design.rank,
        side=data.side,
        lengthscale=design.lengthscale,
        reg=design.reg,
        seed=seed,
    )
    config = TrainConfig(
        epochs=design.epochs,
        iterations_per_epoch=design.iterations_per_epoch,
        batch_fraction=design.batch_fraction,
        lr=design.lr,
        seed=seed,
    )
    train_with_validation(model, ds.subset(parts.train), ds.subset(parts.val), config)
    return evaluate_split(model, ds.subset(parts.test)).r2


def ablation_suite(seed: int = 0, design: AblationDesign | None = None, conditions: Sequence = ABLATION_CONDITIONS) -> AblationResult:
    """Test R^2 of every condition over ``design.n_seeds`` consecutive seeds starting at ``seed``."""
    design = design or AblationDesign()
    seeds = tuple(range(seed, seed + design.n_seeds))
    result = AblationResult(design, seeds)
    for name, variant, kind in conditions:
        result.r2[name] = [run_condition(design, variant, kind, s) for s in seeds]
    return result


def with_overrides(design: AblationDesign, **kw) -> AblationDesign:
    return replace(design, **kw)
