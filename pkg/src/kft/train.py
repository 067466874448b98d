"""Block-coordinate ADAM training for the frequentist model.

Each epoch visits the parameter groups in a fixed order (cores, auxiliary
cores, kernel parameters).  While one group is updated every other tensor is
frozen, so the group's gradient is the plain partial derivative.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .model import KftModel
from .tensor_ops import as_tensor

GROUP_ORDER = ("cores", "aux", "theta")
TRACE_COLUMNS = ("epoch", "phase", "iteration", "objective", "mse", "reg")


class DivergenceError(RuntimeError):
    """Objective or gradient became non-finite; carries the trace so far."""

    def __init__(self, message: str, trace: list | None = None, label: str | None = None):
        super().__init__(message)
        self.trace = trace or []
        self.label = label


@dataclass
class ParamGroup:
    label: str
    names: list[str]
    params: list[torch.nn.Parameter]

    def snapshot(self) -> list[torch.Tensor]:
        return [p.detach().clone() for p in self.params]


def param_groups(model: KftModel) -> list[ParamGroup]:
    """Partition the trainable tensors of ``model``; empty groups are omitted."""
    named = dict(model.named_parameters())
    buckets: dict[str, list[str]] = {g: [] for g in GROUP_ORDER}
    for name in named:
        head = name.split(".")[0]
        if head == "cores":
            buckets["cores"].append(name)
        elif head in ("weights", "scales", "biases"):
            buckets["aux"].append(name)
        elif head == "log_lengthscale":
            buckets["theta"].append(name)
        else:
            raise ValueError(f"parameter {name} has no group")
    return [ParamGroup(g, buckets[g], [named[n] for n in buckets[g]]) for g in GROUP_ORDER if buckets[g]]


@dataclass
class TrainConfig:
    epochs: int = 20
    iterations_per_epoch: int | None = None
    batch_fraction: float = 1.0
    lr: float = 1e-2
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("batch_fraction must lie in (0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ValueError("iterations_per_epoch must be >= 1")


@dataclass
class TraceRow:
    epoch: int
    phase: str
    iteration: int
    objective: float
    mse: float
    reg: float


@dataclass
class TrainResult:
    model: object
    trace: list[TraceRow] = field(default_factory=list)


def batch_size(n: int, fraction: float) -> int:
    return max(1, min(n, math.ceil(n * fraction - 1e-9)))


def batch_sampler(n: int, fraction: float, seed: int, epoch: int = 0, stream: int = 0) -> Iterator[np.ndarray]:
    """One pass of shuffled, disjoint batches covering ``range(n)``."""
    if n < 1:
        raise ValueError("empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng([seed, epoch, stream])
    perm = rng.permutation(n)
    size = batch_size(n, fraction)
    for start in range(0, n, size):
        yield perm[start : start + size]


def _batches(n: int, config: TrainConfig, epoch: int, stream: int) -> Iterator[np.ndarray]:
    """Batches for one group phase, honouring the iteration cap."""
    if config.iterations_per_epoch is None:
        yield from batch_sampler(n, config.batch_fraction, config.seed, epoch, stream)
        return
    count, sweep = 0, 0
    while True:
        for b in batch_sampler(n, config.batch_fraction, config.seed, epoch, stream + 1000 * sweep):
            yield b
            count += 1
            if count == config.iterations_per_epoch:
                return
        sweep += 1


def _finite_grads(grads: Sequence[torch.Tensor], names: Sequence[str]):
    for g, name in zip(grads, names):
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")


def _split(data):
    if hasattr(data, "indices") and hasattr(data, "targets"):
        return np.asarray(data.indices), np.asarray(data.targets, dtype=np.float64)
    idx, y = data
    return np.asarray(idx), np.asarray(y, dtype=np.float64)


def gradients(model: KftModel, idx, y, group: ParamGroup, n_total: int | None = None) -> list[torch.Tensor]:
    """Gradient of the objective with respect to ``group`` only."""
    obj, _, _ = model.loss_terms(idx, y, n_total)
    grads = torch.autograd.grad(obj, group.params)
    _finite_grads(grads, group.names)
    return list(grads)


LossFn = Callable[[np.ndarray], tuple]


def block_coordinate_descent(
    groups: Sequence[ParamGroup],
    loss_fn: LossFn,
    n: int,
    config: TrainConfig,
    epochs: int | None = None,
    trace: list | None = None,
    epoch_offset: int = 0,
    on_epoch_end: Callable[[int], None] | None = None,
) -> list[TraceRow]:
    """Run frozen-block ADAM phases; ``loss_fn(batch)`` returns (objective, mse, reg)."""
    trace = [] if trace is None else trace
    optims = {
        g.label: torch.optim.Adam(g.params, lr=config.lr, betas=config.betas, eps=config.eps, foreach=False)
        for g in groups
    }
    for e in range(epochs or config.epochs):
        epoch = epoch_offset + e
        for s, group in enumerate(groups):
            opt = optims[group.label]
            for it, batch in enumerate(_batches(n, config, epoch, s)):
                obj, mse, reg = loss_fn(batch)
                row = TraceRow(epoch, group.label, it, float(obj.detach()), float(mse.detach()), float(reg.detach()))
                trace.append(row)
                if not math.isfinite(row.objective):
                    raise DivergenceError(f"objective diverged in {group.label} phase, epoch {epoch}", trace, group.label)
                grads = torch.autograd.grad(obj, group.params)
                try:
                    _finite_grads(grads, group.names)
                except FloatingPointError as err:
                    raise DivergenceError(str(err), trace, group.label) from err
                for p, g in zip(group.params, grads):
                    p.grad = g
                opt.step()
                for p in group.params:
                    p.grad = None
        if on_epoch_end is not None:
            on_epoch_end(epoch)
    return trace


def em_train(model: KftModel, data, config: TrainConfig, on_epoch_end: Callable[[int], None] | None = None) -> TrainResult:
    """Train ``model`` on ``data`` (a dataset or an (indices, targets) pair).

    ``on_epoch_end(epoch)`` is called after every epoch, e.g. for validation tracking.
    """
    idx, y = _split(data)
    n = len(y)
    if n == 0:
        raise ValueError("empty dataset")
    model.check_indices(idx)
    idx_t = torch.as_tensor(idx, dtype=torch.long)
    y_t = as_tensor(y)

    def loss_fn(batch):
        b = torch.as_tensor(batch, dtype=torch.long)
        return model.loss_terms(idx_t[b], y_t[b], n)

    trace = block_coordinate_descent(param_groups(model), loss_fn, n, config, on_epoch_end=on_epoch_end)
    return TrainResult(model, trace)


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow([r.epoch, r.phase, r.iteration, repr(r.objective), repr(r.mse), repr(r.reg)])


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TraceRow(int(r["epoch"]), r["phase"], int(r["iteration"]), float(r["objective"]), float(r["mse"]), float(r["reg"]))
        for r in rows
    ]
