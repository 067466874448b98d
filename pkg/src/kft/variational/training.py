"""Two-phase training of a variational posterior: modes first, then variances."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from ..train import ParamGroup, TraceRow, TrainConfig, _split, block_coordinate_descent
from ..tensor_ops import as_tensor
from .recon import vi_loss_terms
from .state import AUX_KINDS, VariationalKft


def _group(label: str, named: list[tuple[str, torch.nn.Parameter]]) -> ParamGroup | None:
    if not named:
        return None
    return ParamGroup(label, [n for n, _ in named], [p for _, p in named])


def vi_param_groups(state: VariationalKft) -> tuple[list[ParamGroup], list[ParamGroup]]:
    """(mean-phase groups, variance-phase groups), empty groups dropped."""
    m = state.model
    means = [
        _group("mean-cores", [(f"cores.{k}", p) for k, p in enumerate(m.cores)]),
        _group("mean-aux", [(f"{kind}.{k}", p) for kind in AUX_KINDS for k, p in enumerate(getattr(m, kind))]),
        _group("theta", [(f"log_lengthscale.{k}", p) for k, p in m.log_lengthscale.items()]),
    ]
    core_vars = [(f"core_logvar.{k}", p) for k, p in enumerate(state.core_logvar)]
    core_vars += [(f"cov_b.{k}", p) for k, p in state.cov_b.items()]
    core_vars += [(f"cov_logd.{k}", p) for k, p in state.cov_logd.items()]
    variances = [
        _group("var-cores", core_vars),
        _group("var-aux", [(f"aux_logvar.{kind}.{k}", p) for kind in AUX_KINDS for k, p in enumerate(state.aux_logvar[kind])]),
    ]
    return [g for g in means if g], [g for g in variances if g]


@dataclass
class VariationalResult:
    state: VariationalKft
    trace: list[TraceRow] = field(default_factory=list)


def vi_train(state: VariationalKft, data, config: TrainConfig) -> VariationalResult:
    """Maximise the ELBO: ``config.epochs`` of mean updates, then as many of variance updates."""
    idx, y = _split(data)
    n = len(y)
    if n == 0:
        raise ValueError("empty dataset")
    state.model.check_indices(idx)
    idx_t = torch.as_tensor(idx, dtype=torch.long)
    y_t = as_tensor(y)

    def loss_fn(batch):
        b = torch.as_tensor(batch, dtype=torch.long)
        return vi_loss_terms(state, idx_t[b], y_t[b], n)

    mean_groups, var_groups = vi_param_groups(state)
    trace = block_coordinate_descent(mean_groups, loss_fn, n, config)
    block_coordinate_descent(var_groups, loss_fn, n, config, trace=trace, epoch_offset=config.epochs)
    return VariationalResult(state, trace)
