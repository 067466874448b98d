"""Closed-form expected log-likelihood and the ELBO.

Under a mean-field posterior the slices ``A_p`` of the kernelized cores at an
observed index are independent across cores and have independent entries.
With slice means ``a_p`` and entry variances ``w_p`` the first two moments of
the chain ``f = A_1 ... A_P`` follow exactly from

    E[f]   = a_1 ... a_P
    X_0    = [[1]]
    X_p    = a_p^T X_{p-1} a_p + diag( sum_r X_{p-1}[r, r] w_p[r, :] )
    E[f^2] = X_P

which reduces to the familiar product of per-core second moments when every
rank is one.
"""
from __future__ import annotations

import math

import torch

from ..model import chain_rows
from ..tensor_ops import DTYPE, as_tensor
from .state import VariationalKft


def chain_second_moment(means, excess) -> torch.Tensor:
    """E[f^2] for chains of independent-entry slices, each (B, R_left, R_right)."""
    x = torch.ones(means[0].shape[0], 1, 1, dtype=DTYPE)
    for a, w in zip(means, excess):
        diag = torch.diagonal(x, dim1=1, dim2=2)
        x = torch.einsum("bij,bik,bjl->bkl", x, a, a) + torch.diag_embed(torch.einsum("bi,bir->br", diag, w))
    return x[:, 0, 0]


def kernel_slice_moments(state: VariationalKft, k: int, idx: torch.Tensor, mats):
    """Mean and variance of the kernelized core slice ``(V_k x_2 T)`` at ``idx``."""
    m = state.model
    mean = m.gather(m.apply_side(m.cores[k], k, mats), k, idx)
    if state.family == "univariate":
        var = m.gather(m.apply_side(state.core_variance(k), k, mats, squared=True), k, idx)
    else:
        rv = torch.ones(idx.shape[0], dtype=DTYPE)
        for p in m.groups[k]:
            rv = rv * state.row_variance(p, mats)[idx[:, p]]
        var = rv[:, None, None].expand_as(mean)
    return mean, var


def aux_slice_moments(state: VariationalKft, kind: str, k: int, idx: torch.Tensor):
    m = state.model
    return m.gather(getattr(m, kind)[k], k, idx), m.gather(state.aux_variance(kind, k), k, idx)


def _chain(pairs):
    means = [a for a, _ in pairs]
    return chain_rows(means), chain_second_moment(means, [w for _, w in pairs])


def output_moments(state: VariationalKft, idx, mats=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Posterior mean and second moment of the model output at each index."""
    m = state.model
    idx = m.check_indices(idx)
    mats = m.side_matrices() if mats is None else mats
    kern = [kernel_slice_moments(state, k, idx, mats) for k in range(m.n_cores)]
    if m.variant == "vanilla":
        return _chain(kern)
    if m.variant == "wlr":
        pairs = []
        for k, (a, s) in enumerate(kern):
            a2, s2 = aux_slice_moments(state, "weights", k, idx)
            pairs.append((a2 * a, a2 * a2 * s + s2 * a * a + s2 * s))
        return _chain(pairs)
    e_s, e_s2 = _chain([aux_slice_moments(state, "scales", k, idx) for k in range(m.n_cores)])
    e_g, e_g2 = _chain(kern)
    e_b, e_b2 = _chain([aux_slice_moments(state, "biases", k, idx) for k in range(m.n_cores)])
    return e_s * e_g + e_b, e_s2 * e_g2 + 2 * e_s * e_g * e_b + e_b2


def expected_loglik(state: VariationalKft, idx, y, mats=None) -> torch.Tensor:
    """Sum over the batch of E_q[log N(y | f, noise_var)]."""
    y = as_tensor(y).reshape(-1)
    ef, ef2 = output_moments(state, idx, mats)
    s2 = state.prior.noise_var
    sq = y * y - 2 * y * ef + ef2
    return -(sq.sum() / (2 * s2)) - 0.5 * y.numel() * math.log(2 * math.pi * s2)


def _check(state: VariationalKft, variant: str, family: str):
    if state.variant != variant or state.family != family:
        raise ValueError(f"expected a {family} {variant} posterior, got {state.family} {state.variant}")


def recon_wlr_univariate(state, idx, y, mats=None):
    _check(state, "wlr", "univariate")
    return expected_loglik(state, idx, y, mats)


def recon_ls_univariate(state, idx, y, mats=None):
    _check(state, "ls", "univariate")
    return expected_loglik(state, idx, y, mats)


def recon_wlr_multivariate(state, idx, y, mats=None):
    _check(state, "wlr", "multivariate")
    return expected_loglik(state, idx, y, mats)


def recon_ls_multivariate(state, idx, y, mats=None):
    _check(state, "ls", "multivariate")
    return expected_loglik(state, idx, y, mats)


def elbo(state: VariationalKft, idx, y, n_total: int | None = None, mats=None) -> torch.Tensor:
    """Batch ELBO: expected log-likelihood minus the KL scaled by |batch| / N."""
    y = as_tensor(y).reshape(-1)
    if y.numel() == 0:
        raise ValueError("empty batch")
    n_total = n_total or y.numel()
    mats = state.model.side_matrices() if mats is None else mats
    return expected_loglik(state, idx, y, mats) - (y.numel() / n_total) * state.kl(mats)


def vi_loss_terms(state: VariationalKft, idx, y, n_total: int):
    """(negative ELBO per observation, mean-model MSE, KL per training point)."""
    y = as_tensor(y).reshape(-1)
    mats = state.model.side_matrices()
    ef, ef2 = output_moments(state, idx, mats)
    s2 = state.prior.noise_var
    recon = -((y * y - 2 * y * ef + ef2).sum() / (2 * s2)) - 0.5 * y.numel() * math.log(2 * math.pi * s2)
    kl = state.kl(mats)
    loss = -(recon - (y.numel() / n_total) * kl) / y.numel()
    return loss, ((ef - y) ** 2).mean(), kl / n_total
