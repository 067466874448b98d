"""KL divergences between Gaussian variational posteriors and priors.

Multivariate posteriors factor as a Kronecker product over the modes of a
core, so every quantity is assembled from per-mode pieces and no matrix of
the full vectorised size is ever formed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from ..tensor_ops import DTYPE, as_tensor, kron_modes_matvec, mode_product


def kl_univariate(mu_q, var_q, mu_p, var_p) -> torch.Tensor:
    """Sum over entries of KL(N(mu_q, var_q) || N(mu_p, var_p))."""
    mu_q, var_q = as_tensor(mu_q), as_tensor(var_q)
    mu_p, var_p = as_tensor(mu_p), as_tensor(var_p)
    if (var_q <= 0).any() or (var_p <= 0).any():
        raise ValueError("variances must be positive")
    ratio = var_q / var_p
    return ((mu_q - mu_p) ** 2 / (2 * var_p) + 0.5 * (ratio - 1 - torch.log(ratio))).sum()


def logdet_psd(a: torch.Tensor) -> torch.Tensor:
    """Log-determinant of a symmetric positive definite matrix via Cholesky."""
    chol, info = torch.linalg.cholesky_ex(a)
    if int(info) != 0:
        raise ValueError("matrix is not positive definite")
    return 2.0 * torch.log(torch.diagonal(chol)).sum()


def logdet_lowrank_plus_diag(a: torch.Tensor, sigma2) -> torch.Tensor:
    """``log det(sigma2 I_n + A A^T)`` for an n x m matrix A.

    Uses ``det(sigma2 I_n + A A^T) = sigma2^(n-m) det(sigma2 I_m + A^T A)`` so
    only the smaller Gram matrix is factorised.
    """
    a = as_tensor(a)
    sigma2 = as_tensor(sigma2)
    n, m = a.shape
    if m <= n:
        inner = a.T @ a + sigma2 * torch.eye(m, dtype=a.dtype)
        return (n - m) * torch.log(sigma2) + logdet_psd(inner)
    return logdet_psd(a @ a.T + sigma2 * torch.eye(n, dtype=a.dtype))


class ModeGaussian:
    """Per-mode prior precision and posterior covariance of a Kronecker factor."""

    n: int

    def trace(self) -> torch.Tensor:  # tr(prior precision @ posterior covariance)
        raise NotImplementedError

    def logdet_precision(self) -> torch.Tensor:
        raise NotImplementedError

    def logdet_covariance(self) -> torch.Tensor:
        raise NotImplementedError

    def apply_precision(self, x: torch.Tensor, axis: int) -> torch.Tensor:
        raise NotImplementedError


@dataclass
class DenseMode(ModeGaussian):
    """Dense prior precision with a lower-triangular posterior factor (cov = F F^T)."""

    precision: torch.Tensor
    factor: torch.Tensor

    @property
    def n(self) -> int:
        return self.precision.shape[0]

    def trace(self):
        return ((self.precision @ self.factor) * self.factor).sum()

    def logdet_precision(self):
        return logdet_psd(self.precision)

    def logdet_covariance(self):
        return 2.0 * torch.log(torch.abs(torch.diagonal(self.factor))).sum()

    def apply_precision(self, x, axis):
        return mode_product(x, self.precision, axis)


@dataclass
class LowRankMode(ModeGaussian):
    """Prior precision ``Phi Phi^T + s_p I`` and posterior covariance ``B B^T + s_q I``."""

    phi: torch.Tensor
    prior_diag: torch.Tensor
    b: torch.Tensor
    post_diag: torch.Tensor

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def trace(self):
        cross = self.phi.T @ self.b
        return (
            (cross * cross).sum()
            + self.prior_diag * (self.b * self.b).sum()
            + self.post_diag * (self.phi * self.phi).sum()
            + self.n * self.prior_diag * self.post_diag
        )

    def logdet_precision(self):
        return logdet_lowrank_plus_diag(self.phi, self.prior_diag)

    def logdet_covariance(self):
        return logdet_lowrank_plus_diag(self.b, self.post_diag)

    def apply_precision(self, x, axis):
        low = mode_product(mode_product(x, self.phi.T, axis), self.phi, axis)
        return low + self.prior_diag * x


def kl_kronecker(diff: torch.Tensor, modes: Sequence[ModeGaussian]) -> torch.Tensor:
    """KL summed over rank cells of a core with Kronecker-structured Gaussians.

    ``diff`` is the posterior-minus-prior mean, shape (R_left, n_1..n_Q, R_right);
    every rank cell shares the per-mode covariance factors in ``modes``.
    """
    diff = as_tensor(diff)
    sizes = [m.n for m in modes]
    if list(diff.shape[1:-1]) != sizes:
        raise ValueError(f"mean shape {tuple(diff.shape)} does not match mode sizes {sizes}")
    N = math.prod(sizes)
    cells = diff.shape[0] * diff.shape[-1]
    trace = torch.ones((), dtype=DTYPE)
    logdets = torch.zeros((), dtype=DTYPE)
    for m in modes:
        trace = trace * m.trace()
        logdets = logdets + (N // m.n) * (m.logdet_precision() + m.logdet_covariance())
    prec_diff = diff
    for j, m in enumerate(modes):
        prec_diff = m.apply_precision(prec_diff, 1 + j)
    quad = (diff * prec_diff).sum()
    return 0.5 * (cells * (trace - N - logdets) + quad)


def kl_multivariate_rff(mu_q, mu_p, b, post_diag, phi, prior_diag) -> torch.Tensor:
    """KL for one mode: posterior ``N(mu_q, B B^T + s_q I)``, prior precision ``Phi Phi^T + s_p I``.

    ``mu_q`` / ``mu_p`` may be vectors of length n or (n, k) matrices of k
    independent cells sharing the covariance.
    """
    mu_q, mu_p = as_tensor(mu_q), as_tensor(mu_p)
    diff = mu_q - mu_p
    if diff.dim() == 1:
        diff = diff[:, None]
    mode = LowRankMode(as_tensor(phi), as_tensor(prior_diag), as_tensor(b), as_tensor(post_diag))
    # cells laid out as (1, n, k) to reuse the Kronecker routine
    return kl_kronecker(diff[None], [mode])


def kron_cholesky(factors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Explicit Kronecker product of lower Cholesky factors (small sizes only)."""
    out = torch.linalg.cholesky(as_tensor(factors[0]))
    for f in factors[1:]:
        out = torch.kron(out, torch.linalg.cholesky(as_tensor(f)))
    return out


def kron_precision_quad(diff: torch.Tensor, mats: Sequence[torch.Tensor]) -> torch.Tensor:
    """``vec(diff)^T (kron mats) vec(diff)`` for a (1, n_1..n_Q, 1)-style tensor."""
    return (diff * kron_modes_matvec(diff, mats)).sum()
