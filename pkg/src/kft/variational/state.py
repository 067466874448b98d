"""Mean-field Gaussian posteriors over the cores of a :class:`KftModel`.

The wrapped model's tensors hold the posterior means; this module adds the
variance parameters.  Two families are available:

* ``univariate``: every core entry has its own variance (stored as a log).
* ``multivariate``: each rank cell of a core is Gaussian over its data axes
  with covariance ``kron_q F_q F_q^T``, one factor per mode.  Auxiliary cores
  stay univariate.  The factor is ``tril(B B^T) + diag(d)`` for dense modes and
  ``[B, s I]`` (covariance ``B B^T + s^2 I``) for modes in random-feature space.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..model import KftModel
from ..tensor_ops import DTYPE
from .kl import DenseMode, LowRankMode, ModeGaussian, kl_kronecker, kl_univariate

FAMILIES = ("univariate", "multivariate")
AUX_KINDS = ("weights", "scales", "biases")


@dataclass(frozen=True)
class PriorHyper:
    """Prior and likelihood hyperparameters.

    ``mean``/``var`` apply to the main cores (``var`` is also the prior
    variance of multivariate modes without side information), ``aux_mean``/
    ``aux_var`` to every auxiliary core.  Dense kernel priors use precision
    ``K + kernel_jitter I``; random-feature priors ``Phi Phi^T + rff_diag I``.
    """

    mean: float = 0.0
    var: float = 1.0
    aux_mean: float = 0.0
    aux_var: float = 1.0
    noise_var: float = 1.0
    kernel_jitter: float = 1e-6
    rff_diag: float = 1e-2

    def __post_init__(self):
        for name in ("var", "aux_var", "noise_var", "kernel_jitter", "rff_diag"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_json(self) -> dict:
        return asdict(self)


class VariationalKft(nn.Module):
    def __init__(
        self,
        model: KftModel,
        family: str = "univariate",
        prior: PriorHyper | None = None,
        init_var: float = 1e-3,
        cov_rank: int = 2,
        seed: int = 0,
    ):
        super().__init__()
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        if family == "multivariate" and model.space == "primal":
            raise ValueError("the multivariate family needs a dual-space model")
        if not init_var > 0:
            raise ValueError("init_var must be positive")
        self.model = model
        self.family = family
        self.prior = prior or PriorHyper()
        self.init_var = float(init_var)
        self.cov_rank = int(cov_rank)
        gen = torch.Generator().manual_seed(seed + 7919)

        log_v = math.log(init_var)
        self.core_logvar = nn.ParameterList()
        if family == "univariate":
            for c in model.cores:
                self.core_logvar.append(nn.Parameter(torch.full(c.shape, log_v, dtype=DTYPE)))
        self.cov_b = nn.ParameterDict()
        self.cov_logd = nn.ParameterDict()
        if family == "multivariate":
            for k, group in enumerate(model.groups):
                per_mode = init_var ** (1.0 / len(group))
                for p in group:
                    n = model.extents[p]
                    if self.is_lowrank(p):
                        self.cov_logd[str(p)] = nn.Parameter(torch.tensor(0.5 * math.log(per_mode), dtype=DTYPE))
                        scale = 0.1 * math.sqrt(per_mode / self.cov_rank)
                    else:
                        d = math.sqrt(per_mode)
                        self.cov_logd[str(p)] = nn.Parameter(torch.full((n,), math.log(d), dtype=DTYPE))
                        scale = 0.1 * math.sqrt(d / self.cov_rank)
                    self.cov_b[str(p)] = nn.Parameter(scale * torch.randn(n, self.cov_rank, generator=gen, dtype=DTYPE))
        self.aux_logvar = nn.ModuleDict()
        for kind in AUX_KINDS:
            plist = nn.ParameterList(
                nn.Parameter(torch.full(t.shape, log_v, dtype=DTYPE)) for t in getattr(model, kind)
            )
            self.aux_logvar[kind] = plist

    # -------------------------------------------------------------- structure
    @property
    def variant(self) -> str:
        return self.model.variant

    def is_lowrank(self, p: int) -> bool:
        return self.model.space == "dual-rff" and p in self.model.side_modes

    def core_variance(self, k: int) -> torch.Tensor:
        return torch.exp(self.core_logvar[k])

    def aux_variance(self, kind: str, k: int) -> torch.Tensor:
        return torch.exp(self.aux_logvar[kind][k])

    def post_diag(self, p: int) -> torch.Tensor:
        """Isotropic posterior diagonal ``s^2`` of a random-feature mode."""
        return torch.exp(2.0 * self.cov_logd[str(p)])

    def mode_factor(self, p: int) -> torch.Tensor:
        """Matrix F with posterior mode covariance F F^T."""
        b = self.cov_b[str(p)]
        if self.is_lowrank(p):
            n = b.shape[0]
            return torch.cat([b, torch.exp(self.cov_logd[str(p)]) * torch.eye(n, dtype=DTYPE)], dim=1)
        return torch.tril(b @ b.T) + torch.diag(torch.exp(self.cov_logd[str(p)]))

    def mode_covariance(self, p: int) -> torch.Tensor:
        f = self.mode_factor(p)
        return f @ f.T

    def row_variance(self, p: int, mats) -> torch.Tensor:
        """Variance of each entry of ``T_p v`` for one rank cell, shape (n_p,)."""
        if self.is_lowrank(p):
            phi = mats[p]
            low = phi @ (phi.T @ self.cov_b[str(p)])
            gram_sq = ((phi @ (phi.T @ phi)) * phi).sum(1)
            return (low * low).sum(1) + self.post_diag(p) * gram_sq
        f = self.mode_factor(p)
        if p in mats:
            f = mats[p] @ f
        return (f * f).sum(1)

    def mode_gaussian(self, p: int, mats) -> ModeGaussian:
        if self.is_lowrank(p):
            prior_diag = torch.tensor(self.prior.rff_diag, dtype=DTYPE)
            return LowRankMode(mats[p], prior_diag, self.cov_b[str(p)], self.post_diag(p))
        n = self.model.extents[p]
        eye = torch.eye(n, dtype=DTYPE)
        if p in mats:
            precision = mats[p] + self.prior.kernel_jitter * eye
        else:
            precision = eye / self.prior.var
        return DenseMode(precision, self.mode_factor(p))

    # --------------------------------------------------------------------- KL
    def kl(self, mats=None) -> torch.Tensor:
        m = self.model
        mats = m.side_matrices() if mats is None else mats
        pr = self.prior
        total = torch.zeros((), dtype=DTYPE)
        for k, core in enumerate(m.cores):
            if self.family == "univariate":
                total = total + kl_univariate(core, self.core_variance(k), pr.mean, pr.var)
            else:
                modes = [self.mode_gaussian(p, mats) for p in m.groups[k]]
                total = total + kl_kronecker(core - pr.mean, modes)
        for kind in AUX_KINDS:
            for k, t in enumerate(getattr(m, kind)):
                total = total + kl_univariate(t, self.aux_variance(kind, k), pr.aux_mean, pr.aux_var)
        return total

    # --------------------------------------------------------------- sampling
    def sample_params(self, generator: torch.Generator, n_samples: int | None = None) -> dict[str, list[torch.Tensor]]:
        """Draw every core from q; with ``n_samples`` a leading sample axis is added."""
        m = self.model
        out = {"cores": [sample_core(self, k, generator, n_samples) for k in range(m.n_cores)]}
        for kind in AUX_KINDS:
            out[kind] = [
                _gaussian_draw(t, self.aux_variance(kind, k), generator, n_samples) for k, t in enumerate(getattr(m, kind))
            ]
        return out


def _gaussian_draw(mean, var, generator, n_samples=None):
    shape = tuple(mean.shape) if n_samples is None else (n_samples, *mean.shape)
    z = torch.randn(shape, generator=generator, dtype=DTYPE)
    return mean + torch.sqrt(var) * z


def kronecker_sample(mean: torch.Tensor, factors, generator: torch.Generator, n_samples: int | None = None) -> torch.Tensor:
    """``mean + z x_{q+1} F_q`` with standard normal z; covariance ``kron_q F_q F_q^T`` per rank cell."""
    lead = () if n_samples is None else (n_samples,)
    shape = (*lead, mean.shape[0], *[f.shape[1] for f in factors], mean.shape[-1])
    t = torch.randn(shape, generator=generator, dtype=DTYPE)
    off = len(lead) + 1
    for j, f in enumerate(factors):
        t = torch.movedim(torch.tensordot(t, f, dims=([off + j], [1])), -1, off + j)
    return mean + t


def sample_core(state: VariationalKft, k: int, generator: torch.Generator, n_samples: int | None = None) -> torch.Tensor:
    """One draw (or ``n_samples`` draws) of core ``k`` from the posterior."""
    mean = state.model.cores[k]
    if state.family == "univariate":
        return _gaussian_draw(mean, state.core_variance(k), generator, n_samples)
    factors = [state.mode_factor(p) for p in state.model.groups[k]]
    return kronecker_sample(mean, factors, generator, n_samples)
