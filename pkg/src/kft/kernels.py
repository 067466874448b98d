"""Side-information kernelization: exact Gram matrices and random Fourier features."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .tensor_ops import LAST, ShapeError, as_tensor, mode_product

KERNELS = ("rbf", "matern-0.5", "matern-1.5", "matern-2.5")

# Student-t degrees of freedom of the Matérn spectral measure (2 * nu).
_MATERN_DOF = {"matern-0.5": 1, "matern-1.5": 3, "matern-2.5": 5}

JITTER = 1e-10


@dataclass
class SideInfo:
    """Per-mode feature matrix D^p, one row per index of that mode."""

    mode: int
    features: torch.Tensor
    kind: str = "raw"
    columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = as_tensor(self.features)
        if self.features.dim() == 1:
            self.features = self.features[:, None]
        if self.features.dim() != 2:
            raise ShapeError("side information must be a matrix")
        if not torch.isfinite(self.features).all():
            raise ValueError(f"non-finite side information for mode {self.mode}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class KernelParams:
    kind: str = "rbf"
    lengthscale: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")


def _sqdist(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # exact differences keep k(x, x) == 1; the expanded form is only for large inputs
    if x.shape[0] * y.shape[0] * x.shape[1] <= 20_000_000:
        return ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    d2 = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return d2.clamp_min(0.0)


def kernel_matrix(x, y, kind: str, lengthscale) -> torch.Tensor:
    """k(x_i, y_j) for stationary kernels; ``lengthscale`` may carry gradients."""
    x = as_tensor(x)
    y = as_tensor(y)
    if kind not in KERNELS:
        raise ValueError(f"unknown kernel {kind!r}")
    ls = lengthscale if isinstance(lengthscale, torch.Tensor) else torch.tensor(float(lengthscale), dtype=x.dtype)
    d2 = _sqdist(x, y)
    if kind == "rbf":
        return torch.exp(-0.5 * d2 / ls**2)
    # sqrt has an infinite derivative at zero distance; route those entries around it
    pos = d2 > 0
    r = torch.where(pos, torch.sqrt(torch.where(pos, d2, torch.ones_like(d2))), torch.zeros_like(d2))
    if kind == "matern-0.5":
        return torch.exp(-r / ls)
    if kind == "matern-1.5":
        a = math.sqrt(3.0) * r / ls
        return (1.0 + a) * torch.exp(-a)
    a = math.sqrt(5.0) * r / ls
    return (1.0 + a + a * a / 3.0) * torch.exp(-a)


def gram(side, params: KernelParams | str = "rbf", lengthscale=None) -> torch.Tensor:
    """Gram matrix K = k(D, D) of a mode's side information."""
    feats = side.features if isinstance(side, SideInfo) else as_tensor(side)
    if feats.dim() == 1:
        feats = feats[:, None]
    if not torch.isfinite(feats).all():
        raise ValueError("non-finite feature entries")
    if isinstance(params, str):
        params = KernelParams(params)
    ls = params.lengthscale if lengthscale is None else lengthscale
    return kernel_matrix(feats, feats, params.kind, ls)


@dataclass(frozen=True)
class RffMap:
    """Frozen random Fourier feature map.

    ``base`` holds unit-lengthscale spectral draws; the frequencies are
    ``base / lengthscale`` so a lengthscale change rescales the same draws.
    """

    base: torch.Tensor
    kind: str
    lengthscale: float
    seed: int

    @property
    def count(self) -> int:
        return 2 * self.base.shape[0]

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    @property
    def frequencies(self) -> torch.Tensor:
        return self.base / self.lengthscale


def spectral_draws(kind: str, half: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((half, dim))
    if kind == "rbf":
        return z
    dof = _MATERN_DOF[kind]
    u = rng.chisquare(dof, size=(half, 1))
    return z / np.sqrt(u / dof)


def rff_sample(params: KernelParams, n_features: int, dim: int, seed: int) -> RffMap:
    if n_features < 2 or n_features % 2:
        raise ValueError(f"feature count must be even and >= 2, got {n_features}")
    base = torch.from_numpy(spectral_draws(params.kind, n_features // 2, dim, seed))
    return RffMap(base=base, kind=params.kind, lengthscale=params.lengthscale, seed=seed)


def rff_features(x, rff: RffMap, lengthscale=None) -> torch.Tensor:
    """phi(x) = sqrt(2/I) [cos(w^T x), sin(w^T x)] for a vector or a row batch."""
    x = as_tensor(x)
    single = x.dim() == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != rff.dim:
        raise ShapeError(f"input dimension {x.shape[-1]} does not match map dimension {rff.dim}")
    ls = rff.lengthscale if lengthscale is None else lengthscale
    proj = x @ rff.base.T / ls
    scale = math.sqrt(2.0 / rff.count)
    out = scale * torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1)
    return out[0] if single else out


def rff_gram_apply(v, phi, axis: int = LAST) -> torch.Tensor:
    """V x_axis (Phi Phi^T) as two thin products, without the n x n Gram."""
    v = as_tensor(v)
    phi = as_tensor(phi)
    return mode_product(mode_product(v, phi.T, axis), phi, axis)
