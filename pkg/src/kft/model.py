"""Frequentist Kernel Fried Tensor model.

A model is a tensor train whose cores may carry per-mode side information.
Three variants are supported:

* ``vanilla``: ``prod x_{-1} (V_p x_2 T_p)``
* ``wlr`` (weighted latent regression): ``prod x_{-1} (V'_p o (V_p x_2 T_p))``
* ``ls`` (latent scaling): ``(prod V^s_p) o (prod (V_p x_2 T_p)) + prod V^b_p``

``T_p`` is the raw feature matrix (``primal``), the Gram matrix
(``dual-exact``) or the random-feature approximation ``Phi Phi^T``
(``dual-rff``).  Modes without side information use the identity.

Cores are stored as (R_left, n_1, ..., n_Q, R_right) where Q > 1 for a joint
core spanning several adjacent modes.  Predictions are evaluated only at the
requested index tuples.
"""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import torch
from torch import nn

from .kernels import KERNELS, KernelParams, RffMap, SideInfo, gram, rff_features, spectral_draws
from .tensor_ops import DTYPE, ShapeError, as_tensor, mode_product

VARIANTS = ("vanilla", "wlr", "ls")
SPACES = ("primal", "dual-exact", "dual-rff")


def _per_core(value, n: int, name: str) -> list[float]:
    if isinstance(value, (int, float)):
        vals = [float(value)] * n
    else:
        vals = [float(v) for v in value]
        if len(vals) != n:
            raise ValueError(f"{name} needs one value per core ({n}), got {len(vals)}")
    if any(v < 0 for v in vals):
        raise ValueError(f"{name} must be non-negative")
    return vals


def _ranks(rank, n_cores: int) -> list[int]:
    if isinstance(rank, int):
        inner = [rank] * (n_cores - 1)
    else:
        inner = [int(r) for r in rank]
        if len(inner) != n_cores - 1:
            raise ValueError(f"expected {n_cores - 1} inner ranks, got {len(inner)}")
    if any(r < 1 for r in inner):
        raise ValueError("ranks must be positive")
    return [1, *inner, 1]


class KftModel(nn.Module):
    """Tensor-train regression model with optional side information per mode."""

    def __init__(
        self,
        extents: Sequence[int],
        *,
        variant: str = "wlr",
        space: str = "dual-exact",
        rank: int | Sequence[int] = 5,
        groups: Sequence[Sequence[int]] | None = None,
        side: Mapping[int, SideInfo] | Sequence[SideInfo] | None = None,
        kernel: str | Mapping[int, str] = "rbf",
        lengthscale: float | Mapping[int, float] = 1.0,
        rff_features: int = 256,
        scale_rank: int | Sequence[int] | None = None,
        bias_rank: int | Sequence[int] | None = None,
        reg: float | Sequence[float] = 0.0,
        reg_aux: float | Sequence[float] = 0.0,
        seed: int = 0,
        aux_noise: float = 1e-2,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if space not in SPACES:
            raise ValueError(f"unknown space {space!r}")
        self.extents = tuple(int(n) for n in extents)
        if not self.extents or any(n < 1 for n in self.extents):
            raise ValueError("extents must be positive")
        self.variant = variant
        self.space = space
        self.seed = int(seed)
        self.rff_count = int(rff_features)

        P = len(self.extents)
        self.groups = [tuple(g) for g in (groups or [(p,) for p in range(P)])]
        flat = [m for g in self.groups for m in g]
        if flat != list(range(P)):
            raise ValueError("core groups must cover every mode once, contiguously and in order")
        n_cores = len(self.groups)
        self.ranks = _ranks(rank, n_cores)
        self.scale_ranks = _ranks(scale_rank if scale_rank is not None else self.ranks[1:-1], n_cores)
        self.bias_ranks = _ranks(bias_rank if bias_rank is not None else self.ranks[1:-1], n_cores)
        self.reg = _per_core(reg, n_cores, "reg")
        self.reg_aux = _per_core(reg_aux, n_cores, "reg_aux")

        if side is None:
            side = {}
        elif not isinstance(side, Mapping):
            side = {s.mode: s for s in side}
        self.side_modes = tuple(sorted(side))
        for p in self.side_modes:
            info = side[p] if isinstance(side[p], SideInfo) else SideInfo(p, side[p])
            if info.n != self.extents[p]:
                raise ShapeError(f"side information for mode {p} has {info.n} rows, extent is {self.extents[p]}")
            self.register_buffer(f"side_{p}", info.features.clone())

        kinds = kernel if isinstance(kernel, Mapping) else {p: kernel for p in self.side_modes}
        scales = lengthscale if isinstance(lengthscale, Mapping) else {p: lengthscale for p in self.side_modes}
        self.kernel_kind = {p: kinds.get(p, "rbf") for p in self.side_modes}
        for p, kind in self.kernel_kind.items():
            if kind not in KERNELS:
                raise ValueError(f"unknown kernel {kind!r} for mode {p}")
        self.log_lengthscale = nn.ParameterDict()
        if space != "primal":
            for p in self.side_modes:
                ls = float(scales.get(p, 1.0))
                KernelParams(self.kernel_kind[p], ls)
                self.log_lengthscale[str(p)] = nn.Parameter(torch.tensor(math.log(ls), dtype=DTYPE))
        if space == "dual-rff":
            if self.rff_count < 2 or self.rff_count % 2:
                raise ValueError("rff_features must be even and >= 2")
            for p in self.side_modes:
                base = spectral_draws(self.kernel_kind[p], self.rff_count // 2, self.side(p).shape[1], self.seed * 1009 + p)
                self.register_buffer(f"rff_base_{p}", torch.from_numpy(base))

        self.cores = nn.ParameterList()
        self.weights = nn.ParameterList()
        self.scales = nn.ParameterList()
        self.biases = nn.ParameterList()
        self._initialise(aux_noise)

    # ------------------------------------------------------------------ wiring
    @property
    def n_cores(self) -> int:
        return len(self.groups)

    @property
    def n_modes(self) -> int:
        return len(self.extents)

    def side(self, p: int) -> torch.Tensor | None:
        return getattr(self, f"side_{p}", None) if p in self.side_modes else None

    def lengthscale(self, p: int) -> torch.Tensor:
        return torch.exp(self.log_lengthscale[str(p)])

    def rff_map(self, p: int) -> RffMap:
        return RffMap(getattr(self, f"rff_base_{p}"), self.kernel_kind[p], float(self.lengthscale(p).detach()), self.seed * 1009 + p)

    def middle_extent(self, p: int) -> int:
        if self.space == "primal" and p in self.side_modes:
            return self.side(p).shape[1]
        return self.extents[p]

    def core_shape(self, k: int, ranks: Sequence[int] | None = None, data_indexed: bool = False) -> tuple[int, ...]:
        ranks = ranks or self.ranks
        mids = [self.extents[p] if data_indexed else self.middle_extent(p) for p in self.groups[k]]
        return (ranks[k], *mids, ranks[k + 1])

    def side_matrices(self) -> dict[int, torch.Tensor]:
        """Per-mode side operator: D (primal), K (dual-exact) or Phi (dual-rff)."""
        mats = {}
        for p in self.side_modes:
            if self.space == "primal":
                mats[p] = self.side(p)
            elif self.space == "dual-exact":
                mats[p] = gram(self.side(p), self.kernel_kind[p], lengthscale=self.lengthscale(p))
            else:
                mats[p] = rff_features(self.side(p), self.rff_map(p), lengthscale=self.lengthscale(p))
        return mats

    def apply_side(self, t: torch.Tensor, k: int, mats=None, squared: bool = False) -> torch.Tensor:
        """Map a core's middle axes through the side operators.

        With ``squared=True`` the elementwise-squared operator is used, which
        maps per-entry variances of ``V`` to variances of ``V x_2 T``.
        """
        if mats is None:
            mats = self.side_matrices()
        for j, p in enumerate(self.groups[k]):
            if p not in mats:
                continue
            axis = 1 + j
            m = mats[p]
            if self.space == "dual-rff":
                if squared:
                    t = _rff_squared_apply(t, m, axis)
                else:
                    t = mode_product(mode_product(t, m.T, axis), m, axis)
            else:
                t = mode_product(t, m * m if squared else m, axis)
        return t

    def gather(self, t: torch.Tensor, k: int, idx: torch.Tensor) -> torch.Tensor:
        """Slices of a data-indexed core at batch indices, shape (B, R_left, R_right)."""
        sel = tuple(idx[:, p] for p in self.groups[k])
        return t[(slice(None), *sel)].permute(1, 0, 2)

    def check_indices(self, idx) -> torch.Tensor:
        idx = torch.as_tensor(idx, dtype=torch.long)
        if idx.dim() != 2 or idx.shape[1] != self.n_modes:
            raise ShapeError(f"indices must have shape (B, {self.n_modes})")
        ext = torch.tensor(self.extents)
        bad = (idx < 0) | (idx >= ext)
        if bad.any():
            row = int(bad.any(1).nonzero()[0])
            raise IndexError(f"index {idx[row].tolist()} outside extents {self.extents}")
        return idx

    # ----------------------------------------------------------------- forward
    def predict(self, idx, params: Mapping[str, Sequence[torch.Tensor]] | None = None, mats=None) -> torch.Tensor:
        """Model output at each index tuple of ``idx`` (shape (B, P))."""
        idx = self.check_indices(idx)
        params = params or {}
        cores = params.get("cores", self.cores)
        if mats is None:
            mats = self.side_matrices()
        eff = [self.gather(self.apply_side(cores[k], k, mats), k, idx) for k in range(self.n_cores)]
        if self.variant == "vanilla":
            return chain_rows(eff)
        if self.variant == "wlr":
            weights = params.get("weights", self.weights)
            return chain_rows([e * self.gather(w, k, idx) for k, (e, w) in enumerate(zip(eff, weights))])
        scales = params.get("scales", self.scales)
        biases = params.get("biases", self.biases)
        s = chain_rows([self.gather(c, k, idx) for k, c in enumerate(scales)])
        b = chain_rows([self.gather(c, k, idx) for k, c in enumerate(biases)])
        return s * chain_rows(eff) + b

    def forward(self, idx):
        return self.predict(idx)

    def regularization(self, mats=None) -> torch.Tensor:
        if self.space == "primal":
            return reg_primal(self)
        if mats is None:
            mats = self.side_matrices()
        if self.variant == "wlr":
            return reg_dual_wlr(self, mats)
        if self.variant == "ls":
            return reg_dual_ls(self, mats)
        return reg_dual_vanilla(self, mats)

    def loss_terms(self, idx, y, n_total: int | None = None):
        """(objective, mse, scaled regularizer) as tensors."""
        y = as_tensor(y)
        if y.numel() == 0:
            raise ValueError("empty batch")
        n_total = n_total or y.numel()
        mats = self.side_matrices()
        pred = self.predict(idx, mats=mats)
        mse = ((pred - y) ** 2).mean()
        reg = self.regularization(mats) * (y.numel() / n_total)
        return mse + reg, mse, reg

    # ------------------------------------------------------------------- init
    def _side_rms(self, p: int) -> float:
        """Root-mean-square row norm of the mode's side operator at init."""
        with torch.no_grad():
            m = self.side_matrices().get(p) if p in self.side_modes else None
            if m is None:
                return 1.0
            if self.space == "dual-rff":
                rows = ((m @ (m.T @ m)) * m).sum(1)
            else:
                rows = (m * m).sum(1)
            rms = float(rows.mean().sqrt())
        return rms if rms > 0 else 1.0

    def _initialise(self, aux_noise: float):
        gen = torch.Generator().manual_seed(self.seed)
        R = max(self.ranks)
        for k in range(self.n_cores):
            std = math.sqrt(1.0 / R)
            for p in self.groups[k]:
                std /= self._side_rms(p)
            shape = self.core_shape(k)
            self.cores.append(nn.Parameter(std * torch.randn(shape, generator=gen, dtype=DTYPE)))
        if self.variant == "wlr":
            for k in range(self.n_cores):
                self.weights.append(nn.Parameter(torch.ones(self.core_shape(k, data_indexed=True), dtype=DTYPE)))
        elif self.variant == "ls":
            for k in range(self.n_cores):
                shape = self.core_shape(k, self.scale_ranks, data_indexed=True)
                # constant 1/R_right cores chain to exactly 1
                neutral = 1.0 / self.scale_ranks[k + 1]
                noise = aux_noise * neutral * torch.randn(shape, generator=gen, dtype=DTYPE)
                self.scales.append(nn.Parameter(neutral + noise))
            for k in range(self.n_cores):
                shape = self.core_shape(k, self.bias_ranks, data_indexed=True)
                self.biases.append(nn.Parameter(aux_noise * torch.randn(shape, generator=gen, dtype=DTYPE)))

    def wiring(self) -> dict:
        """JSON-serialisable description of everything except tensor values."""
        return {
            "extents": list(self.extents),
            "variant": self.variant,
            "space": self.space,
            "groups": [list(g) for g in self.groups],
            "ranks": self.ranks[1:-1],
            "scale_ranks": self.scale_ranks[1:-1],
            "bias_ranks": self.bias_ranks[1:-1],
            "side_modes": list(self.side_modes),
            "kernel": {str(p): k for p, k in self.kernel_kind.items()},
            "rff_features": self.rff_count,
            "reg": self.reg,
            "reg_aux": self.reg_aux,
            "seed": self.seed,
        }


def _rff_squared_apply(t: torch.Tensor, phi: torch.Tensor, axis: int) -> torch.Tensor:
    """``t x_axis (Phi . Phi)^T x_axis (Phi . Phi)`` without the I^2-wide Khatri-Rao matrix.

    The inner product collapses to ``Phi^T diag(t) Phi`` per fibre, so only an
    I x I matrix is formed for each fibre.
    """
    moved = t.movedim(axis, -1)
    inner = torch.einsum("...j,ja,jb->...ab", moved, phi, phi)
    out = torch.einsum("...ab,ia,ib->...i", inner, phi, phi)
    return out.movedim(-1, axis)


def chain_rows(slices: Sequence[torch.Tensor]) -> torch.Tensor:
    """Contract per-sample core slices (B, R_l, R_r) along the train."""
    h = slices[0][:, 0, :]
    for g in slices[1:]:
        h = torch.einsum("ba,bac->bc", h, g)
    return h[:, 0]


def _require(model: KftModel, variant: str):
    if model.variant != variant:
        raise ValueError(f"expected a {variant} model, got {model.variant}")


def forward_vanilla(model: KftModel, idx) -> torch.Tensor:
    _require(model, "vanilla")
    return model.predict(idx)


def forward_wlr(model: KftModel, idx) -> torch.Tensor:
    _require(model, "wlr")
    return model.predict(idx)


def forward_ls(model: KftModel, idx) -> torch.Tensor:
    _require(model, "ls")
    return model.predict(idx)


def _sq(t: torch.Tensor) -> torch.Tensor:
    return (t * t).sum()


def reg_primal(model: KftModel) -> torch.Tensor:
    """Squared Frobenius penalties; auxiliary cores use ``reg_aux``."""
    total = torch.zeros((), dtype=DTYPE)
    for k in range(model.n_cores):
        total = total + model.reg[k] * _sq(model.cores[k])
        if model.variant == "wlr":
            total = total + model.reg_aux[k] * _sq(model.weights[k])
        elif model.variant == "ls":
            total = total + model.reg_aux[k] * (_sq(model.scales[k]) + _sq(model.biases[k]))
    return total


def _rkhs_cells(model: KftModel, k: int, mats) -> torch.Tensor:
    """Per rank cell RKHS norm v^T K v, shape (R_left, 1, ..., 1, R_right)."""
    v = model.cores[k]
    axes = tuple(range(1, v.dim() - 1))
    return (model.apply_side(v, k, mats) * v).sum(axes, keepdim=True)


def reg_dual_vanilla(model: KftModel, mats=None) -> torch.Tensor:
    mats = model.side_matrices() if mats is None else mats
    total = torch.zeros((), dtype=DTYPE)
    for k in range(model.n_cores):
        total = total + model.reg[k] * _rkhs_cells(model, k, mats).sum()
    return total


def reg_dual_wlr(model: KftModel, mats=None) -> torch.Tensor:
    """sum_k lambda_k sum_cells (sum_n' v'^2) * v^T K v."""
    _require(model, "wlr")
    mats = model.side_matrices() if mats is None else mats
    total = torch.zeros((), dtype=DTYPE)
    for k in range(model.n_cores):
        w = model.weights[k]
        axes = tuple(range(1, w.dim() - 1))
        wsum = (w * w).sum(axes, keepdim=True)
        total = total + model.reg[k] * (wsum * _rkhs_cells(model, k, mats)).sum()
    return total


def reg_dual_ls(model: KftModel, mats=None) -> torch.Tensor:
    _require(model, "ls")
    mats = model.side_matrices() if mats is None else mats
    total = torch.zeros((), dtype=DTYPE)
    for k in range(model.n_cores):
        inner = _sq(model.scales[k]) + _rkhs_cells(model, k, mats).sum() + _sq(model.biases[k])
        total = total + model.reg[k] * inner
    return total


def objective(model: KftModel, idx, y, n_total: int | None = None) -> float:
    """Batch MSE plus the regularizer scaled by the batch fraction."""
    with torch.no_grad():
        return float(model.loss_terms(idx, y, n_total)[0])
