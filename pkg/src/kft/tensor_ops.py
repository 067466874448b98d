"""Dense tensor algebra used throughout the package.

All routines operate on ``torch.Tensor`` values in float64.  Numpy arrays and
nested lists are accepted and converted.  Modes are zero-based; ``LAST``
selects the final dimension.
"""
from __future__ import annotations

from typing import Sequence

import torch

LAST = -1

DTYPE = torch.float64


class ShapeError(ValueError):
    """Raised when tensor extents do not line up for a contraction."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for order-{ndim} tensor")
    return axis % ndim


def mode_product(x, u, axis: int) -> torch.Tensor:
    """n-mode product of ``x`` with ``u`` along ``axis``.

    A matrix ``u`` of shape (J, I_n) contracts its second index against
    ``x``'s extent I_n and puts J in its place.  A higher-order ``u`` of shape
    (I_n, K_1, ..., K_m) contracts its first index and splices K_1..K_m in at
    ``axis``.
    """
    x = as_tensor(x)
    u = as_tensor(u)
    n = _axis(axis, x.dim())
    if u.dim() == 2:
        if u.shape[1] != x.shape[n]:
            raise ShapeError(
                f"matrix of shape {tuple(u.shape)} cannot contract extent {x.shape[n]} on axis {n}"
            )
        out = torch.tensordot(x, u, dims=([n], [1]))
        return out.movedim(-1, n)
    if u.dim() < 2:
        raise ShapeError("mode_product needs a matrix or higher-order tensor")
    if u.shape[0] != x.shape[n]:
        raise ShapeError(
            f"tensor of shape {tuple(u.shape)} cannot contract extent {x.shape[n]} on axis {n}"
        )
    out = torch.tensordot(x, u, dims=([n], [0]))
    k = u.dim() - 1
    src = list(range(out.dim() - k, out.dim()))
    return out.movedim(src, list(range(n, n + k)))


def chain_last_mode(cores: Sequence) -> torch.Tensor:
    """Contract a tensor train left to right along trailing/leading ranks.

    The first core is either (n_1, R_1) or (1, n_1, R_1); later cores are
    (R_{p-1}, n_p, ..., R_p).  Unit boundary ranks are dropped from the result.
    """
    if not cores:
        raise ShapeError("empty core list")
    cores = [as_tensor(c) for c in cores]
    out = cores[0]
    for k, core in enumerate(cores[1:], start=1):
        if out.shape[-1] != core.shape[0]:
            raise ShapeError(
                f"rank mismatch between core {k - 1} (trailing {out.shape[-1]}) "
                f"and core {k} (leading {core.shape[0]})"
            )
        out = torch.tensordot(out, core, dims=([out.dim() - 1], [0]))
    if cores[0].dim() >= 3 and out.shape[0] == 1:
        out = out[0]
    if cores[-1].dim() >= 3 and out.shape[-1] == 1 and out.dim() > 1:
        out = out[..., 0]
    return out


def hadamard(a, b) -> torch.Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard of shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a * b


def transposed_khatri_rao(a, b) -> torch.Tensor:
    """Row-wise Kronecker product: row i is kron(a[i], b[i])."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError("transposed Khatri-Rao expects two matrices")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], a.shape[1] * b.shape[1])


def kron_modes_matvec(x, mats: Sequence) -> torch.Tensor:
    """Apply ``mats[i]`` along mode ``i + 1`` of ``x``.

    Row-major vectorisation of each leading slice of the result equals
    ``kron(mats[0], mats[1], ...) @ vec(slice)``, so Kronecker-structured
    operators never have to be formed explicitly.
    """
    x = as_tensor(x)
    if len(mats) > x.dim() - 1:
        raise ShapeError(f"{len(mats)} matrices for an order-{x.dim()} tensor")
    for i, m in enumerate(mats):
        x = mode_product(x, m, i + 1)
    return x
