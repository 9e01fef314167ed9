"""Dense 3-way tensor primitives used by every solver step.

Tensors are plain ``numpy.ndarray`` objects of shape ``(m, n, t)``. The
linear layout used for flat views and unfoldings is column-major: entry
``(i, j, k)`` sits at ``i + m*j + m*n*k``.

Unfolding convention
--------------------
``matricize(x, mode)`` puts the mode index on the rows and enumerates the
two remaining indices on the columns, the lower-numbered mode varying
fastest. Under this convention::

    matricize(x, 1) == C @ khatri_rao(F, P).T
    matricize(x, 2) == P @ khatri_rao(F, C).T
    matricize(x, 3) == F @ khatri_rao(P, C).T

for ``x = reconstruct(FactorSet(C, P, F))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FactorSet",
    "as_tensor3",
    "khatri_rao",
    "matricize",
    "refold",
    "reconstruct",
    "residual_norm",
    "mttkrp",
]

_MODE_PERM = {1: (0, 1, 2), 2: (1, 0, 2), 3: (2, 0, 1)}


def as_tensor3(x, dims=None) -> np.ndarray:
    """Validate and return ``x`` as a finite float64 array of shape ``(m, n, t)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a 3-way array, got ndim={x.ndim}")
    if dims is not None and tuple(x.shape) != tuple(dims):
        raise ValueError(f"tensor shape {x.shape} does not match declared dims {tuple(dims)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains non-finite values")
    return x


@dataclass(frozen=True)
class FactorSet:
    """CP factor matrices for the miRNA (C), disease (P) and type (F) modes."""

    C: np.ndarray
    P: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        for name in ("C", "P", "F"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 2:
                raise ValueError(f"factor {name} must be a matrix, got ndim={a.ndim}")
            object.__setattr__(self, name, a)
        ranks = {self.C.shape[1], self.P.shape[1], self.F.shape[1]}
        if len(ranks) != 1:
            raise ValueError(
                f"factor column counts differ: C={self.C.shape}, P={self.P.shape}, F={self.F.shape}"
            )
        if self.rank < 1:
            raise ValueError("rank must be at least 1")

    @property
    def rank(self) -> int:
        return self.C.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.C.shape[0], self.P.shape[0], self.F.shape[0]

    def as_tuple(self):
        return self.C, self.P, self.F


def matricize(x: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding of a 3-way array (modes are 1-based).

    Mode 1 gives ``m x (n*t)``, mode 2 gives ``n x (m*t)`` and mode 3 gives
    ``t x (m*n)``.
    """
    if mode not in _MODE_PERM:
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    y = np.transpose(x, _MODE_PERM[mode])
    return np.reshape(y, (y.shape[0], -1), order="F")


def refold(mat: np.ndarray, mode: int, shape) -> np.ndarray:
    """Inverse of :func:`matricize` for a tensor of the given ``shape``."""
    if mode not in _MODE_PERM:
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    perm = _MODE_PERM[mode]
    permuted_shape = tuple(shape[p] for p in perm)
    y = np.reshape(mat, permuted_shape, order="F")
    return np.transpose(y, np.argsort(perm))


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; rows of ``b`` vary fastest.

    >>> khatri_rao(np.array([[1, 2], [3, 4]]), np.eye(2))
    array([[1., 0.],
           [0., 2.],
           [3., 0.],
           [0., 4.]])
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("khatri_rao expects two matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    r = a.shape[1]
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], r)


def reconstruct(fs: FactorSet) -> np.ndarray:
    """Full tensor with entries ``sum_l C[i,l] P[j,l] F[k,l]``."""
    return np.einsum("il,jl,kl->ijk", fs.C, fs.P, fs.F, optimize=True)


def mttkrp(unfolded: np.ndarray, fs: FactorSet, mode: int) -> np.ndarray:
    """Unfolded tensor times the Khatri-Rao product paired with ``mode``."""
    C, P, F = fs.as_tuple()
    if mode == 1:
        return unfolded @ khatri_rao(F, P)
    if mode == 2:
        return unfolded @ khatri_rao(F, C)
    if mode == 3:
        return unfolded @ khatri_rao(P, C)
    raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")


def residual_norm(x: np.ndarray, fs: FactorSet) -> float:
    """Unsquared Frobenius norm of ``x - [[C, P, F]]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != fs.dims:
        raise ValueError(f"tensor shape {x.shape} does not match factor dims {fs.dims}")
    return float(np.linalg.norm((x - reconstruct(fs)).ravel()))
