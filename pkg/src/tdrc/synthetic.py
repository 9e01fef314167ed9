"""Seeded synthetic instances for tests, benchmarks and smoke runs."""
from __future__ import annotations

import numpy as np

from .tensor import FactorSet, reconstruct


def cosine_similarity(A: np.ndarray) -> np.ndarray:
    """``A_hat A_hat^T`` with the rows of ``A`` scaled to unit length."""
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    An = A / np.where(norms > 0, norms, 1.0)
    S = An @ An.T
    S = 0.5 * (S + S.T)
    np.clip(S, 0.0, 1.0, out=S)
    np.fill_diagonal(S, 1.0)
    return S


def low_rank_instance(m: int, n: int, t: int, r: int, seed: int = 0):
    """Noiseless rank-``r`` tensor with similarities derived from its factors.

    Factors are uniform on ``[0, 1)``; the similarity matrices are cosine
    similarities of the generating miRNA and disease factors. Returns
    ``(x, S_m, S_n, factors)``.
    """
    rng = np.random.default_rng(seed)
    fs = FactorSet(rng.random((m, r)), rng.random((n, r)), rng.random((t, r)))
    return reconstruct(fs), cosine_similarity(fs.C), cosine_similarity(fs.P), fs


def binary_instance(m: int, n: int, t: int, r: int = 4, density: float = 0.01, seed: int = 0):
    """Sparse binary tensor thresholded from a latent low-rank score tensor.

    The top ``density`` fraction of latent scores become ones. Returns
    ``(x, S_m, S_n)`` with cosine similarities of the latent factors.
    """
    rng = np.random.default_rng(seed)
    fs = FactorSet(rng.random((m, r)), rng.random((n, r)), rng.random((t, r)))
    scores = reconstruct(fs) + 0.1 * rng.standard_normal((m, n, t))
    cut = np.quantile(scores, 1.0 - density)
    x = (scores >= cut).astype(np.float64)
    return x, cosine_similarity(fs.C), cosine_similarity(fs.P)
