"""Principal components by power iteration with deflation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class PcaResult:
    components: np.ndarray      # (k, d), orthonormal rows
    projections: np.ndarray     # (n, k)
    variances: np.ndarray       # (k,), non-increasing
    rank_deficient: bool = False


def pca_project(X, k: int = 2, tol: float = 1e-9, max_iter: int = 10_000,
                seed: int = 0, rank_tol: float = 1e-12) -> PcaResult:
    """Top-``k`` principal directions of the rows of ``X``.

    Directions whose variance falls below ``rank_tol`` times the leading
    variance are not returned and ``rank_deficient`` is set.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("PCA needs a 2-d array with at least 2 rows")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (X.shape[0] - 1)
    d = C.shape[0]
    rng = np.random.default_rng(seed)
    comps: list[np.ndarray] = []
    variances: list[float] = []
    deficient = False
    scale = float(np.trace(C))
    for _ in range(min(k, d)):
        v = rng.normal(size=d)
        for c in comps:
            v -= (v @ c) * c
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = C @ v
            for c in comps:
                w -= (w @ c) * c
            n = np.linalg.norm(w)
            if n == 0:
                break
            w /= n
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ C @ v)
        if scale == 0 or lam <= rank_tol * max(variances[0] if variances else scale, 1e-300):
            deficient = True
            break
        comps.append(v)
        variances.append(lam)
        C = C - lam * np.outer(v, v)
    if len(comps) < k:
        deficient = True
    comp = np.array(comps).reshape(len(comps), d)
    return PcaResult(comp, Xc @ comp.T, np.array(variances), deficient)
