"""Slow, obviously-correct reference implementations used only by tests."""
import math

import numpy as np


def naive_cosine(a, b) -> float:
    return float(sum(x * y for x, y in zip(a, b))
                 / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b))))


def naive_ntxent(Z, tau: float) -> float:
    """Double loop over rows; rows (2k, 2k+1) are the positive pairs."""
    Z = np.asarray(Z, dtype=np.float64)
    n = len(Z)

    def pair(i, j):
        num = math.exp(naive_cosine(Z[i], Z[j]) / tau)
        den = 0.0
        for k in range(n):
            if k != i:
                den += math.exp(naive_cosine(Z[i], Z[k]) / tau)
        return -math.log(num / den)

    total = 0.0
    for k in range(n // 2):
        total += pair(2 * k, 2 * k + 1) + pair(2 * k + 1, 2 * k)
    return total / n


def brute_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ordered correctly, ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def central_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at array ``x`` (x is restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def eig_pca(X, k: int):
    """Top-k eigenpairs of the sample covariance via LAPACK."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (len(X) - 1)
    w, V = np.linalg.eigh(C)
    order = np.argsort(w)[::-1][:k]
    return w[order], V[:, order].T
