"""Cosine similarity, NT-Xent and cross entropy.

Rows ``2k`` and ``2k + 1`` (0-based) of an embedding batch form positive
pair ``k``; every other row acts as a negative, including rows of the same
class.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError

CE_FLOOR = 1e-12


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    if not np.any(a.data) or not np.any(b.data):
        raise NumericError("cosine similarity of a zero vector")
    return ad.dot(ad.l2_normalize(a), ad.l2_normalize(b))


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")


def _log_probs(Z: Tensor, tau: float) -> Tensor:
    """Row-wise log softmax of cosine similarities over k != i."""
    zn = ad.l2_normalize(Z, axis=-1)
    sims = ad.scale(ad.matmul(zn, ad.transpose(zn, (1, 0))), 1.0 / tau)
    n = Z.shape[0]
    return ad.log_softmax(sims, axis=-1, mask=~np.eye(n, dtype=bool))


def _negate(x: Tensor) -> Tensor:
    # 0 - x rather than -1 * x, so a zero loss is +0.0, not -0.0
    return ad.sub(Tensor(0.0), x)


def ntxent_pair_loss(i: int, j: int, Z: Tensor, tau: float) -> Tensor:
    """l(i, j) for 0-based rows; the denominator includes row j."""
    _check_tau(tau)
    n = Z.shape[0]
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise ContractError(f"invalid pair ({i}, {j}) for {n} rows")
    return _negate(ad.index(_log_probs(Z, tau), (i, j)))


def ntxent_loss(Z: Tensor, tau: float) -> Tensor:
    """Mean of l(2k, 2k+1) and l(2k+1, 2k) over all pairs."""
    _check_tau(tau)
    n = Z.shape[0]
    if Z.ndim != 2 or n < 2 or n % 2:
        raise ContractError(f"need an even number >= 2 of embedding rows, got shape {Z.shape}")
    rows = np.arange(n)
    partner = rows ^ 1
    return ad.scale(_negate(ad.sum_(ad.index(_log_probs(Z, tau), (rows, partner)))), 1.0 / n)


def l2_penalty(theta: Iterable[Tensor], lam: float) -> Tensor:
    theta = list(theta)
    if not theta:
        return Tensor(0.0)
    return ad.scale(ad.sum_of_squares(theta), lam / 2.0)


def batch_loss(Z: Tensor, tau: float, lam: float = 0.0, theta: Iterable[Tensor] = ()) -> Tensor:
    loss = ntxent_loss(Z, tau)
    return ad.add(loss, l2_penalty(theta, lam)) if lam else loss


def cross_entropy(y_hat: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class, floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    if y_hat.ndim != 2 or labels.shape != (y_hat.shape[0],):
        raise ContractError(f"labels {labels.shape} do not match predictions {y_hat.shape}")
    if labels.min() < 0 or labels.max() >= y_hat.shape[1]:
        raise ContractError("label outside the class range")
    picked = ad.index(y_hat, (np.arange(len(labels)), labels))
    return ad.scale(ad.sum_(ad.log(picked, floor=CE_FLOOR)), -1.0 / len(labels))


def cross_entropy_loss(y_hat: Tensor, labels, lam: float = 0.0, theta: Iterable[Tensor] = ()) -> Tensor:
    loss = cross_entropy(y_hat, labels)
    return ad.add(loss, l2_penalty(theta, lam)) if lam else loss

