"""Glorot-uniform initialisation and the Adam optimiser."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


def xavier_bound(shape) -> float:
    shape = tuple(shape)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[0] * receptive, shape[1] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(shape, rng: np.random.Generator, name: str | None = None) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise ContractError(f"xavier_init: invalid shape {shape}")
    b = xavier_bound(shape)
    return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update, applied in place.

    Parameters missing from ``grads`` are left untouched (their moments do
    not decay either).
    """
    extra = set(grads) - set(params)
    if extra:
        raise ContractError(f"gradients for unknown parameters: {sorted(extra)}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        tmp = np.multiply(g, 1.0 - state.beta1)
        m *= state.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v *= state.beta2
        v += tmp
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        p.data -= tmp
    return params, state
