"""Central-difference checks for every differentiable piece of the model.

Each check reduces its component's output to a scalar through a fixed
random projection, so every output entry contributes to the gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .data import HeteroGraph
from .losses import cross_entropy, l2_penalty, ntxent_loss
from .model import (ModelConfig, behavior_forward, embed_behavior, fuse_forward, init_params,
                    mccf_forward, media_forward, project_head, wide_deep_forward)
from .synth import GenConfig, generate_dataset
from .train import TrainConfig, objective, prepare, sample_pair_batch

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    component: str
    group: str
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _leaf(rng, *shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:
        x = low + np.abs(x)
    return Tensor(x, requires_grad=True)


def _project(out: Tensor, seed: int) -> Tensor:
    r = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_(ad.mul(out, Tensor(r)))


def _op_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    row = _leaf(rng, 4)
    pos = _leaf(rng, 3, 4, low=0.5)
    # keep relu inputs away from the kink so +-h never crosses it
    kinked = Tensor(np.sign(rng.normal(size=(3, 4))) * (0.1 + rng.random((3, 4))), requires_grad=True)
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    x3, w, bias = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    u, v = _leaf(rng, 6), _leaf(rng, 6)
    table = _leaf(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    smat = sp.csr_matrix(np.where(rng.random((4, 3)) < 0.5, rng.random((4, 3)), 0.0))
    dense = _leaf(rng, 3, 2)
    mask = np.array([[True, True, False, True], [False, True, True, True], [True, False, False, False]])
    gain, lnb = _leaf(rng, 4), _leaf(rng, 4)

    def p(f):
        return lambda: _project(f(), 1)

    return {
        "add": (p(lambda: ad.add(a, row)), [a, row]),
        "sub": (p(lambda: ad.sub(a, b)), [a, b]),
        "mul": (p(lambda: ad.mul(a, b)), [a, b]),
        "scale": (p(lambda: ad.scale(a, -1.7)), [a]),
        "relu": (p(lambda: ad.relu(kinked)), [kinked]),
        "exp": (p(lambda: ad.exp(a)), [a]),
        "log": (p(lambda: ad.log(pos)), [pos]),
        "sum": (p(lambda: ad.sum_(m1, axis=1)), [m1]),
        "mean": (p(lambda: ad.mean(m1, axis=-1, keepdims=True)), [m1]),
        "square_sum": (lambda: ad.square_sum(a), [a]),
        "sum_of_squares": (lambda: ad.sum_of_squares([a, row]), [a, row]),
        "dot": (lambda: ad.dot(u, v), [u, v]),
        "matmul": (p(lambda: ad.matmul(m1, m2)), [m1, m2]),
        "linear": (p(lambda: ad.linear(x3, w, bias)), [x3, w, bias]),
        "sparse_matmul": (p(lambda: ad.sparse_matmul(smat, dense)), [dense]),
        "reshape": (p(lambda: ad.reshape(m1, (4, 6))), [m1]),
        "transpose": (p(lambda: ad.transpose(m1, (2, 0, 1))), [m1]),
        "concat": (p(lambda: ad.concat([a, b], axis=0)), [a, b]),
        "index": (p(lambda: ad.index(a, np.array([2, 0, 2]))), [a]),
        "split": (lambda: _project(ad.split(a, [1, 3], axis=1)[1], 2), [a]),
        "gather": (p(lambda: ad.gather(table, ids)), [table]),
        "softmax": (p(lambda: ad.softmax(a, axis=-1, mask=mask)), [a]),
        "log_softmax": (p(lambda: ad.log_softmax(a, axis=-1, mask=mask)), [a]),
        "l2_normalize": (p(lambda: ad.l2_normalize(a, axis=-1)), [a]),
        "layer_norm": (p(lambda: ad.layer_norm(m1, gain, lnb)), [m1, gain, lnb]),
    }


def tiny_model_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(wide_dim=8, deep_vocab=(4, 5), page_vocab=6, embed_dim=8, wd_hidden=(8, 6),
                      t_max=6, n_layers=2, n_heads=2, ffn_dim=8, node_dim=6, graph_dim=4,
                      depth=2, sample_size=3, fusion_hidden=6, proj_dims=(5, 3))
    return replace(cfg, **overrides)


def _tiny_graph(rng, node_dim: int) -> HeteroGraph:
    g = HeteroGraph(node_dim=node_dim, edge_dim=2)
    keys = [(t, f"{t}{i}") for t in ("IP", "CookieID", "DeviceID") for i in range(4)]
    for k in keys:
        g.add_node(*k, attrs=rng.normal(size=node_dim))
    for _ in range(20):
        i, j = rng.choice(len(keys), 2, replace=False)
        g.add_edge(keys[i], keys[j], "link", rng.normal(size=2))
    return g


def _params_of(params, prefixes) -> list[Tensor]:
    return [params[n] for n in params if n.startswith(prefixes)]


def _encoder_cases(rng):
    cfg = tiny_model_config()
    params = init_params(cfg, rng)
    B = 4
    x_w = Tensor(rng.normal(size=(B, cfg.wide_dim)))
    e_d = _leaf(rng, B, 2 * cfg.embed_dim)
    ids = np.zeros((B, cfg.t_max), dtype=np.int64)
    lens = np.array([3, 1, 4, 0])
    for r, n in enumerate(lens):
        if n:
            ids[r, -n:] = rng.integers(1, cfg.page_vocab, size=n)
    graph = _tiny_graph(rng, cfg.node_dim)
    media = np.array([[0, 4, 8], [1, -1, 9], [-1, 5, -1], [3, 6, 11]])
    v_wd, v_b, v_v = _leaf(rng, B, 6), _leaf(rng, B, 8), _leaf(rng, B, 12)
    src = _leaf(rng, B, 6)

    def behavior():
        e_b, mask, positions = embed_behavior(ids, lens, params)
        return _project(behavior_forward(e_b, mask, params, positions), 3)

    def fusion():
        out = fuse_forward(v_wd, v_b, v_v, params)
        return ad.add(_project(out.h1, 4), _project(out.y_hat, 5))

    return {
        "wide_deep": (lambda: _project(wide_deep_forward(x_w, e_d, params), 2),
                      [e_d] + _params_of(params, "wd.")),
        "behavior_transformer": (behavior, _params_of(params, "beh.")),
        "media_graph": (lambda: _project(media_forward(media, graph, params), 6),
                        _params_of(params, "graph.")),
        "fusion": (fusion, [v_wd, v_b, v_v] + _params_of(params, "fuse.")),
        "projection_head": (lambda: _project(project_head(src, params), 7),
                            [src] + _params_of(params, "proj.")),
    }


def _loss_cases(rng):
    Z = _leaf(rng, 8, 5)
    logits = _leaf(rng, 6, 2)
    labels = np.array([1, 0, 0, 1, 1, 0])
    theta = [_leaf(rng, 3, 2), _leaf(rng, 4)]
    return {
        "ntxent": (lambda: ntxent_loss(Z, 0.5), [Z]),
        "cross_entropy": (lambda: cross_entropy(ad.softmax(logits, axis=-1), labels), [logits]),
        "l2_penalty": (lambda: l2_penalty(theta, 0.01), theta),
    }


def _end_to_end_case(rng):
    records, graph = generate_dataset(GenConfig(n_clicks=120, wide_dim=8, node_dim=6, edge_dim=2,
                                                n_advertisers=5, n_keywords=7, seed=3))
    prep = prepare(records, graph, tiny_model_config())
    params = init_params(prep.model_config, rng)
    cfg = TrainConfig(batch_size=8)
    idx = sample_pair_batch(prep.train.labels, cfg.pairs, cfg.balance, rng)
    batch = prep.train.take(idx)

    def f():
        return objective(mccf_forward(batch, graph, params), batch.labels, params, cfg)

    return {"end_to_end_objective": (f, list(params.tensors.values()))}


def run_gradcheck(h: float = 1e-6, seed: int = 0, max_entries: int | None = 12) -> list[CheckResult]:
    """Run all checks; large tensors are probed at ``max_entries`` random entries."""
    rng = np.random.default_rng(seed)
    groups = [("op", _op_cases(rng)), ("encoder", _encoder_cases(rng)),
              ("loss", _loss_cases(rng)), ("end_to_end", _end_to_end_case(rng))]
    results = []
    for group, cases in groups:
        for name, (f, params) in cases.items():
            t = time.perf_counter()
            err = finite_diff_check(f, params, h=h, max_entries=max_entries, seed=seed)
            results.append(CheckResult(name, group, err, time.perf_counter() - t))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.component) for r in results)
    lines = [f"{'component':<{width}}  {'group':<10}  {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.component:<{width}}  {r.group:<10}  {r.max_rel_error:12.3e}  "
                     f"{'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
