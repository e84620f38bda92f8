"""Pair sampling, training, evaluation, ablations and PCA export."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import (ClickRecord, FeatureBatch, HeteroGraph, Vocab, WideScaler,
                   assemble_batch, chronological_split)
from .errors import ConfigError, ContractError, DimensionError, NumericError, SamplingError
from .losses import cross_entropy, l2_penalty, ntxent_loss
from .metrics import MetricsReport, score_report
from .model import ModelConfig, MccfParams, init_params, mccf_forward
from .optim import AdamState, adam_step
from .pca import pca_project

log = logging.getLogger(__name__)

VARIANTS = {
    "full": frozenset(),
    "no_wd": frozenset({"wd"}),
    "no_b": frozenset({"b"}),
    "no_v": frozenset({"v"}),
    "ce": frozenset(),
}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 0.01
    tau: float = 0.5
    epochs: int = 10
    seed: int = 0
    runs: int = 5
    variant: str = "full"
    balance: float = 0.5
    w_ce: float = 1.0
    w_ntxent: float = 1.0
    threshold: float = 0.5
    test_fraction: float = 0.2
    probe_epochs: int = 3

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("train.batch_size: must be an even number >= 2")
        if self.runs < 1:
            raise ConfigError("train.runs: must be >= 1")
        if self.epochs < 0 or self.probe_epochs < 0:
            raise ConfigError("train.epochs: must be >= 0")
        if self.lr <= 0 or self.tau <= 0:
            raise ConfigError("train.lr/tau: must be positive")
        if self.lam < 0 or self.w_ce < 0 or self.w_ntxent < 0:
            raise ConfigError("train.lam/w_ce/w_ntxent: must be >= 0")
        if self.w_ce == 0 and self.w_ntxent == 0:
            raise ConfigError("train.w_ce/w_ntxent: at least one loss weight must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"train.variant: expected one of {', '.join(VARIANTS)}")
        for k in ("balance", "threshold"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ConfigError(f"train.{k}: must lie in [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("train.test_fraction: must lie in (0, 1)")

    @property
    def pairs(self) -> int:
        return self.batch_size // 2

    def for_variant(self, variant: str) -> "TrainConfig":
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}")
        return replace(self, variant=variant)

    @property
    def loss_weights(self) -> tuple[float, float]:
        """(contrastive, cross-entropy) weights after applying the variant."""
        if self.variant == "ce":
            return 0.0, 1.0
        return self.w_ntxent, self.w_ce


@dataclass
class Prepared:
    """Chronologically split, vocabulary-encoded data ready for training."""

    train: FeatureBatch
    test: FeatureBatch
    graph: HeteroGraph
    vocab: Vocab
    scaler: WideScaler
    model_config: ModelConfig


def prepare(records: Sequence[ClickRecord], graph: HeteroGraph, model_cfg: ModelConfig,
            test_fraction: float = 0.2, vocab: Vocab | None = None,
            scaler: WideScaler | None = None) -> Prepared:
    """Split chronologically and encode both halves.

    The vocabulary and the wide scaler are fitted on the training half
    unless supplied (as when scoring with a saved model).
    """
    train_recs, test_recs = chronological_split(records, test_fraction)
    if train_recs and len(train_recs[0].wide) != model_cfg.wide_dim:
        raise DimensionError(f"data has {len(train_recs[0].wide)} wide features, model expects {model_cfg.wide_dim}")
    if graph is not None and graph.node_dim != model_cfg.node_dim:
        raise DimensionError(f"graph has {graph.node_dim} node attributes, model expects {model_cfg.node_dim}")
    vocab = vocab or Vocab.build(train_recs)
    if scaler is None:
        scaler = WideScaler.fit(np.array([r.wide for r in train_recs], dtype=np.float64))
    cfg = model_cfg.with_vocab(vocab)
    tr = assemble_batch(train_recs, vocab, graph, cfg.t_max, scaler)
    te = assemble_batch(test_recs, vocab, graph, cfg.t_max, scaler)
    return Prepared(tr, te, graph, vocab, scaler, cfg)


def sample_pair_batch(labels, M: int, balance: float, rng: np.random.Generator) -> np.ndarray:
    """Indices for ``M`` same-class pairs laid out as rows (2k, 2k+1).

    ``ceil(balance * M)`` pairs are fraud pairs.  Rows are distinct across
    the batch whenever the class pool is large enough.
    """
    labels = np.asarray(labels)
    if M < 1:
        raise SamplingError("need at least one pair")
    n_fraud = math.ceil(balance * M)
    out = []
    for cls, n_pairs in ((1, n_fraud), (0, M - n_fraud)):
        if n_pairs == 0:
            continue
        pool = np.flatnonzero(labels == cls)
        if len(pool) < 2:
            raise SamplingError(f"class {cls} has {len(pool)} samples; need at least 2")
        if len(pool) >= 2 * n_pairs:
            out.append(rng.choice(pool, 2 * n_pairs, replace=False))
        else:
            out.append(np.concatenate([rng.choice(pool, 2, replace=False) for _ in range(n_pairs)]))
    return np.concatenate(out)


def objective(out, labels, params: MccfParams, cfg: TrainConfig) -> Tensor:
    w_nt, w_ce = cfg.loss_weights
    terms = []
    if w_nt:
        terms.append(ad.scale(ntxent_loss(out.z, cfg.tau), w_nt))
    if w_ce:
        terms.append(ad.scale(cross_entropy(out.y_hat, labels), w_ce))
    if cfg.lam:
        terms.append(l2_penalty([params[n] for n in params.decayed()], cfg.lam))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _first_nonfinite(params: MccfParams) -> str | None:
    for name, t in params.items():
        # cheap screen: a sum of finite float64 entries of this size cannot overflow
        if not np.isfinite(np.sum(t.data)):
            return name
        if t.grad is not None and not np.isfinite(np.sum(t.grad)):
            return name + ".grad"
    return None


def train_step(params: MccfParams, batch: FeatureBatch, graph, cfg: TrainConfig,
               state: AdamState) -> float:
    ablation = VARIANTS[cfg.variant]
    try:
        with Tape() as tape:
            out = mccf_forward(batch, graph, params, ablation)
            loss = objective(out, batch.labels, params, cfg)
        grads = ad.backward(tape, loss)
    except NumericError as e:
        name = _first_nonfinite(params)
        raise NumericError(f"training diverged ({e}); first non-finite tensor: {name or 'activation'}") from e
    named = {n: grads[t.node_id] for n, t in params.items() if t.node_id in grads}
    adam_step(params.tensors, named, state)
    bad = _first_nonfinite(params)
    if bad:
        raise NumericError(f"training diverged; first non-finite tensor: {bad}")
    return loss.item()


def train(data: FeatureBatch, graph: HeteroGraph | None, model_cfg: ModelConfig,
          cfg: TrainConfig, seed: int | None = None) -> tuple[MccfParams, list[float]]:
    """Adam on sampled pair batches; returns parameters and per-epoch mean loss."""
    if cfg.batch_size < 2 or cfg.batch_size % 2:
        raise ContractError("batch_size must be an even number >= 2")
    seed = cfg.seed if seed is None else seed
    init_rng, sample_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    params = init_params(model_cfg, init_rng)
    state = AdamState(lr=cfg.lr)
    steps = math.ceil(len(data) / cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(steps):
            idx = sample_pair_batch(data.labels, cfg.pairs, cfg.balance, sample_rng)
            losses.append(train_step(params, data.take(idx), graph, cfg, state))
        history.append(float(np.mean(losses)))
        log.info("seed %d epoch %d loss %.5f", seed, epoch + 1, history[-1])
    w_nt, w_ce = cfg.loss_weights
    if w_ce == 0 and cfg.epochs:
        fit_linear_probe(params, data, graph, cfg, sample_rng)
    return params, history


def forward_chunks(params: MccfParams, data: FeatureBatch, graph, ablation=(), chunk: int = 1024):
    """Inference-mode forward over ``data``; yields ModelOutput per chunk."""
    for start in range(0, len(data), chunk):
        yield mccf_forward(data.take(np.arange(start, min(start + chunk, len(data)))),
                           graph, params, ablation)


def predict_proba(params: MccfParams, data: FeatureBatch, graph, ablation=()) -> np.ndarray:
    return np.concatenate([o.y_hat.data[:, 1] for o in forward_chunks(params, data, graph, ablation)])


def hidden_features(params: MccfParams, data: FeatureBatch, graph, ablation=()) -> np.ndarray:
    return np.vstack([o.h1.data for o in forward_chunks(params, data, graph, ablation)])


def fit_linear_probe(params: MccfParams, data: FeatureBatch, graph, cfg: TrainConfig,
                     rng: np.random.Generator) -> None:
    """Refit the output layer on frozen h1 features with cross entropy.

    Used when the training objective gives the softmax head no signal.
    """
    ablation = VARIANTS[cfg.variant]
    h = hidden_features(params, data, graph, ablation)
    W, b = params["fuse.W2"], params["fuse.b2"]
    state = AdamState(lr=cfg.lr)
    steps = math.ceil(len(data) / cfg.batch_size)
    for _ in range(cfg.probe_epochs * steps):
        idx = sample_pair_batch(data.labels, cfg.pairs, cfg.balance, rng)
        with Tape() as tape:
            y = ad.softmax(ad.linear(Tensor(h[idx]), W, b), axis=-1)
            loss = cross_entropy(y, data.labels[idx])
        g = ad.backward(tape, loss)
        adam_step({"W": W, "b": b}, {"W": g[W.node_id], "b": g[b.node_id]}, state)


def evaluate(params: MccfParams, data: FeatureBatch, graph, threshold: float = 0.5,
             ablation=()) -> dict[str, float | None]:
    labelled = data.labels >= 0
    if not labelled.all():
        data = data.take(np.flatnonzero(labelled))
    return score_report(predict_proba(params, data, graph, ablation), data.labels, threshold)


def run_experiment(prep: Prepared, cfg: TrainConfig, runs: int | None = None
                   ) -> tuple[MetricsReport, MccfParams | None]:
    """Train and evaluate ``runs`` times with seeds ``cfg.seed + i``.

    Returns the report and the parameters of the first run.
    """
    runs = cfg.runs if runs is None else runs
    if runs < 1:
        raise ContractError("runs must be >= 1")
    rows, first = [], None
    for i in range(runs):
        params, _ = train(prep.train, prep.graph, prep.model_config, cfg, seed=cfg.seed + i)
        rows.append(evaluate(params, prep.test, prep.graph, cfg.threshold, VARIANTS[cfg.variant]))
        log.info("variant %s run %d: %s", cfg.variant, i, rows[-1])
        if first is None:
            first = params
    return MetricsReport(rows, cfg.variant), first


@dataclass
class AblationTable:
    reports: dict[str, MetricsReport]
    deltas: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"variants": {k: r.to_dict() for k, r in self.reports.items()}, "deltas_vs_full": self.deltas}


def ablation_run(prep: Prepared, cfg: TrainConfig, variants: Sequence[str] = tuple(VARIANTS),
                 runs: int | None = None) -> AblationTable:
    for v in variants:
        if v not in VARIANTS:
            raise ContractError(f"unknown variant {v!r}")
    reports = {v: run_experiment(prep, cfg.for_variant(v), runs)[0] for v in variants}
    table = AblationTable(reports)
    if "full" in reports:
        base = reports["full"].mean
        for v, r in reports.items():
            table.deltas[v] = {m: None if r.mean[m] is None or base[m] is None else r.mean[m] - base[m]
                               for m in base}
    return table


def raw_input_matrix(data: FeatureBatch, graph: HeteroGraph, page_vocab: int) -> np.ndarray:
    """Model inputs before any learned layer: scaled wide features, the page-type
    histogram and the three media attribute vectors (zeros when absent)."""
    n = len(data)
    hist = np.zeros((n, page_vocab))
    mask = data.mask
    rows = np.repeat(np.arange(n), mask.sum(axis=1))
    np.add.at(hist, (rows, data.behavior_ids[mask]), 1.0)
    hist /= np.maximum(data.behavior_len, 1)[:, None]
    attrs = graph.attr_matrix
    media = np.zeros((n, 3, graph.node_dim))
    present = data.media >= 0
    media[present] = attrs[data.media[present]]
    return np.hstack([data.wide, hist, media.reshape(n, -1)])


def pca_export(prep: Prepared, cfg: TrainConfig, seed: int | None = None) -> list[tuple[float, float, int, str]]:
    """Rows (pc1, pc2, label, source) for the raw inputs and the h1 layer
    of the cross-entropy and NT-Xent models on the test split."""
    seed = cfg.seed if seed is None else seed
    rows = []
    labels = prep.test.labels
    sources = [("input", raw_input_matrix(prep.test, prep.graph, prep.model_config.page_vocab))]
    for variant, name in (("ce", "hidden_ce"), ("full", "hidden_ntxent")):
        params, _ = train(prep.train, prep.graph, prep.model_config, cfg.for_variant(variant), seed=seed)
        sources.append((name, hidden_features(params, prep.test, prep.graph)))
    for name, X in sources:
        res = pca_project(X, 2)
        proj = np.zeros((len(X), 2))
        proj[:, :res.projections.shape[1]] = res.projections
        rows.extend((float(a), float(b), int(y), name) for (a, b), y in zip(proj, labels))
    return rows
