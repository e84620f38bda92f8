"""The MCCF network: wide&deep, behavior transformer, media graph encoder,
fusion head and projection head.

Everything is batched over clicks.  A modality listed in ``ablation`` is
never computed; a zero block of the same width stands in for it so the
fusion layer keeps a fixed layout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .data import DEEP_FIELDS, FeatureBatch, FeatureBundle, HeteroGraph, Vocab
from .errors import ConfigError, ContractError, ParseError
from .optim import xavier_init

MODALITIES = ("wd", "b", "v")
MAGIC = b"MCCF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    wide_dim: int = 40
    deep_vocab: tuple[int, ...] = (1, 1)
    page_vocab: int = 1
    embed_dim: int = 128
    wd_hidden: tuple[int, ...] = (256, 128)
    t_max: int = 300
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    node_dim: int = 32
    graph_dim: int = 64
    depth: int = 2
    sample_size: int = 10
    fusion_hidden: int = 128
    proj_dims: tuple[int, ...] = (64, 32)
    projection_source: str = "hidden"
    sample_seed: int = 0

    def validate(self) -> None:
        positive = {"wide_dim": self.wide_dim, "embed_dim": self.embed_dim, "t_max": self.t_max,
                    "n_layers": self.n_layers, "n_heads": self.n_heads, "ffn_dim": self.ffn_dim,
                    "node_dim": self.node_dim, "graph_dim": self.graph_dim, "depth": self.depth,
                    "sample_size": self.sample_size, "fusion_hidden": self.fusion_hidden}
        for k, v in positive.items():
            if v < 1:
                raise ConfigError(f"model.{k}: must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ConfigError("model.n_heads: must divide embed_dim")
        if not self.wd_hidden or min(self.wd_hidden) < 1:
            raise ConfigError("model.wd_hidden: need at least one positive width")
        if not self.proj_dims or min(self.proj_dims) < 1:
            raise ConfigError("model.proj_dims: need at least one positive width")
        if self.projection_source not in ("hidden", "logits"):
            raise ConfigError("model.projection_source: expected 'hidden' or 'logits'")

    def with_vocab(self, vocab: Vocab) -> "ModelConfig":
        return replace(self, deep_vocab=tuple(vocab.size(f) for f in DEEP_FIELDS),
                       page_vocab=vocab.size("page"))

    @property
    def deep_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.deep_vocab)[:-1]]).astype(np.int64)

    @property
    def fusion_in(self) -> int:
        return self.wd_hidden[-1] + self.embed_dim + 3 * self.graph_dim


# ---------------------------------------------------------------- parameters


@dataclass
class MccfParams:
    """Named trainable tensors plus the architecture they belong to."""

    tensors: dict[str, Tensor]
    config: ModelConfig

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def decayed(self) -> list[str]:
        """Names that enter the weight penalty: no biases, no layer-norm terms."""
        return [n for n in self.tensors if _is_weight(n)]

    def copy(self) -> "MccfParams":
        return MccfParams({n: Tensor(t.data.copy(), requires_grad=True, name=n)
                           for n, t in self.tensors.items()}, self.config)


def _is_weight(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("W") or leaf in ("embed", "pos", "start")


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> MccfParams:
    E = cfg.embed_dim
    if E % cfg.n_heads:
        raise ContractError("embed_dim must be divisible by n_heads")
    shapes: dict[str, tuple[int, ...]] = {
        "deep.embed": (int(sum(cfg.deep_vocab)), E),
        "beh.embed": (cfg.page_vocab, E),
        "beh.pos": (cfg.t_max + 1, E),
        "beh.start": (1, E),
    }
    width = cfg.wide_dim + len(cfg.deep_vocab) * E
    for i, h in enumerate(cfg.wd_hidden, start=1):
        shapes[f"wd.W{i}"] = (width, h)
        shapes[f"wd.b{i}"] = (h,)
        width = h
    for i in range(cfg.n_layers):
        p = f"beh.L{i}."
        for m in ("q", "k", "v", "o"):
            shapes[p + "W" + m] = (E, E)
            shapes[p + "b" + m] = (E,)
        shapes[p + "ln1.g"] = shapes[p + "ln1.b"] = (E,)
        shapes[p + "Wf1"] = (E, cfg.ffn_dim)
        shapes[p + "bf1"] = (cfg.ffn_dim,)
        shapes[p + "Wf2"] = (cfg.ffn_dim, E)
        shapes[p + "bf2"] = (E,)
        shapes[p + "ln2.g"] = shapes[p + "ln2.b"] = (E,)
    width = cfg.node_dim
    for k in range(1, cfg.depth + 1):
        shapes[f"graph.W{k}"] = (2 * width, cfg.graph_dim)
        width = cfg.graph_dim
    shapes["fuse.W1"] = (cfg.fusion_in, cfg.fusion_hidden)
    shapes["fuse.b1"] = (cfg.fusion_hidden,)
    shapes["fuse.W2"] = (cfg.fusion_hidden, 2)
    shapes["fuse.b2"] = (2,)
    width = cfg.fusion_hidden if cfg.projection_source == "hidden" else 2
    if cfg.projection_source not in ("hidden", "logits"):
        raise ContractError("projection_source must be 'hidden' or 'logits'")
    for i, h in enumerate(cfg.proj_dims, start=1):
        shapes[f"proj.W{i}"] = (width, h)
        width = h
    tensors = {}
    for name, shape in shapes.items():
        if _is_weight(name):
            tensors[name] = xavier_init(shape, rng, name=name)
        elif name.endswith(".g"):
            tensors[name] = Tensor(np.ones(shape), requires_grad=True, name=name)
        else:
            tensors[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)
    return MccfParams(tensors, cfg)


def params_to_bytes(params: MccfParams) -> bytes:
    """Versioned little-endian binary model format."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name in sorted(params.tensors):
        arr = params.tensors[name].data
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_params(params: MccfParams, path: str | Path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def read_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ParseError("not an MCCF model file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported model format version {version}")
    pos, out = 8, {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{rank}Q", blob, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(blob):
                raise ParseError("truncated model file")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error:
        raise ParseError("truncated model file") from None
    return out


def load_params(path: str | Path, cfg: ModelConfig) -> MccfParams:
    arrays = read_tensors(Path(path).read_bytes())
    expected = init_params(cfg, np.random.default_rng(0))
    if set(arrays) != set(expected.tensors):
        raise ParseError("model file tensor names do not match the configured architecture")
    for name, t in expected.tensors.items():
        if arrays[name].shape != t.shape:
            raise ParseError(f"tensor {name}: shape {arrays[name].shape} != expected {t.shape}")
        t.data = arrays[name].copy()
    return expected


# ---------------------------------------------------------------- encoders


def embed_lookup(table: Tensor, ids) -> Tensor:
    return ad.gather(table, ids)


def wide_deep_forward(x_w: Tensor, e_d: Tensor, params: MccfParams) -> Tensor:
    cfg = params.config
    if x_w.shape[-1] != cfg.wide_dim:
        raise ContractError(f"wide arity {x_w.shape[-1]} != {cfg.wide_dim}")
    if e_d.shape[-1] != len(cfg.deep_vocab) * cfg.embed_dim:
        raise ContractError(f"deep embedding width {e_d.shape[-1]} != {len(cfg.deep_vocab) * cfg.embed_dim}")
    h = ad.concat([e_d, x_w], axis=-1)
    for i in range(1, len(cfg.wd_hidden) + 1):
        h = ad.relu(ad.linear(h, params[f"wd.W{i}"], params[f"wd.b{i}"]))
    return h


def embed_behavior(behavior_ids: np.ndarray, behavior_len: np.ndarray, params: MccfParams
                   ) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Start token plus page embeddings, with columns that are padding for
    every row of the batch dropped.

    Returns ``(e_b, mask, positions)``; ``positions[j]`` is the position-table
    row for column ``j`` (the start token sits at 0).
    """
    t_max = behavior_ids.shape[1]
    keep = int(behavior_len.max()) if len(behavior_len) else 0
    first = t_max - keep
    ids = behavior_ids[:, first:]
    B = len(behavior_len)
    start = ad.gather(params["beh.start"], np.zeros((B, 1), dtype=np.int64))
    parts = [start]
    if keep:
        parts.append(ad.gather(params["beh.embed"], ids))
    e_b = ad.concat(parts, axis=1)
    cols = np.arange(first, t_max)
    mask = np.concatenate([np.ones((B, 1), dtype=bool),
                           cols[None, :] >= (t_max - behavior_len)[:, None]], axis=1)
    positions = np.concatenate([[0], cols + 1])
    return e_b, mask, positions


def _attention(x: Tensor, mask: np.ndarray, params: MccfParams, p: str, first_only: bool) -> Tensor:
    cfg = params.config
    B, L, D = x.shape
    H = cfg.n_heads
    dh = D // H
    xq = x[:, :1, :] if first_only else x
    Lq = xq.shape[1]

    def heads(t, n):
        return ad.transpose(ad.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

    q = heads(ad.linear(xq, params[p + "Wq"], params[p + "bq"]), Lq)
    k = heads(ad.linear(x, params[p + "Wk"], params[p + "bk"]), L)
    v = heads(ad.linear(x, params[p + "Wv"], params[p + "bv"]), L)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1, mask=mask[:, None, None, :])
    o = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, Lq, D))
    return ad.linear(o, params[p + "Wo"], params[p + "bo"])


def behavior_forward(e_b: Tensor, mask: np.ndarray, params: MccfParams,
                     positions: np.ndarray | None = None) -> Tensor:
    """Post-LN transformer encoder; returns the start-token representation.

    Padded keys get exactly zero attention weight.  The last layer only
    evaluates the start-token query, which is all the output needs.
    """
    cfg = params.config
    L = e_b.shape[1]
    if positions is None:
        positions = np.arange(L)
    mask = np.asarray(mask, dtype=bool)
    x = ad.add(e_b, ad.gather(params["beh.pos"], positions))
    for i in range(cfg.n_layers):
        p = f"beh.L{i}."
        last = i == cfg.n_layers - 1
        a = _attention(x, mask, params, p, first_only=last)
        xs = x[:, :1, :] if last else x
        h = ad.layer_norm(ad.add(xs, a), params[p + "ln1.g"], params[p + "ln1.b"])
        f = ad.linear(ad.relu(ad.linear(h, params[p + "Wf1"], params[p + "bf1"])),
                      params[p + "Wf2"], params[p + "bf2"])
        x = ad.layer_norm(ad.add(h, f), params[p + "ln2.g"], params[p + "ln2.b"])
    return ad.reshape(x[:, 0:1, :], (x.shape[0], x.shape[2]))


# ---------------------------------------------------------------- graph


class SampledGraph:
    """Per-hop neighbor lists, capped at ``sample_size`` by a seeded draw.

    Sampling is a pure function of (seed, node, hop), so repeated forward
    passes see the same neighborhoods.
    """

    def __init__(self, graph: HeteroGraph, depth: int, sample_size: int, seed: int):
        self.graph = graph
        self.attrs = graph.attr_matrix
        self.hops: list[tuple[np.ndarray, np.ndarray]] = []
        for k in range(1, depth + 1):
            indptr = [0]
            indices: list[int] = []
            for v in range(len(graph)):
                nb = graph.neighbor_ids(v)
                if len(nb) > sample_size:
                    pick = np.random.default_rng([seed, v, k]).choice(len(nb), sample_size, replace=False)
                    nb = [nb[j] for j in np.sort(pick)]
                indices.extend(nb)
                indptr.append(len(indices))
            self.hops.append((np.array(indptr, dtype=np.int64), np.array(indices, dtype=np.int64)))

    def neighbors(self, nodes: np.ndarray, hop: int) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated neighbor ids for ``nodes`` and per-node counts."""
        indptr, indices = self.hops[hop - 1]
        starts, ends = indptr[nodes], indptr[nodes + 1]
        counts = ends - starts
        total = int(counts.sum())
        if total == 0:
            return np.zeros(0, dtype=np.int64), counts
        offs = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        return indices[np.arange(total) + offs], counts


def sampled_graph(graph: HeteroGraph, cfg: ModelConfig) -> SampledGraph:
    key = ("sampled", cfg.depth, cfg.sample_size, cfg.sample_seed)
    sg = graph._cache.get(key)
    if sg is None:
        sg = graph._cache[key] = SampledGraph(graph, cfg.depth, cfg.sample_size, cfg.sample_seed)
    return sg


def graph_forward_nodes(nodes: np.ndarray, sg: SampledGraph, params: MccfParams,
                        depth: int | None = None) -> Tensor:
    """Representations h^depth for ``nodes`` (mean aggregator, ReLU)."""
    depth = params.config.depth if depth is None else depth
    nodes = np.asarray(nodes, dtype=np.int64)
    if depth == 0:
        return Tensor(sg.attrs[nodes])
    sets = [nodes]
    plans = []
    for hop in range(depth, 0, -1):
        cur = sets[-1]
        nb, counts = sg.neighbors(cur, hop)
        below = np.unique(np.concatenate([cur, nb]))
        rows = np.repeat(np.arange(len(cur)), counts)
        weights = np.repeat(1.0 / np.maximum(counts, 1), counts)
        agg = sp.csr_matrix((weights, (rows, np.searchsorted(below, nb))), shape=(len(cur), len(below)))
        plans.append((np.searchsorted(below, cur), agg))
        sets.append(below)
    h = Tensor(sg.attrs[sets[-1]])
    for k, (self_pos, agg) in zip(range(1, depth + 1), reversed(plans)):
        own = ad.index(h, self_pos)
        mean_nb = ad.sparse_matmul(agg, h)
        h = ad.relu(ad.linear(ad.concat([own, mean_nb], axis=-1), params[f"graph.W{k}"]))
    return h


def graph_forward(media_node: tuple[str, str] | int, graph: HeteroGraph, params: MccfParams,
                  depth: int | None = None) -> Tensor:
    """h_v^depth for one node, addressed by key or index."""
    if not isinstance(media_node, (int, np.integer)):
        if media_node not in graph:
            raise ContractError(f"unknown node {media_node}")
        media_node = graph.index[media_node]
    elif not 0 <= media_node < len(graph):
        raise ContractError(f"unknown node index {media_node}")
    h = graph_forward_nodes(np.array([media_node]), sampled_graph(graph, params.config), params, depth)
    return ad.reshape(h, (h.shape[-1],))


def media_forward(media: np.ndarray, graph: HeteroGraph, params: MccfParams) -> Tensor:
    """Concatenate IP, Cookie and Device representations; zeros where absent."""
    cfg = params.config
    B = media.shape[0]
    present = media[media >= 0]
    if present.size == 0:
        return Tensor(np.zeros((B, 3 * cfg.graph_dim)))
    uniq, inv = np.unique(present, return_inverse=True)
    h = graph_forward_nodes(uniq, sampled_graph(graph, cfg), params)
    h = ad.concat([h, Tensor(np.zeros((1, cfg.graph_dim)))], axis=0)
    slot = np.full(media.shape, len(uniq), dtype=np.int64)
    slot[media >= 0] = inv
    return ad.reshape(ad.index(h, slot), (B, 3 * cfg.graph_dim))


# ---------------------------------------------------------------- heads


@dataclass
class FusionOutput:
    h1: Tensor
    z2: Tensor
    y_hat: Tensor


def fuse_forward(v_wd: Tensor, v_b: Tensor, v_v: Tensor, params: MccfParams,
                 ablation: Iterable[str] = ()) -> FusionOutput:
    ablation = frozenset(ablation)
    if ablation >= set(MODALITIES):
        raise ContractError("all modalities disabled")
    blocks = []
    for name, v in zip(MODALITIES, (v_wd, v_b, v_v)):
        blocks.append(Tensor(np.zeros(v.shape)) if name in ablation else v)
    x = ad.concat(blocks, axis=-1)
    h1 = ad.relu(ad.linear(x, params["fuse.W1"], params["fuse.b1"]))
    z2 = ad.linear(h1, params["fuse.W2"], params["fuse.b2"])
    return FusionOutput(h1, z2, ad.softmax(z2, axis=-1))


def project_head(source: Tensor, params: MccfParams) -> Tensor:
    """Bias-free MLP into the contrastive space (no output normalisation)."""
    n = len(params.config.proj_dims)
    h = source
    for i in range(1, n + 1):
        h = ad.linear(h, params[f"proj.W{i}"])
        if i < n:
            h = ad.relu(h)
    return h


@dataclass
class ModelOutput:
    v_wd: Tensor
    v_b: Tensor
    v_v: Tensor
    h1: Tensor
    z2: Tensor
    y_hat: Tensor
    z: Tensor


def mccf_forward(batch: FeatureBatch | FeatureBundle, graph: HeteroGraph | None,
                 params: MccfParams, ablation: Iterable[str] = ()) -> ModelOutput:
    cfg = params.config
    if isinstance(batch, FeatureBundle):
        batch = FeatureBatch.from_bundles([batch])
    ablation = frozenset(ablation)
    unknown = ablation - set(MODALITIES)
    if unknown:
        raise ContractError(f"unknown modalities {sorted(unknown)}")
    if ablation >= set(MODALITIES):
        raise ContractError("all modalities disabled")
    B = len(batch)
    E = cfg.embed_dim
    if "wd" in ablation:
        v_wd = Tensor(np.zeros((B, cfg.wd_hidden[-1])))
    else:
        deep = np.asarray(batch.deep_ids) + cfg.deep_offsets[None, :]
        e_d = ad.reshape(embed_lookup(params["deep.embed"], deep), (B, deep.shape[1] * E))
        v_wd = wide_deep_forward(Tensor(batch.wide), e_d, params)
    if "b" in ablation:
        v_b = Tensor(np.zeros((B, E)))
    else:
        e_b, mask, pos = embed_behavior(batch.behavior_ids, batch.behavior_len, params)
        v_b = behavior_forward(e_b, mask, params, pos)
    if "v" in ablation:
        v_v = Tensor(np.zeros((B, 3 * cfg.graph_dim)))
    else:
        if graph is None:
            raise ContractError("graph modality enabled but no graph given")
        v_v = media_forward(np.asarray(batch.media), graph, params)
    fo = fuse_forward(v_wd, v_b, v_v, params, ablation)
    src = fo.h1 if cfg.projection_source == "hidden" else fo.z2
    return ModelOutput(v_wd, v_b, v_v, fo.h1, fo.z2, fo.y_hat, project_head(src, params))
