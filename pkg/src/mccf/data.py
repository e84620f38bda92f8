"""Click records, the media graph, vocabularies and per-click features.

File formats
------------
``clicks.ndjson``
    one JSON object per line with keys ``click_id, click_time, ip,
    cookie_id, device_id, advertiser_id, keyword_id, abs_pos, cd_time,
    cookie_time, pages, wide, label``.
``nodes.csv``
    ``node_type,node_id,a1..as`` with node types IP, CookieID, DeviceID.
``edges.csv``
    ``src_type,src_id,dst_type,dst_id,relation,e1..eq``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import ContractError, ParseError

NODE_TYPES = ("IP", "CookieID", "DeviceID")
DEEP_FIELDS = ("advertiser_id", "keyword_id")
LABELS = {"fraud": 1, "genuine": 0, None: -1}

_REQUIRED = ("click_id", "click_time", "ip", "advertiser_id", "keyword_id", "abs_pos",
             "cd_time", "cookie_time", "pages", "wide")
_OPTIONAL = ("cookie_id", "device_id", "label")
_KEYS = frozenset(_REQUIRED + _OPTIONAL)


@dataclass
class ClickRecord:
    click_id: str
    click_time: int
    ip: str
    cookie_id: str | None
    device_id: str | None
    advertiser_id: str | int
    keyword_id: str | int
    abs_pos: int
    cd_time: float
    cookie_time: int
    pages: list[str]
    wide: list[float]
    label: str | None = None

    @property
    def deep(self) -> tuple:
        return tuple(getattr(self, f) for f in DEEP_FIELDS)

    @property
    def y(self) -> int:
        return LABELS[self.label]

    def to_json(self) -> str:
        obj = {k: getattr(self, k) for k in _REQUIRED + _OPTIONAL}
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _parse_line(obj, lineno: int, wide_dim: int | None) -> ClickRecord:
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: expected a JSON object")
    unknown = set(obj) - _KEYS
    if unknown:
        raise ParseError(f"line {lineno}: unknown field {sorted(unknown)[0]!r}")
    for k in _REQUIRED:
        if k not in obj:
            raise ParseError(f"line {lineno}: missing field {k!r}")
    for k in ("click_time", "abs_pos", "cd_time", "cookie_time"):
        if not _is_number(obj[k]):
            raise ParseError(f"line {lineno}: field {k!r} must be a number")
    if obj["cd_time"] < 0:
        raise ParseError(f"line {lineno}: field 'cd_time' must be >= 0")
    for k in ("click_id", "ip"):
        if not isinstance(obj[k], str):
            raise ParseError(f"line {lineno}: field {k!r} must be a string")
    for k in ("cookie_id", "device_id"):
        if obj.get(k) is not None and not isinstance(obj[k], str):
            raise ParseError(f"line {lineno}: field {k!r} must be a string or null")
    for k in DEEP_FIELDS:
        if not isinstance(obj[k], (str, int)) or isinstance(obj[k], bool):
            raise ParseError(f"line {lineno}: field {k!r} must be a string or integer")
    pages = obj["pages"]
    if not isinstance(pages, list) or not all(isinstance(p, str) for p in pages):
        raise ParseError(f"line {lineno}: field 'pages' must be an array of strings")
    wide = obj["wide"]
    if not isinstance(wide, list) or not all(_is_number(v) for v in wide):
        raise ParseError(f"line {lineno}: field 'wide' must be an array of numbers")
    if wide_dim is not None and len(wide) != wide_dim:
        raise ParseError(f"wide arity {len(wide)} ≠ {wide_dim} at line {lineno}")
    label = obj.get("label")
    if label not in LABELS:
        raise ParseError(f"line {lineno}: field 'label' must be 'fraud', 'genuine' or null")
    return ClickRecord(
        click_id=obj["click_id"], click_time=obj["click_time"], ip=obj["ip"],
        cookie_id=obj.get("cookie_id"), device_id=obj.get("device_id"),
        advertiser_id=obj["advertiser_id"], keyword_id=obj["keyword_id"],
        abs_pos=obj["abs_pos"], cd_time=obj["cd_time"], cookie_time=obj["cookie_time"],
        pages=list(pages), wide=list(wide), label=label)


def parse_click_records(stream: bytes | str | TextIO | Iterable[str],
                        wide_dim: int | None = None) -> list[ClickRecord]:
    """Parse newline-delimited JSON click records, preserving order.

    Blank lines are skipped. Sequences longer than the model window are
    accepted here; truncation happens in :func:`assemble_features`.
    """
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    out = []
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"line {lineno}: invalid JSON ({e.msg})") from None
        out.append(_parse_line(obj, lineno, wide_dim))
    return out


def serialize_click_records(records: Iterable[ClickRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def chronological_split(records: Sequence[ClickRecord], test_fraction: float
                        ) -> tuple[list[ClickRecord], list[ClickRecord]]:
    """Earliest clicks train, latest clicks test (ties broken by click id)."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractError("test_fraction must lie in (0, 1)")
    ordered = sorted(records, key=lambda r: (r.click_time, r.click_id))
    n_test = int(round(len(ordered) * test_fraction))
    cut = len(ordered) - n_test
    return ordered[:cut], ordered[cut:]


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocab:
    """Token to id maps; id 0 is shared by padding and unseen tokens."""

    maps: dict[str, dict[str, int]]

    @classmethod
    def build(cls, records: Iterable[ClickRecord]) -> "Vocab":
        tokens: dict[str, set[str]] = {f: set() for f in (*DEEP_FIELDS, "page")}
        for r in records:
            for f in DEEP_FIELDS:
                tokens[f].add(str(getattr(r, f)))
            tokens["page"].update(r.pages)
        return cls({f: {t: i + 1 for i, t in enumerate(sorted(ts))} for f, ts in tokens.items()})

    def size(self, name: str) -> int:
        return len(self.maps[name]) + 1

    def lookup(self, name: str, token) -> int:
        return self.maps[name].get(str(token), 0)

    def to_dict(self) -> dict:
        return {f: dict(m) for f, m in self.maps.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        missing = {*DEEP_FIELDS, "page"} - set(d)
        if missing:
            raise ParseError(f"vocabulary lacks fields {sorted(missing)}")
        return cls({f: {str(t): int(i) for t, i in m.items()} for f, m in d.items()})


# ---------------------------------------------------------------- graph


@dataclass
class Edge:
    src: int
    dst: int
    relation: str
    attrs: np.ndarray


@dataclass
class HeteroGraph:
    """Undirected graph over typed media nodes.

    Nodes are addressed by ``(node_type, node_id)`` keys and stored at dense
    integer indices.  Each edge is kept once; neighbor lists are unique and
    in insertion order.
    """

    node_dim: int
    edge_dim: int
    keys: list[tuple[str, str]] = field(default_factory=list)
    index: dict[tuple[str, str], int] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    _attrs: list[np.ndarray] = field(default_factory=list)
    _adj: list[list[int]] = field(default_factory=list)
    _adj_set: list[set[int]] = field(default_factory=list)
    _edge_keys: set = field(default_factory=set)
    _cache: dict = field(default_factory=dict)

    def add_node(self, node_type: str, node_id: str, attrs=None) -> int:
        if node_type not in NODE_TYPES:
            raise ContractError(f"unknown node type {node_type!r}")
        key = (node_type, node_id)
        vec = np.zeros(self.node_dim) if attrs is None else np.asarray(attrs, dtype=np.float64)
        if vec.shape != (self.node_dim,):
            raise ContractError(
                f"node {node_type}:{node_id}: attribute arity {vec.size} ≠ {self.node_dim}")
        i = self.index.get(key)
        if i is not None:
            if attrs is not None:
                self._attrs[i] = vec
            return i
        i = len(self.keys)
        self.keys.append(key)
        self.index[key] = i
        self._attrs.append(vec)
        self._adj.append([])
        self._adj_set.append(set())
        self._cache.clear()
        return i

    def add_edge(self, src: tuple[str, str], dst: tuple[str, str], relation: str = "link",
                 attrs=None) -> bool:
        """Add an undirected edge; returns False if it was already present."""
        vec = np.zeros(self.edge_dim) if attrs is None else np.asarray(attrs, dtype=np.float64)
        if vec.shape != (self.edge_dim,):
            raise ContractError(
                f"edge {src[0]}:{src[1]}-{dst[0]}:{dst[1]}: attribute arity {vec.size} ≠ {self.edge_dim}")
        a = self.add_node(*src) if src not in self.index else self.index[src]
        b = self.add_node(*dst) if dst not in self.index else self.index[dst]
        ek = (min(a, b), max(a, b), relation)
        if ek in self._edge_keys:
            return False
        self._edge_keys.add(ek)
        self.edges.append(Edge(a, b, relation, vec))
        for u, v in ((a, b), (b, a)):
            if v not in self._adj_set[u] and u != v:
                self._adj_set[u].add(v)
                self._adj[u].append(v)
        self._cache.clear()
        return True

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return key in self.index

    def neighbors(self, key: tuple[str, str]) -> list[tuple[str, str]]:
        return [self.keys[j] for j in self._adj[self.index[key]]]

    def neighbor_ids(self, i: int) -> list[int]:
        return self._adj[i]

    def degree(self, key: tuple[str, str]) -> int:
        return len(self._adj[self.index[key]])

    def attrs(self, key: tuple[str, str]) -> np.ndarray:
        return self._attrs[self.index[key]]

    @property
    def attr_matrix(self) -> np.ndarray:
        m = self._cache.get("attrs")
        if m is None:
            m = np.vstack(self._attrs) if self._attrs else np.zeros((0, self.node_dim))
            self._cache["attrs"] = m
        return m

    def node_type_ids(self) -> np.ndarray:
        return np.array([NODE_TYPES.index(t) for t, _ in self.keys], dtype=np.int64)


def _read_csv(stream, what: str):
    if isinstance(stream, (str, bytes)):
        stream = io.StringIO(stream.decode("utf-8") if isinstance(stream, bytes) else stream)
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{what}: missing header row") from None
    return header, reader


def build_hetero_graph(edge_stream, node_stream, node_dim: int | None = None,
                       edge_dim: int | None = None) -> HeteroGraph:
    """Build the media graph from ``edges.csv`` and ``nodes.csv`` contents.

    Attribute widths default to whatever the headers declare.  Edge
    endpoints without a node row get zero attribute vectors.
    """
    nh, nrows = _read_csv(node_stream, "nodes.csv")
    eh, erows = _read_csv(edge_stream, "edges.csv")
    if nh[:2] != ["node_type", "node_id"]:
        raise ParseError("nodes.csv: header must start with node_type,node_id")
    if eh[:5] != ["src_type", "src_id", "dst_type", "dst_id", "relation"]:
        raise ParseError("edges.csv: header must start with src_type,src_id,dst_type,dst_id,relation")
    s = len(nh) - 2 if node_dim is None else node_dim
    q = len(eh) - 5 if edge_dim is None else edge_dim
    g = HeteroGraph(node_dim=s, edge_dim=q)
    for lineno, row in enumerate(nrows, start=2):
        if not row:
            continue
        if len(row) - 2 != s:
            raise ParseError(f"nodes.csv line {lineno}: node {row[0]}:{row[1] if len(row) > 1 else ''} "
                             f"has {len(row) - 2} attributes, expected {s}")
        if row[0] not in NODE_TYPES:
            raise ParseError(f"nodes.csv line {lineno}: unknown node type {row[0]!r}")
        g.add_node(row[0], row[1], [float(v) for v in row[2:]])
    for lineno, row in enumerate(erows, start=2):
        if not row:
            continue
        if len(row) - 5 != q:
            raise ParseError(f"edges.csv line {lineno}: edge {':'.join(row[:2])}-{':'.join(row[2:4])} "
                             f"has {len(row) - 5} attributes, expected {q}")
        if row[0] not in NODE_TYPES or row[2] not in NODE_TYPES:
            raise ParseError(f"edges.csv line {lineno}: unknown node type")
        g.add_edge((row[0], row[1]), (row[2], row[3]), row[4], [float(v) for v in row[5:]])
    return g


def _fmt(x: float) -> str:
    return repr(float(x))


def write_graph(graph: HeteroGraph, nodes_out: TextIO, edges_out: TextIO) -> None:
    nodes_out.write(",".join(["node_type", "node_id"] + [f"a{i + 1}" for i in range(graph.node_dim)]) + "\n")
    for (t, nid), vec in zip(graph.keys, graph._attrs):
        nodes_out.write(",".join([t, nid] + [_fmt(v) for v in vec]) + "\n")
    edges_out.write(",".join(["src_type", "src_id", "dst_type", "dst_id", "relation"]
                             + [f"e{i + 1}" for i in range(graph.edge_dim)]) + "\n")
    for e in graph.edges:
        (st, si), (dt, di) = graph.keys[e.src], graph.keys[e.dst]
        edges_out.write(",".join([st, si, dt, di, e.relation] + [_fmt(v) for v in e.attrs]) + "\n")


def save_dataset(directory: str | Path, records: Sequence[ClickRecord], graph: HeteroGraph) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = [d / "clicks.ndjson", d / "nodes.csv", d / "edges.csv"]
    with open(paths[0], "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_click_records(records))
    with open(paths[1], "w", encoding="utf-8", newline="\n") as fn, \
            open(paths[2], "w", encoding="utf-8", newline="\n") as fe:
        write_graph(graph, fn, fe)
    return paths


def load_dataset(directory: str | Path, wide_dim: int | None = None
                 ) -> tuple[list[ClickRecord], HeteroGraph]:
    d = Path(directory)
    with open(d / "clicks.ndjson", encoding="utf-8") as f:
        records = parse_click_records(f, wide_dim)
    with open(d / "edges.csv", encoding="utf-8", newline="") as fe, \
            open(d / "nodes.csv", encoding="utf-8", newline="") as fn:
        graph = build_hetero_graph(fe, fn)
    return records, graph


# ---------------------------------------------------------------- features


@dataclass
class WideScaler:
    """Signed log1p followed by per-column standardisation."""

    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def _squash(x: np.ndarray) -> np.ndarray:
        return np.sign(x) * np.log1p(np.abs(x))

    @classmethod
    def fit(cls, wide: np.ndarray) -> "WideScaler":
        z = cls._squash(np.asarray(wide, dtype=np.float64))
        std = z.std(axis=0)
        return cls(z.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, wide: np.ndarray) -> np.ndarray:
        return (self._squash(np.asarray(wide, dtype=np.float64)) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "WideScaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class FeatureBundle:
    wide: np.ndarray
    deep_ids: np.ndarray
    behavior_ids: np.ndarray
    mask: np.ndarray
    media_refs: tuple[int | None, int | None, int | None]
    label: int


def _media(graph: HeteroGraph | None, node_type: str, node_id: str | None) -> int | None:
    if node_id is None or graph is None:
        return None
    return graph.index.get((node_type, node_id))


def assemble_features(record: ClickRecord, vocab: Vocab, graph: HeteroGraph | None,
                      t_max: int = 300, scaler: WideScaler | None = None) -> FeatureBundle:
    """Turn one click into model inputs.

    The most recent ``t_max`` pages are kept and left-padded with id 0.
    """
    wide = np.asarray(record.wide, dtype=np.float64)
    if scaler is not None:
        wide = scaler.transform(wide)
    deep = np.array([vocab.lookup(f, getattr(record, f)) for f in DEEP_FIELDS], dtype=np.int64)
    pages = record.pages[-t_max:] if t_max > 0 else []
    ids = np.zeros(t_max, dtype=np.int64)
    mask = np.zeros(t_max, dtype=np.int8)
    if pages:
        ids[t_max - len(pages):] = [vocab.lookup("page", p) for p in pages]
        mask[t_max - len(pages):] = 1
    refs = (_media(graph, "IP", record.ip), _media(graph, "CookieID", record.cookie_id),
            _media(graph, "DeviceID", record.device_id))
    return FeatureBundle(wide, deep, ids, mask, refs, record.y)


@dataclass
class FeatureBatch:
    """Column-stacked features for many clicks.

    ``behavior_len`` holds the number of real pages; the padded layout is
    left-aligned padding, so the mask is recoverable from the lengths.
    ``media`` uses -1 for absent media.
    """

    wide: np.ndarray
    deep_ids: np.ndarray
    behavior_ids: np.ndarray
    behavior_len: np.ndarray
    media: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def mask(self) -> np.ndarray:
        t = self.behavior_ids.shape[1]
        return np.arange(t)[None, :] >= (t - self.behavior_len)[:, None]

    def take(self, idx) -> "FeatureBatch":
        idx = np.asarray(idx)
        return FeatureBatch(self.wide[idx], self.deep_ids[idx], self.behavior_ids[idx],
                            self.behavior_len[idx], self.media[idx], self.labels[idx])

    @classmethod
    def from_bundles(cls, bundles: Sequence[FeatureBundle]) -> "FeatureBatch":
        media = np.array([[-1 if m is None else m for m in b.media_refs] for b in bundles],
                         dtype=np.int64).reshape(len(bundles), 3)
        return cls(
            wide=np.vstack([b.wide for b in bundles]),
            deep_ids=np.vstack([b.deep_ids for b in bundles]),
            behavior_ids=np.vstack([b.behavior_ids for b in bundles]).astype(np.int32),
            behavior_len=np.array([int(b.mask.sum()) for b in bundles], dtype=np.int64),
            media=media,
            labels=np.array([b.label for b in bundles], dtype=np.int64))


def assemble_batch(records: Sequence[ClickRecord], vocab: Vocab, graph: HeteroGraph | None,
                   t_max: int = 300, scaler: WideScaler | None = None) -> FeatureBatch:
    return FeatureBatch.from_bundles(
        [assemble_features(r, vocab, graph, t_max, scaler) for r in records])
