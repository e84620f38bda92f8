"""Synthetic click logs whose class statistics match published quantiles.

Each quoted quantile pins one parameter of a one-parameter family:
clicks per IP and media per click are geometric on {1, 2, ...}, cookie age
is exponential.  Fraud clicks come in rings that share IP and device nodes
and target a single advertiser.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ClickRecord, HeteroGraph
from .errors import ConfigError, ContractError

PAGE_TYPES = ("Homepage", "Detail", "List", "Search", "Cart", "Order", "Payment",
              "Favorites", "Shop", "Review", "Coupon", "Message")
TOP_PAGES = PAGE_TYPES[:3]

# wide-vector slots holding the generated statistics
CLICKS_PER_IP = 0
COOKIE_AGE = 1
CD_TIME = 2
ABS_POS = 3
PLANTED_WIDE = slice(4, 8)
PLANTED_NODE = slice(1, 5)

T0 = 1_600_000_000
SPAN = 14 * 86_400
RING_WINDOW = 3_600


@dataclass
class GenTargets:
    fraud_tail_p10: float = 0.5469
    genuine_tail_p10: float = 0.1153
    fraud_cdf_900: float = 0.4081
    genuine_cdf_900: float = 0.2478
    fraud_top3_pages: float = 0.99
    fraud_media_tail_p3: float = 0.2186
    genuine_media_tail_p3: float = 0.0631


@dataclass
class GenConfig:
    n_clicks: int = 25_000
    positive_rate: float = 0.1089
    targets: GenTargets = field(default_factory=GenTargets)
    pages: tuple[str, ...] = PAGE_TYPES
    fraud_top3_mass: float = 0.995
    ring_size_min: int = 2
    ring_size_max: int = 8
    seq_len_p: float = 0.5
    seq_len_max: int = 5
    n_advertisers: int = 200
    n_keywords: int = 1000
    wide_dim: int = 40
    node_dim: int = 32
    edge_dim: int = 8
    wide_signal: float = 1.25
    graph_signal: float = 1.75
    # fraction of rings carrying each planted shift; a ring lacking one is
    # detectable only through the other modalities
    wide_signal_share: float = 0.35
    graph_signal_share: float = 0.65
    seed: int = 0

    def validate(self) -> None:
        if self.n_clicks < 1:
            raise ConfigError("generator.n_clicks: must be >= 1")
        probs = {"positive_rate": self.positive_rate, "fraud_top3_mass": self.fraud_top3_mass,
                 "seq_len_p": self.seq_len_p, "wide_signal_share": self.wide_signal_share,
                 "graph_signal_share": self.graph_signal_share, **{f"targets.{k}": v for k, v in asdict(self.targets).items()}}
        for k, v in probs.items():
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"generator.{k}: must lie in [0, 1]")
        if not 2 <= self.ring_size_min <= self.ring_size_max:
            raise ConfigError("generator.ring_size_min/max: need 2 <= min <= max")
        if len(self.pages) < 4:
            raise ConfigError("generator.pages: need at least 4 page types")
        if self.wide_dim < PLANTED_WIDE.stop or self.node_dim < PLANTED_NODE.stop:
            raise ConfigError("generator.wide_dim/node_dim: too small for the planted slots")


def solve_geometric_param(tail_target: float, threshold: int) -> float:
    """Success probability p with P(X >= threshold) = tail_target for X ~ Geom(p) on {1,2,...}."""
    if not 0.0 < tail_target < 1.0:
        raise ContractError(f"tail target {tail_target} outside (0, 1)")
    if threshold < 2:
        raise ContractError("threshold must be >= 2")
    return 1.0 - tail_target ** (1.0 / (threshold - 1))


def solve_exponential_rate(cdf_target: float, t: float) -> float:
    """Rate with P(T <= t) = cdf_target for T ~ Exp(rate)."""
    if not 0.0 < cdf_target < 1.0:
        raise ContractError(f"cdf target {cdf_target} outside (0, 1)")
    if t <= 0:
        raise ContractError("t must be positive")
    return -math.log1p(-cdf_target) / t


def stratified_uniforms(n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform in each of n equal strata of [0, 1), in random order.

    Empirical tail frequencies then sit within 1/n of their targets instead
    of wandering by sampling noise.
    """
    return (rng.permutation(n) + rng.random(n)) / n


def geometric_ppf(u: np.ndarray, p: float) -> np.ndarray:
    """Inverse CDF of Geom(p) on {1, 2, ...}."""
    return np.floor(np.log1p(-u) / math.log1p(-p)).astype(np.int64) + 1


def _ring_sizes(n_fraud: int, cfg: GenConfig, rng: np.random.Generator) -> list[int]:
    if n_fraud == 0:
        return []
    if n_fraud < cfg.ring_size_min:
        raise ConfigError(f"{n_fraud} fraud clicks cannot fill a ring of size {cfg.ring_size_min}")
    sizes, total = [], 0
    while total < n_fraud:
        s = int(rng.integers(cfg.ring_size_min, cfg.ring_size_max + 1))
        s = min(s, n_fraud - total)
        sizes.append(s)
        total += s
    if sizes[-1] < cfg.ring_size_min and len(sizes) > 1:
        # fold the short remainder into the previous ring, splitting evenly
        # when one ring would exceed the maximum
        pair = sizes.pop() + sizes.pop()
        if pair > cfg.ring_size_max and pair // 2 >= cfg.ring_size_min:
            sizes += [pair - pair // 2, pair // 2]
        else:
            sizes.append(pair)
    return sizes


def _fraud_chain(n_pages: int, top_mass: float) -> tuple[np.ndarray, np.ndarray]:
    leak = (1.0 - top_mass) / (n_pages - 3)
    start = np.full(n_pages, leak)
    start[:3] = top_mass * np.array([0.5, 0.3, 0.2])
    rows = {0: [0.1, 0.6, 0.3], 1: [0.3, 0.2, 0.5], 2: [0.2, 0.7, 0.1]}
    trans = np.full((n_pages, n_pages), leak)
    for i in range(n_pages):
        trans[i, :3] = top_mass * np.array(rows.get(i, [0.6, 0.2, 0.2]))
    return start, trans


class _Ids:
    """Unique random-looking identifiers that carry no class information."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.seen: set[str] = set()

    def ip(self) -> str:
        while True:
            a, b, c, d = self.rng.integers(1, 255, size=4)
            s = f"{a}.{b}.{c}.{d}"
            if s not in self.seen:
                self.seen.add(s)
                return s

    def hex(self) -> str:
        while True:
            s = f"{int(self.rng.integers(0, 2**40)):010x}"
            if s not in self.seen:
                self.seen.add(s)
                return s


def _markov(rng, length, start, trans) -> list[int]:
    seq = [int(rng.choice(len(start), p=start))]
    for _ in range(length - 1):
        seq.append(int(rng.choice(len(start), p=trans[seq[-1]])))
    return seq


def generate_dataset(config: GenConfig | None = None) -> tuple[list[ClickRecord], HeteroGraph]:
    """Draw a labelled click log and its media graph.

    Output is a pure function of ``config`` (including ``config.seed``).
    """
    cfg = config or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    ids = _Ids(rng)
    tg = cfg.targets
    n_fraud = int(round(cfg.n_clicks * cfg.positive_rate))
    n_gen = cfg.n_clicks - n_fraud
    sizes = _ring_sizes(n_fraud, cfg, rng)

    p_ip = {1: solve_geometric_param(tg.fraud_tail_p10, 10), 0: solve_geometric_param(tg.genuine_tail_p10, 10)}
    rate = {1: solve_exponential_rate(tg.fraud_cdf_900, 900), 0: solve_exponential_rate(tg.genuine_cdf_900, 900)}
    p_media = {1: solve_geometric_param(tg.fraud_media_tail_p3, 3),
               0: solve_geometric_param(tg.genuine_media_tail_p3, 3)}
    media_draws = {y: iter(geometric_ppf(stratified_uniforms(n, rng), p_media[y]))
                   for y, n in ((1, n_fraud), (0, n_gen))}
    n_pages = len(cfg.pages)
    f_start, f_trans = _fraud_chain(n_pages, cfg.fraud_top3_mass)
    adv_w = 1.0 / np.arange(1, cfg.n_advertisers + 1)
    adv_w /= adv_w.sum()

    graph = HeteroGraph(node_dim=cfg.node_dim, edge_dim=cfg.edge_dim)
    planted: set[int] = set()

    def node(t):
        key = (t, ids.ip() if t == "IP" else ids.hex())
        graph.add_node(*key)
        return key

    def edge(a, b, rel):
        graph.add_edge(a, b, rel, np.round(rng.normal(size=cfg.edge_dim), 4))

    genuine_ips = [node("IP") for _ in range(max(1, n_gen // 3))]

    # (label, time, ip, cookie, device, extras, advertiser, wide shift)
    clicks: list[tuple] = []
    for size in sizes:
        t_start = int(rng.integers(T0, T0 + SPAN - RING_WINDOW))
        ring_ips = [node("IP") for _ in range(int(rng.integers(1, 3)))]
        ring_dev = node("DeviceID")
        proxies = [node("IP") for _ in range(4)]
        # one uniform for both shifts keeps their overlap minimal: with shares
        # summing to 1 every ring carries exactly one of them
        u = rng.random()
        shifted_wide = bool(u < cfg.wide_signal_share)
        if u >= 1.0 - cfg.graph_signal_share:
            planted.update(graph.index[k] for k in ring_ips + [ring_dev] + proxies)
        for ip in ring_ips:
            edge(ring_dev, ip, "link")
        adv = int(rng.choice(cfg.n_advertisers, p=adv_w))
        for j in range(size):
            t = t_start + int(rng.integers(0, RING_WINDOW))
            m = int(next(media_draws[1]))
            ip = ring_ips[j % len(ring_ips)]
            dev = ring_dev if m >= 2 and rng.random() < 0.7 else None
            n_extra = m - 1 - (dev is not None)
            pool = [p for p in proxies if p != ip]
            extras = pool[:n_extra] + [node("IP") for _ in range(n_extra - len(pool))]
            clicks.append((1, t, ip, node("CookieID"), dev, extras, adv, shifted_wide))
    for _ in range(n_gen):
        t = int(rng.integers(T0, T0 + SPAN))
        m = int(next(media_draws[0]))
        ip = genuine_ips[int(rng.integers(len(genuine_ips)))]
        dev = node("DeviceID") if m >= 2 and rng.random() < 0.7 else None
        n_extra = m - 1 - (dev is not None)
        extras: list = []
        while len(extras) < n_extra:
            cand = genuine_ips[int(rng.integers(len(genuine_ips)))]
            if cand != ip and cand not in extras:
                extras.append(cand)
            elif len(genuine_ips) <= n_extra + 1:
                extras.append(node("IP"))
        adv = int(rng.choice(cfg.n_advertisers, p=adv_w))
        clicks.append((0, t, ip, node("CookieID"), dev, extras, adv, False))

    for y, _, ip, ck, dev, extras, _, _ in clicks:
        edge(ck, ip, "visit")
        if dev is not None:
            edge(ck, dev, "login")
            edge(dev, ip, "visit")
        for e in extras:
            edge(ck, e, "visit")

    attrs = rng.normal(size=(len(graph), cfg.node_dim))
    attrs[:, 0] = [np.log1p(len(graph.neighbor_ids(i))) for i in range(len(graph))]
    if planted:
        rows = np.array(sorted(planted))
        attrs[rows, PLANTED_NODE] += cfg.graph_signal
    for i, key in enumerate(graph.keys):
        graph.add_node(*key, attrs=np.round(attrs[i], 4))

    order = sorted(range(len(clicks)), key=lambda i: (clicks[i][1], i))
    ip_draws, age_draws = {}, {}
    for y, n in ((1, n_fraud), (0, n_gen)):
        ip_draws[y] = iter(geometric_ppf(stratified_uniforms(n, rng), p_ip[y]))
        age_draws[y] = iter(-np.log1p(-stratified_uniforms(n, rng)) / rate[y])
    records = []
    for rank, i in enumerate(order):
        y, t, ip, ck, dev, extras, adv, shifted_wide = clicks[i]
        cpi = int(next(ip_draws[y]))
        age = int(round(next(age_draws[y])))
        length = min(int(rng.geometric(cfg.seq_len_p)), cfg.seq_len_max)
        if y:
            seq = _markov(rng, length, f_start, f_trans)
        else:
            seq = [int(v) for v in rng.integers(0, n_pages, size=length)]
        cd = float(np.round(rng.lognormal(2.5, 1.0), 2))
        pos = int(rng.integers(1, 11))
        wide = rng.normal(size=cfg.wide_dim)
        if shifted_wide:
            wide[PLANTED_WIDE] += cfg.wide_signal
        wide[CLICKS_PER_IP] = cpi
        wide[COOKIE_AGE] = age
        wide[CD_TIME] = cd
        wide[ABS_POS] = pos
        records.append(ClickRecord(
            click_id=f"c{rank:07d}", click_time=t, ip=ip[1], cookie_id=ck[1],
            device_id=None if dev is None else dev[1],
            advertiser_id=f"adv{adv}", keyword_id=f"kw{int(rng.integers(cfg.n_keywords))}",
            abs_pos=pos, cd_time=cd, cookie_time=t - age,
            pages=[cfg.pages[s] for s in seq],
            wide=[float(v) for v in np.round(wide, 4)],
            label="fraud" if y else "genuine"))
    return records, graph


# ---------------------------------------------------------------- validation


def media_count(record: ClickRecord, graph: HeteroGraph | None) -> int:
    """Media associated with a click: the cookie's degree, else the present ids."""
    if graph is not None and record.cookie_id is not None and ("CookieID", record.cookie_id) in graph:
        return graph.degree(("CookieID", record.cookie_id))
    return sum(x is not None for x in (record.ip, record.cookie_id, record.device_id))


STAT_NAMES = ("tail_p10", "cdf_900", "top3_pages", "media_tail_p3")


@dataclass
class StatReport:
    counts: dict[str, int]
    stats: dict[str, dict[str, float] | None]
    positive_rate: float | None
    deviations: dict[str, float | None]

    def max_deviation(self) -> float:
        vals = [v for v in self.deviations.values() if v is not None]
        return max(vals) if vals else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def validate_statistics(records, graph: HeteroGraph | None = None,
                        targets: GenTargets | None = None, positive_rate: float = 0.1089,
                        top_pages=TOP_PAGES) -> StatReport:
    """Recompute the class-conditional statistics and their distance to the targets.

    A class with no labelled clicks gets ``None`` in place of its row.
    """
    tg = targets or GenTargets()
    top = set(top_pages)
    by_class: dict[str, list[ClickRecord]] = {"fraud": [], "genuine": []}
    for r in records:
        if r.label in by_class:
            by_class[r.label].append(r)
    stats: dict[str, dict[str, float] | None] = {}
    for name, rs in by_class.items():
        if not rs:
            stats[name] = None
            continue
        n_pages = sum(len(r.pages) for r in rs)
        stats[name] = {
            "tail_p10": float(np.mean([r.wide[CLICKS_PER_IP] >= 10 for r in rs])),
            "cdf_900": float(np.mean([r.click_time - r.cookie_time <= 900 for r in rs])),
            "top3_pages": sum(p in top for r in rs for p in r.pages) / n_pages if n_pages else float("nan"),
            "media_tail_p3": float(np.mean([media_count(r, graph) >= 3 for r in rs])),
        }
    n_f, n_g = len(by_class["fraud"]), len(by_class["genuine"])
    rate = n_f / (n_f + n_g) if n_f + n_g else None

    def dev(cls, stat, target):
        row = stats[cls]
        return None if row is None else abs(row[stat] - target)

    fr = stats["fraud"]
    deviations = {
        "fraud_tail_p10": dev("fraud", "tail_p10", tg.fraud_tail_p10),
        "genuine_tail_p10": dev("genuine", "tail_p10", tg.genuine_tail_p10),
        "fraud_cdf_900": dev("fraud", "cdf_900", tg.fraud_cdf_900),
        "genuine_cdf_900": dev("genuine", "cdf_900", tg.genuine_cdf_900),
        # one-sided: the target is a floor
        "fraud_top3_pages": None if fr is None else max(0.0, tg.fraud_top3_pages - fr["top3_pages"]),
        "fraud_media_tail_p3": dev("fraud", "media_tail_p3", tg.fraud_media_tail_p3),
        "genuine_media_tail_p3": dev("genuine", "media_tail_p3", tg.genuine_media_tail_p3),
        "positive_rate": None if rate is None else abs(rate - positive_rate),
    }
    return StatReport({"fraud": n_f, "genuine": n_g}, stats, rate, deviations)
