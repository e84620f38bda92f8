"""Classification metrics and multi-run aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

METRIC_NAMES = ("precision", "recall", "f1", "auc")


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC is undefined without both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) with ``score >= threshold`` predicted positive."""
    pred = np.asarray(scores) >= threshold
    y = np.asarray(labels).astype(bool)
    return (int((pred & y).sum()), int((pred & ~y).sum()),
            int((~pred & y).sum()), int((~pred & ~y).sum()))


def score_report(scores, labels, threshold: float = 0.5) -> dict[str, float | None]:
    tp, fp, fn, _ = confusion(scores, labels, threshold)
    p, r, f1 = precision_recall_f1(tp, fp, fn)
    y = np.asarray(labels)
    a = auc(scores, y) if 0 < y.sum() < len(y) else None
    return {"precision": p, "recall": r, "f1": f1, "auc": a}


@dataclass
class MetricsReport:
    runs: list[dict[str, float | None]]
    variant: str = "full"
    mean: dict[str, float | None] = field(init=False)
    std: dict[str, float | None] = field(init=False)

    def __post_init__(self):
        self.mean, self.std = {}, {}
        for m in METRIC_NAMES:
            vals = [r.get(m) for r in self.runs]
            if not vals or any(v is None for v in vals):
                self.mean[m] = self.std[m] = None
                continue
            arr = np.array(vals, dtype=np.float64)
            self.mean[m] = float(arr.mean())
            self.std[m] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"runs": self.runs, "mean": self.mean, "std": self.std, "variant": self.variant}
