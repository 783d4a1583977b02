"""Ranking and classification metrics: AUC, GAUC, MRR, NDCG@K, plus report serialization."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _split_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores vs {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    return pos, neg


def auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties worth one half.

    Counts pairs exactly: sorting the negatives lets each positive find how
    many negatives sit strictly below and how many tie with it.
    """
    pos, neg = _split_labels(scores, labels)
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    twice_wins = int(2 * below.sum() + (upto - below).sum())
    return twice_wins / (2 * pos.size * neg.size)


def auc_rank(scores, labels) -> float:
    """Mann-Whitney U statistic with average ranks, normalized to [0, 1]."""
    pos, neg = _split_labels(scores, labels)
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


@dataclass
class GaucResult:
    value: float
    n_users: int
    n_skipped: int


def gauc(groups, weights=None) -> GaucResult:
    """Instance-weighted mean of per-user AUC.

    ``groups`` yields ``(scores, labels)`` per user.  The default weight is
    the user's number of positives, i.e. its test instances.  Users whose
    labels are all one class are skipped and counted.
    """
    num = den = 0.0
    used = skipped = 0
    for i, (s, y) in enumerate(groups):
        y = np.asarray(y).ravel()
        if y.min() == y.max():
            skipped += 1
            continue
        w = float(weights[i]) if weights is not None else float(y.sum())
        num += w * auc(s, y)
        den += w
        used += 1
    if used == 0 or den <= 0:
        raise MetricError("no user with a valid AUC")
    return GaucResult(num / den, used, skipped)


def rank_of_positive(scores, pos_index: int = 0) -> float:
    """1-based rank of ``scores[pos_index]``; ties take the average of the tied ranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    s = scores[pos_index]
    greater = int((scores > s).sum())
    ties = int((scores == s).sum()) - 1
    return 1.0 + greater + ties / 2.0


def mrr(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64).ravel()
    if ranks.size == 0:
        return 0.0
    return float(np.mean(1.0 / ranks))


def ndcg_at_k(rank, k: int) -> float:
    """Single relevant item: ``1 / log2(rank + 1)`` inside the cutoff, else 0."""
    if k < 1:
        raise MetricError("K must be >= 1")
    ranks = np.asarray(rank, dtype=np.float64)
    vals = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(vals.mean()) if vals.ndim else float(vals)


@dataclass
class MetricsReport:
    auc: float
    gauc: float
    mrr: float
    ndcg: dict  # K -> value
    n_instances: int
    gauc_users: int = 0
    gauc_skipped: int = 0
    extra: dict = field(default_factory=dict)

    def flat(self) -> dict:
        out = {
            "auc": self.auc,
            "gauc": self.gauc,
            "mrr": self.mrr,
            "n_instances": self.n_instances,
            "gauc_users": self.gauc_users,
            "gauc_skipped": self.gauc_skipped,
        }
        for k in sorted(self.ndcg):
            out[f"ndcg@{k}"] = self.ndcg[k]
        for k in sorted(self.extra):
            out[k] = self.extra[k]
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["ndcg"] = {int(k): v for k, v in d["ndcg"].items()}
        return cls(**d)


def ranking_report(score_rows, users, ks=(2, 10), extra=None) -> MetricsReport:
    """Metrics over instances whose candidate 0 is the positive.

    ``score_rows`` is ``(n, N)``; ``users`` gives each row's user for GAUC.
    """
    scores = np.asarray(score_rows, dtype=np.float64)
    n, width = scores.shape
    labels = np.zeros_like(scores, dtype=np.int64)
    labels[:, 0] = 1
    ranks = np.array([rank_of_positive(row) for row in scores])
    users = np.asarray(users)
    groups = []
    for u in np.unique(users):
        rows = users == u
        groups.append((scores[rows].ravel(), labels[rows].ravel()))
    g = gauc(groups)
    return MetricsReport(
        auc=auc(scores.ravel(), labels.ravel()),
        gauc=g.value,
        mrr=mrr(ranks),
        ndcg={k: ndcg_at_k(ranks, k) for k in ks},
        n_instances=int(n),
        gauc_users=g.n_users,
        gauc_skipped=g.n_skipped,
        extra=dict(extra or {}),
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_report(report: MetricsReport, stem, header: dict | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (flat ``key=value``) and ``<stem>.json``; returns both paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt, js = Path(f"{stem}.txt"), Path(f"{stem}.json")
    lines = [f"config.{k}={_fmt(v)}" for k, v in sorted((header or {}).items())]
    lines += [f"{k}={_fmt(v)}" for k, v in report.flat().items()]
    txt.write_text("\n".join(lines) + "\n")
    js.write_text(json.dumps({"config": header or {}, "metrics": report.to_dict()}, indent=2, sort_keys=True) + "\n")
    return txt, js


def read_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text())["metrics"])
