"""Top-k ranking and the Recall / Precision / nDCG / HR metrics."""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mmfex.ingest import InteractionSet

log = logging.getLogger(__name__)

METRIC_NAMES = ("recall", "precision", "ndcg", "hit_rate")


@dataclass(frozen=True)
class UserMetrics:
    recall: float
    precision: float
    ndcg: float
    hit_rate: float


@dataclass
class MetricsReport:
    k: int
    recall: float = 0.0
    precision: float = 0.0
    ndcg: float = 0.0
    hit_rate: float = 0.0
    per_user: dict[str, UserMetrics] = field(default_factory=dict)
    skipped_users: int = 0

    @property
    def n_users(self) -> int:
        return len(self.per_user)

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _bkey(s: str) -> bytes:
    return s.encode("utf-8")


def topk(scored: Iterable[tuple[str, float]], k: int) -> list[str]:
    """Highest ``k`` scores, descending; ties go to the smaller item id (bytewise)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    best = heapq.nsmallest(k, scored, key=lambda p: (-p[1], _bkey(p[0])))
    return [item for item, _ in best]


def user_metrics(ranked: Sequence[str], relevant: set[str], k: int) -> UserMetrics:
    ranked = list(ranked)[:k]
    hits = [p for p, item in enumerate(ranked, 1) if item in relevant]
    n_hits = len(hits)
    dcg = sum(1.0 / math.log2(p + 1) for p in hits)
    idcg = sum(1.0 / math.log2(p + 1) for p in range(1, min(k, len(relevant)) + 1))
    return UserMetrics(
        recall=n_hits / len(relevant),
        precision=n_hits / k,
        ndcg=dcg / idcg if idcg > 0 else 0.0,
        hit_rate=1.0 if n_hits else 0.0,
    )


def aggregate(per_user: dict[str, UserMetrics], k: int, skipped: int = 0) -> MetricsReport:
    report = MetricsReport(k=k, per_user=per_user, skipped_users=skipped)
    if not per_user:
        return report
    users = sorted(per_user, key=_bkey)
    for name in METRIC_NAMES:
        total = 0.0
        for u in users:
            total += getattr(per_user[u], name)
        setattr(report, name, total / len(users))
    return report


def _tie_order(items: Sequence[str]) -> np.ndarray:
    order = sorted(range(len(items)), key=lambda n: _bkey(items[n]))
    ranks = np.empty(len(items), dtype=np.int64)
    ranks[order] = np.arange(len(items))
    return ranks


def rank_items(ranker, user: str, k: int, excluded: set[str], tie: np.ndarray | None = None) -> list[str]:
    """Top-k of ``ranker.user_scores(user)`` with ``excluded`` removed."""
    scores = np.asarray(ranker.user_scores(user), dtype=np.float64)
    tie = _tie_order(ranker.items) if tie is None else tie
    keep = np.ones(len(scores), dtype=bool)
    for item in excluded:
        idx = ranker.item_index.get(item)
        if idx is not None:
            keep[idx] = False
    cand = np.flatnonzero(keep)
    order = np.lexsort((tie[cand], -scores[cand]))[:k]
    return [ranker.items[n] for n in cand[order]]


def evaluate_ranker(ranker, truth: InteractionSet, k: int = 20,
                    exclude: Sequence[InteractionSet] = ()) -> MetricsReport:
    """Metrics over every user with held-out items in ``truth``.

    The ranker's own training items plus every pair in ``exclude`` are
    removed from the candidate lists. Users the ranker does not know are
    skipped and counted.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    seen: dict[str, set[str]] = {}
    for s in exclude:
        for u, i in s.pairs:
            seen.setdefault(u, set()).add(i)
    tie = _tie_order(ranker.items)
    train_items = getattr(ranker, "train_items", {})
    per_user: dict[str, UserMetrics] = {}
    skipped = 0
    for user, items in sorted(truth.by_user().items(), key=lambda kv: _bkey(kv[0])):
        if not ranker.knows(user):
            skipped += 1
            continue
        excluded = seen.get(user, set()) | set(train_items.get(user, ()))
        ranked = rank_items(ranker, user, k, excluded, tie)
        per_user[user] = user_metrics(ranked, set(items), k)
    if skipped:
        log.info("evaluation skipped %d users unknown to the model", skipped)
    return aggregate(per_user, k, skipped)


def evaluate(model, split, k: int = 20) -> MetricsReport:
    """Test-set metrics; training and validation items are excluded from rankings."""
    if len(split.test) == 0:
        raise ValueError("test set is empty")
    return evaluate_ranker(model, split.test, k, exclude=[split.train, split.validation])


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report(report: MetricsReport, directory: str | Path, prefix: str = "") -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    summary = directory / f"{prefix}metrics.tsv"
    lines = ["metric\tvalue", f"k\t{report.k}", f"users\t{report.n_users}"]
    lines += [f"{name}\t{_fmt(getattr(report, name))}" for name in METRIC_NAMES]
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    per_user = directory / f"{prefix}per_user.tsv"
    rows = ["user_id\t" + "\t".join(METRIC_NAMES)]
    for user in sorted(report.per_user, key=_bkey):
        m = report.per_user[user]
        rows.append(user + "\t" + "\t".join(_fmt(getattr(m, n)) for n in METRIC_NAMES))
    per_user.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return summary, per_user
