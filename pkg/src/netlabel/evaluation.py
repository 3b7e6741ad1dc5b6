"""Scoring and analysis: ranking precision, balanced error scores,
metadata/label co-occurrence statistics, and relational weight importance."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .data import PhotoRecord, UserRecord
from .features import edge_features
from .learning import DegenerateCategoryError, ber_loss
from .model import EDGE_PROPERTIES, N_EDGE_FEATURES, CategoryModel, as_labeling

__all__ = [
    "average_precision",
    "balanced_error_score",
    "CategoryEval",
    "EvalReport",
    "build_report",
    "StatRow",
    "cooccurrence_stats",
    "weight_importance",
]


def average_precision(scores, truth) -> float:
    """AP of ranking by score descending; ties keep the stable input order."""
    s = np.asarray(scores, dtype=np.float64)
    t = as_labeling(truth, s.shape[0])
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.any(t == 1):
        raise DegenerateCategoryError("average precision needs a positive example")
    order = np.argsort(-s, kind="stable")
    ranked_pos = t[order] == 1
    hits = np.cumsum(ranked_pos)
    ranks = np.arange(1, s.shape[0] + 1)
    precisions = hits[ranked_pos] / ranks[ranked_pos]
    return float(precisions.mean())


def balanced_error_score(pred, truth) -> float:
    """1 minus the balanced error rate, so higher is better."""
    return 1.0 - ber_loss(pred, truth)


@dataclass(frozen=True)
class CategoryEval:
    category: str
    n_items: int
    n_positive: int
    average_precision: float
    balanced_score: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[CategoryEval, ...]
    skipped: tuple[tuple[str, str], ...]  # (category, reason)

    @property
    def map_score(self) -> float:
        return float(np.mean([r.average_precision for r in self.rows]))

    @property
    def mean_balanced_score(self) -> float:
        return float(np.mean([r.balanced_score for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["category,n_items,n_positive,average_precision,balanced_score"]
        for r in self.rows:
            lines.append(
                f"{r.category},{r.n_items},{r.n_positive},"
                f"{r.average_precision!r},{r.balanced_score!r}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [
            f"{'category':<28} {'n':>6} {'pos':>6} {'AP':>8} {'1-BER':>8}",
        ]
        for r in self.rows:
            lines.append(
                f"{r.category:<28} {r.n_items:>6} {r.n_positive:>6} "
                f"{r.average_precision:>8.4f} {r.balanced_score:>8.4f}"
            )
        if self.rows:
            lines.append(
                f"{'MEAN':<28} {'':>6} {'':>6} "
                f"{self.map_score:>8.4f} {self.mean_balanced_score:>8.4f}"
            )
        lines.append(f"categories evaluated: {len(self.rows)}, skipped: {len(self.skipped)}")
        for cat, reason in self.skipped:
            lines.append(f"  skipped {cat}: {reason}")
        return "\n".join(lines) + "\n"


def build_report(entries) -> EvalReport:
    """Assemble a report from ``(category, scores, predictions, truth)``
    tuples; degenerate categories are skipped with a reason."""
    rows = []
    skipped = []
    for category, scores, pred, truth in entries:
        t = as_labeling(truth)
        try:
            ap = average_precision(scores, t)
            bal = balanced_error_score(pred, t)
        except DegenerateCategoryError as exc:
            skipped.append((category, str(exc)))
            continue
        rows.append(
            CategoryEval(category, t.shape[0], int(np.count_nonzero(t == 1)), ap, bal)
        )
    return EvalReport(tuple(rows), tuple(skipped))


# -- co-occurrence statistics -------------------------------------------------


@dataclass(frozen=True)
class StatRow:
    property: str
    shared_count: int
    pair_count: int
    shared_label_probability: float | None


def _label_sharing_pairs(photos, labels) -> set[tuple[int, int]]:
    index = {p.photo_id: i for i, p in enumerate(photos)}
    sharing: set[tuple[int, int]] = set()
    for table in labels.values():
        pos = sorted(index[pid] for pid, v in table.items() if v == 1 and pid in index)
        for i, j in combinations(pos, 2):
            sharing.add((i, j))
    return sharing


def _pair_property_counts(
    photos: list[PhotoRecord], users: dict[str, UserRecord]
) -> dict[str, dict[tuple[int, int], int]]:
    """Shared-count per property for every pair with a nonzero count, via
    inverted indexes (exact)."""
    inv: dict[str, dict[str, list[int]]] = {
        name: defaultdict(list) for name in EDGE_PROPERTIES
    }
    by_user: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(photos):
        for t in p.tags:
            inv["shared_tags"][t].append(i)
        for g in p.groups:
            inv["shared_groups"][g].append(i)
        for s in p.sets:
            inv["shared_sets"][s].append(i)
        for g in p.galleries:
            inv["shared_galleries"][g].append(i)
        if p.location_id is not None:
            inv["same_location"][p.location_id].append(i)
        by_user[p.uploader_id].append(i)
    inv["same_user"] = by_user

    out: dict[str, dict[tuple[int, int], int]] = {}
    for name in EDGE_PROPERTIES[:6]:
        counts: dict[tuple[int, int], int] = defaultdict(int)
        for members in inv[name].values():
            if len(members) < 2:
                continue
            for i, j in combinations(sorted(members), 2):
                counts[(i, j)] += 1
        if name in ("same_location", "same_user"):
            counts = {k: 1 for k in counts}  # indicator, not a count
        out[name] = dict(counts)

    contact_pairs: dict[tuple[int, int], int] = {}
    links: set[tuple[str, str]] = set()
    for uid, urec in users.items():
        if uid not in by_user:
            continue
        for other in urec.contact_ids:
            if other != uid and other in by_user:
                links.add((uid, other) if uid < other else (other, uid))
    for ua, ub in links:
        for i in by_user[ua]:
            for j in by_user[ub]:
                contact_pairs[(i, j) if i < j else (j, i)] = 1
    out["contact"] = contact_pairs
    return out


def cooccurrence_stats(
    photos: list[PhotoRecord],
    users: dict[str, UserRecord],
    labels: dict[str, dict[str, int]],
    pair_budget: int = 5_000_000,
    bucket_cap: int = 10,
    seed: int = 0,
) -> tuple[list[StatRow], dict]:
    """Per relational property, a histogram over photo pairs of shared-item
    count versus the probability that the pair shares at least one label.

    Counting is exact when C(N, 2) fits the pair budget; otherwise
    ``pair_budget`` pairs are sampled uniformly with the given seed (recorded
    in the returned metadata). Counts at or above ``bucket_cap`` share one
    bucket.
    """
    photos = list(photos)
    n = len(photos)
    total_pairs = n * (n - 1) // 2
    sampled = total_pairs > pair_budget
    meta = {
        "total_pairs": total_pairs,
        "sampled": sampled,
        "pair_budget": pair_budget,
        "seed": seed,
        "bucket_cap": bucket_cap,
    }

    rows: list[StatRow] = []
    if not sampled:
        sharing = _label_sharing_pairs(photos, labels)
        per_property = _pair_property_counts(photos, users)
        for name in EDGE_PROPERTIES:
            counts = per_property[name]
            bucket_pairs: dict[int, int] = defaultdict(int)
            bucket_shared: dict[int, int] = defaultdict(int)
            seen_shared = 0
            for pair, c in counts.items():
                b = min(c, bucket_cap)
                bucket_pairs[b] += 1
                if pair in sharing:
                    bucket_shared[b] += 1
                    seen_shared += 1
            bucket_pairs[0] = total_pairs - sum(bucket_pairs.values())
            bucket_shared[0] = len(sharing) - seen_shared
            for b in sorted(bucket_pairs):
                cnt = bucket_pairs[b]
                prob = bucket_shared[b] / cnt if cnt else None
                rows.append(StatRow(name, b, cnt, prob))
        return rows, meta

    # Sampled mode: uniform pairs with replacement.
    rng = np.random.default_rng(seed)
    index = {p.photo_id: i for i, p in enumerate(photos)}
    positive_sets: list[set[int]] = []
    for table in labels.values():
        positive_sets.append(
            {index[pid] for pid, v in table.items() if v == 1 and pid in index}
        )
    acc: dict[str, dict[int, list[int]]] = {
        name: defaultdict(lambda: [0, 0]) for name in EDGE_PROPERTIES
    }
    draws = 0
    while draws < pair_budget:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        draws += 1
        a, b = photos[i], photos[j]
        shares_label = any(i in s and j in s for s in positive_sets)
        vec = edge_features(a, b, users)
        for c, name in enumerate(EDGE_PROPERTIES):
            bkt = min(int(vec[c]), bucket_cap)
            cell = acc[name][bkt]
            cell[0] += 1
            cell[1] += int(shares_label)
    for name in EDGE_PROPERTIES:
        for b in sorted(acc[name]):
            cnt, shared = acc[name][b]
            rows.append(StatRow(name, b, cnt, shared / cnt if cnt else None))
    return rows, meta


def stats_to_csv(rows: list[StatRow]) -> str:
    lines = ["property,shared_count,pair_count,shared_label_probability"]
    for r in rows:
        prob = "" if r.shared_label_probability is None else repr(r.shared_label_probability)
        lines.append(f"{r.property},{r.shared_count},{r.pair_count},{prob}")
    return "\n".join(lines) + "\n"


def weight_importance(models) -> tuple[np.ndarray, int]:
    """Average of the edge-weight vectors after normalizing each to unit sum
    (the models are scale invariant). Models with all-zero edge weights are
    excluded; their count is returned alongside the average."""
    vectors = []
    excluded = 0
    for m in models:
        if not isinstance(m, CategoryModel):
            raise TypeError("weight_importance expects CategoryModel instances")
        total = float(m.theta_edge.sum())
        if total <= 0.0:
            excluded += 1
            continue
        vectors.append(m.theta_edge / total)
    if not vectors:
        raise ValueError("all models have zero edge weights; nothing to average")
    avg = np.mean(np.stack(vectors), axis=0)
    assert avg.shape == (N_EDGE_FEATURES,)
    return avg, excluded
