"""Feature construction: text tokenization, the indicator vocabulary, node
feature vectors, relational pair features, and network assembly.

Node features are binary indicators over a vocabulary of words, groups, and
tags (presence or absence; repeated words do not increase values). The
vocabulary unions the most popular items of each kind with items enriched in
positively labeled training images, and is always built from training images
only. Categorical families (set / gallery / location / user ids) can be
appended for flat baselines that encode relational data as indicators.

Pair features count shared tags, groups, sets, and galleries, and flag same
location, same uploader, and uploader contact. They are raw counts, not
log-scaled: the learner's nonnegative weights absorb scale.
"""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from importlib import resources
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .data import PhotoRecord, UserRecord
from .model import EDGE_PROPERTIES, N_EDGE_FEATURES, InstanceGraph

__all__ = [
    "STOPWORDS",
    "tokenize",
    "Vocabulary",
    "WORD",
    "GROUP",
    "TAG",
    "CORE_FAMILIES",
    "CATEGORICAL_FAMILIES",
    "build_vocabulary",
    "categorical_values",
    "node_features",
    "edge_features",
    "build_instance_graph",
    "build_node_matrix",
]

WORD = "word"
GROUP = "group"
TAG = "tag"
CORE_FAMILIES = (WORD, GROUP, TAG)
# Flat-baseline indicator families, keyed by the photo attribute they encode.
CATEGORICAL_FAMILIES = ("set", "gallery", "location", "user")

PROVENANCE_POPULAR = "top-popular"
PROVENANCE_ENRICHED = "category-enriched"
PROVENANCE_CATEGORICAL = "categorical"

VOCAB_FORMAT_VERSION = 1

# Items appearing fewer times than this in training never enter via the
# enrichment ratio rule (guards singleton noise).
MIN_ENRICH_COUNT = 2

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def _load_stopwords() -> frozenset[str]:
    text = resources.files(__package__).joinpath("stopwords.txt").read_text("utf-8")
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line)
    return frozenset(words)


STOPWORDS = _load_stopwords()


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on non-alphanumeric boundaries, with stopwords
    and single-character tokens removed. Repetitions are preserved."""
    if not text:
        return []
    tokens = _TOKEN_RE.findall(text.lower())
    return [t for t in tokens if len(t) >= 2 and t not in STOPWORDS]


def photo_words(photo: PhotoRecord) -> list[str]:
    """Word tokens of a photo: title, description, and comment thread are
    pooled into one bag."""
    parts = [photo.title, photo.description, *photo.comments]
    out: list[str] = []
    for p in parts:
        out.extend(tokenize(p))
    return out


@dataclass
class Vocabulary:
    """Indicator index space. Families are concatenated in insertion order
    into one dense, contiguous index space; every entry carries a provenance
    flag."""

    families: dict[str, list[str]]
    provenance: dict[str, list[str]]

    def __post_init__(self):
        for name, values in self.families.items():
            if len(values) != len(set(values)):
                raise ValueError(f"duplicate entries in family {name!r}")
            if len(self.provenance[name]) != len(values):
                raise ValueError(f"provenance length mismatch in family {name!r}")
        self._rebuild_index()

    def _rebuild_index(self):
        self._offsets: dict[str, int] = {}
        self._lookup: dict[str, dict[str, int]] = {}
        offset = 0
        for name, values in self.families.items():
            self._offsets[name] = offset
            self._lookup[name] = {v: offset + i for i, v in enumerate(values)}
            offset += len(values)
        self._size = offset

    @property
    def size(self) -> int:
        return self._size

    def family_slice(self, name: str) -> slice:
        start = self._offsets[name]
        return slice(start, start + len(self.families[name]))

    def family_columns(self, names) -> np.ndarray:
        cols: list[int] = []
        for name in names:
            if name in self.families:
                sl = self.family_slice(name)
                cols.extend(range(sl.start, sl.stop))
        return np.asarray(cols, dtype=np.int64)

    def index(self, family: str, value: str) -> int | None:
        table = self._lookup.get(family)
        if table is None:
            return None
        return table.get(value)

    def entry(self, index: int) -> tuple[str, str]:
        for name, values in self.families.items():
            off = self._offsets[name]
            if off <= index < off + len(values):
                return name, values[index - off]
        raise IndexError(index)

    def with_categorical(self, photos: list[PhotoRecord]) -> "Vocabulary":
        """Vocabulary extended with categorical indicator families drawn from
        the given (training) photos."""
        families = {k: list(v) for k, v in self.families.items()}
        prov = {k: list(v) for k, v in self.provenance.items()}
        for name, values in categorical_values(photos).items():
            families[name] = values
            prov[name] = [PROVENANCE_CATEGORICAL] * len(values)
        return Vocabulary(families, prov)

    def to_json_dict(self) -> dict:
        return {
            "format_version": VOCAB_FORMAT_VERSION,
            "families": [
                {
                    "name": name,
                    "values": list(values),
                    "provenance": list(self.provenance[name]),
                }
                for name, values in self.families.items()
            ],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "Vocabulary":
        if payload.get("format_version") != VOCAB_FORMAT_VERSION:
            raise ValueError("unsupported vocabulary format_version")
        families = {f["name"]: list(f["values"]) for f in payload["families"]}
        prov = {f["name"]: list(f["provenance"]) for f in payload["families"]}
        return cls(families, prov)


def _document_frequencies(photos: list[PhotoRecord]) -> dict[str, Counter]:
    """Per-family document frequencies (presence per photo)."""
    dfs = {WORD: Counter(), GROUP: Counter(), TAG: Counter()}
    for p in photos:
        dfs[WORD].update(set(photo_words(p)))
        dfs[GROUP].update(p.groups)
        dfs[TAG].update(p.tags)
    return dfs


def _top_k(df: Counter, k: int) -> list[str]:
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))
    return [v for v, _ in ranked[:k]]


def build_vocabulary(
    photos: list[PhotoRecord],
    labels: dict[str, int] | None = None,
    popular_k: int = 1000,
    enrich_ratio: float = 2.0,
    include_families=CORE_FAMILIES,
) -> Vocabulary:
    """Vocabulary over training photos: the ``popular_k`` most frequent items
    of each kind, plus items whose rate among positively labeled photos is at
    least ``enrich_ratio`` times their overall rate.

    ``labels`` maps photo_id to +/-1 for the target category; without labels
    (or without positives) only the popularity rule applies. Enrichment
    additionally requires ``MIN_ENRICH_COUNT`` training occurrences.
    """
    if popular_k < 0:
        raise ValueError("popular_k must be >= 0")
    if enrich_ratio < 1.0:
        raise ValueError("enrich_ratio must be >= 1")
    dfs = _document_frequencies(photos)
    positives = (
        [p for p in photos if labels.get(p.photo_id) == 1] if labels else []
    )
    pos_dfs = _document_frequencies(positives) if positives else None

    n_all = len(photos)
    n_pos = len(positives)
    families: dict[str, list[str]] = {}
    provenance: dict[str, list[str]] = {}
    for name in CORE_FAMILIES:
        if name not in include_families:
            continue
        values = _top_k(dfs[name], popular_k)
        prov = [PROVENANCE_POPULAR] * len(values)
        if pos_dfs is not None and n_pos and n_all:
            chosen = set(values)
            enriched = []
            for value, pos_count in pos_dfs[name].items():
                if value in chosen:
                    continue
                all_count = dfs[name][value]
                if all_count < MIN_ENRICH_COUNT:
                    continue
                if pos_count / n_pos >= enrich_ratio * (all_count / n_all):
                    enriched.append(value)
            for value in sorted(enriched):
                values.append(value)
                prov.append(PROVENANCE_ENRICHED)
        families[name] = values
        provenance[name] = prov
    return Vocabulary(families, provenance)


def categorical_values(photos: list[PhotoRecord]) -> dict[str, list[str]]:
    """Sorted id values for the categorical indicator families."""
    sets: set[str] = set()
    galleries: set[str] = set()
    locations: set[str] = set()
    users: set[str] = set()
    for p in photos:
        sets.update(p.sets)
        galleries.update(p.galleries)
        if p.location_id is not None:
            locations.add(p.location_id)
        users.add(p.uploader_id)
    return {
        "set": sorted(sets),
        "gallery": sorted(galleries),
        "location": sorted(locations),
        "user": sorted(users),
    }


def node_features(photo: PhotoRecord, vocab: Vocabulary) -> np.ndarray:
    """Sorted active indicator indices for one photo (all values are 1);
    out-of-vocabulary items are ignored."""
    active: set[int] = set()
    for w in set(photo_words(photo)):
        idx = vocab.index(WORD, w)
        if idx is not None:
            active.add(idx)
    for g in photo.groups:
        idx = vocab.index(GROUP, g)
        if idx is not None:
            active.add(idx)
    for t in photo.tags:
        idx = vocab.index(TAG, t)
        if idx is not None:
            active.add(idx)
    for s in photo.sets:
        idx = vocab.index("set", s)
        if idx is not None:
            active.add(idx)
    for g in photo.galleries:
        idx = vocab.index("gallery", g)
        if idx is not None:
            active.add(idx)
    if photo.location_id is not None:
        idx = vocab.index("location", photo.location_id)
        if idx is not None:
            active.add(idx)
    idx = vocab.index("user", photo.uploader_id)
    if idx is not None:
        active.add(idx)
    return np.asarray(sorted(active), dtype=np.int64)


def build_node_matrix(photos: list[PhotoRecord], vocab: Vocabulary) -> sp.csr_matrix:
    indptr = [0]
    indices: list[int] = []
    for p in photos:
        idx = node_features(p, vocab)
        indices.extend(int(i) for i in idx)
        indptr.append(len(indices))
    data = np.ones(len(indices), dtype=np.float64)
    return sp.csr_matrix(
        (data, np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(photos), vocab.size),
    )


def _contact(a: PhotoRecord, b: PhotoRecord, users: dict[str, UserRecord]) -> bool:
    ua = users.get(a.uploader_id)
    ub = users.get(b.uploader_id)
    return bool(
        (ub is not None and a.uploader_id in ub.contact_ids)
        or (ua is not None and b.uploader_id in ua.contact_ids)
    )


def edge_features(
    a: PhotoRecord, b: PhotoRecord, users: dict[str, UserRecord]
) -> np.ndarray:
    """The 7 relational pair properties, symmetric in (a, b)."""
    if a.photo_id == b.photo_id:
        raise ValueError("pair features need two distinct photos")
    same_loc = (
        a.location_id is not None
        and b.location_id is not None
        and a.location_id == b.location_id
    )
    return np.asarray(
        [
            float(len(a.tags & b.tags)),
            float(len(a.groups & b.groups)),
            float(len(a.sets & b.sets)),
            float(len(a.galleries & b.galleries)),
            1.0 if same_loc else 0.0,
            1.0 if a.uploader_id == b.uploader_id else 0.0,
            1.0 if _contact(a, b, users) else 0.0,
        ],
        dtype=np.float64,
    )


def _property_members(
    photos: list[PhotoRecord], users: dict[str, UserRecord]
) -> dict[int, dict[str, list[int]]]:
    """Inverted indexes: edge feature column -> property value -> photo
    indices (in photo order)."""
    members: dict[int, dict[str, list[int]]] = {
        c: defaultdict(list) for c in range(5)
    }
    by_user: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(photos):
        for t in sorted(p.tags):
            members[0][t].append(i)
        for g in sorted(p.groups):
            members[1][g].append(i)
        for s in sorted(p.sets):
            members[2][s].append(i)
        for g in sorted(p.galleries):
            members[3][g].append(i)
        if p.location_id is not None:
            members[4][p.location_id].append(i)
        by_user[p.uploader_id].append(i)
    members[5] = by_user
    return members


def build_instance_graph(
    photos: list[PhotoRecord],
    users: dict[str, UserRecord],
    vocab: Vocabulary,
    edge_cap: int = 0,
    property_fanout_cap: int = 200,
    masked_edge_components=(),
) -> InstanceGraph:
    """Assemble the network: one node per photo, one edge per unordered pair
    with at least one nonzero relational feature component.

    Property values shared by more than ``property_fanout_cap`` photos
    contribute no edges through that property (caps the clique expansion;
    0 means uncapped). When ``edge_cap`` > 0 and exceeded, edges are ranked
    by number of nonzero components, then total feature sum, then pair id,
    and only the top ``edge_cap`` survive. ``masked_edge_components`` zeroes
    the named feature columns before the all-zero-edge drop (used when a
    relational property is the prediction target).
    """
    if edge_cap < 0 or property_fanout_cap < 0:
        raise ValueError("caps must be >= 0")
    masked = set(int(c) for c in masked_edge_components)
    if masked and (min(masked) < 0 or max(masked) >= N_EDGE_FEATURES):
        raise ValueError("masked edge component out of range")

    def capped(group: list[int]) -> bool:
        return property_fanout_cap > 0 and len(group) > property_fanout_cap

    pair_acc: dict[tuple[int, int], list[float]] = {}

    def bump(i: int, j: int, comp: int, amount: float = 1.0) -> None:
        key = (i, j) if i < j else (j, i)
        vec = pair_acc.get(key)
        if vec is None:
            vec = [0.0] * N_EDGE_FEATURES
            pair_acc[key] = vec
        vec[comp] += amount

    members = _property_members(photos, users)
    for comp in range(6):
        if comp in masked:
            continue
        for value in sorted(members[comp]):
            group = members[comp][value]
            if len(group) < 2 or capped(group):
                continue
            for i, j in combinations(group, 2):
                bump(i, j, comp)

    if 6 not in masked:
        by_user = members[5]
        links: set[tuple[str, str]] = set()
        for uid, urec in users.items():
            if uid not in by_user:
                continue
            for other in urec.contact_ids:
                if other == uid or other not in by_user:
                    continue
                links.add((uid, other) if uid < other else (other, uid))
        for ua, ub in sorted(links):
            ga, gb = by_user[ua], by_user[ub]
            if capped(ga) or capped(gb):
                continue
            for i in ga:
                for j in gb:
                    bump(i, j, 6)

    pairs = []
    for key in sorted(pair_acc):
        vec = pair_acc[key]
        if any(v > 0.0 for v in vec):
            pairs.append((key, vec))

    if edge_cap > 0 and len(pairs) > edge_cap:
        def rank(item):
            (i, j), vec = item
            nnz = sum(1 for v in vec if v > 0.0)
            return (-nnz, -sum(vec), photos[i].photo_id, photos[j].photo_id)

        pairs = sorted(pairs, key=rank)[:edge_cap]
        pairs.sort(key=lambda item: item[0])

    x = build_node_matrix(photos, vocab)
    if pairs:
        ei = np.asarray([key for key, _ in pairs], dtype=np.int64)
        ef = np.asarray([vec for _, vec in pairs], dtype=np.float64)
    else:
        ei, ef = None, None
    ids = tuple(p.photo_id for p in photos)
    return InstanceGraph(ids, x, ei, ef)


assert len(EDGE_PROPERTIES) == N_EDGE_FEATURES
