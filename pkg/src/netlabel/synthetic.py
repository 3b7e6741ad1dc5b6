"""Seeded synthetic dataset generator with planted metadata/label correlation.

Photos are assigned to users with Zipf-distributed activity, draw their tags,
groups, sets, galleries, words, and locations from Zipf-popular pools, and
categories are planted at the property-value level: each planted category
designates values of its planted properties (enough to cover roughly the
target positive rate), each designated value activates with probability equal
to the planting strength, and every photo holding an activated value is
positive. Photos sharing a planted value therefore share the positive label
with probability equal to the strength; everything else is independent label
noise. Generation is bit-deterministic in the seed.

Per-photo means are calibrated against published benchmark metadata
statistics (see ``SyntheticSpec.mir_like``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, PhotoRecord, UserRecord, make_split

__all__ = ["PLANTABLE_PROPERTIES", "SyntheticSpec", "generate_synthetic"]

# Properties a category can be planted on, keyed like the photo attributes.
PLANTABLE_PROPERTIES = ("tags", "groups", "sets", "galleries", "location", "user", "contact")


def _zipf_probs(n: int, exponent: float = 1.0) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    p = ranks ** (-exponent)
    return p / p.sum()


@dataclass(frozen=True)
class SyntheticSpec:
    """Everything the generator needs; the seed fixes every draw."""

    n_photos: int = 2000
    n_users: int = 400
    n_tags: int = 600
    n_groups: int = 150
    n_sets: int = 800
    n_galleries: int = 250
    n_locations: int = 40
    n_words: int = 400
    n_categories: int = 4
    tags_per_photo: float = 6.0
    groups_per_photo: float = 3.0
    sets_per_photo: float = 1.2
    galleries_per_photo: float = 1.5
    words_per_photo: float = 5.0
    contacts_per_user: float = 2.0
    location_rate: float = 0.6
    # Strength per plantable property, applied to every category unless
    # category_plants lists one mapping per category.
    plant_strengths: dict = field(default_factory=dict)
    category_plants: tuple | None = None
    label_noise: float = 0.02
    target_positive_rate: float = 0.15
    test_fraction: float = 0.5
    seed: int = 7

    def __post_init__(self):
        for name in (
            "n_photos", "n_users", "n_tags", "n_groups", "n_sets",
            "n_galleries", "n_locations", "n_words", "n_categories",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        plants = [self.plant_strengths] if self.category_plants is None else self.category_plants
        for mapping in plants:
            for prop, s in mapping.items():
                if prop not in PLANTABLE_PROPERTIES:
                    raise ValueError(f"unknown plantable property {prop!r}")
                if not 0.0 <= s <= 1.0:
                    raise ValueError(f"strength for {prop!r} must be in [0, 1]")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must be in [0, 1]")
        if self.category_plants is not None:
            if len(self.category_plants) != self.n_categories:
                raise ValueError("category_plants must list one mapping per category")
            object.__setattr__(self, "category_plants", tuple(dict(m) for m in self.category_plants))

    def plants_for(self, category_index: int) -> dict:
        if self.category_plants is not None:
            return self.category_plants[category_index]
        return dict(self.plant_strengths)

    @classmethod
    def mir_like(cls, n_photos: int = 2000, seed: int = 7, **overrides) -> "SyntheticSpec":
        """Per-photo metadata means matching the MIR benchmark statistics
        (10.24 tags, 5.28 groups, 1.72 sets, 0.27 galleries per photo, 2.55
        photos per user)."""
        base = cls(
            n_photos=n_photos,
            n_users=max(1, int(round(n_photos / 2.55))),
            tags_per_photo=10.24,
            groups_per_photo=5.28,
            sets_per_photo=1.72,
            galleries_per_photo=0.27,
            seed=seed,
        )
        return replace(base, **overrides)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        if d["category_plants"] is not None:
            d["category_plants"] = [dict(m) for m in d["category_plants"]]
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if d.get("category_plants") is not None:
            d["category_plants"] = tuple(dict(m) for m in d["category_plants"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def _draw_values(rng, pool: list[str], probs: np.ndarray, mean: float) -> frozenset[str]:
    if not pool or mean <= 0.0:
        return frozenset()
    k = int(rng.poisson(mean))
    k = min(k, len(pool))
    if k == 0:
        return frozenset()
    idx = rng.choice(len(pool), size=k, replace=False, p=probs)
    return frozenset(pool[i] for i in idx)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)

    users = [f"u{i:05d}" for i in range(spec.n_users)]
    tags = [f"t{i:05d}" for i in range(spec.n_tags)]
    groups = [f"g{i:05d}" for i in range(spec.n_groups)]
    galleries = [f"y{i:05d}" for i in range(spec.n_galleries)]
    locations = [f"l{i:05d}" for i in range(spec.n_locations)]
    words = [f"w{i:05d}word" for i in range(spec.n_words)]

    # Contacts first so the user table is complete up front.
    user_records: dict[str, UserRecord] = {}
    for i, uid in enumerate(users):
        k = int(rng.poisson(spec.contacts_per_user))
        k = min(k, spec.n_users - 1)
        contacts: frozenset[str] = frozenset()
        if k > 0:
            others = rng.choice(spec.n_users - 1, size=k, replace=False)
            contacts = frozenset(users[o if o < i else o + 1] for o in others)
        user_records[uid] = UserRecord(uid, contacts)

    # Per-user collection pools (sets are uploader-created).
    sets_per_user = max(1, spec.n_sets // max(1, spec.n_users))
    user_sets = {u: [f"s{u}:{k}" for k in range(sets_per_user)] for u in users}

    tag_p = _zipf_probs(spec.n_tags)
    group_p = _zipf_probs(spec.n_groups)
    gallery_p = _zipf_probs(spec.n_galleries)
    location_p = _zipf_probs(spec.n_locations)
    word_p = _zipf_probs(spec.n_words)
    user_p = _zipf_probs(spec.n_users)

    photos: dict[str, PhotoRecord] = {}
    uploader_idx = (
        rng.choice(spec.n_users, size=spec.n_photos, p=user_p)
        if spec.n_users
        else np.zeros(spec.n_photos, dtype=np.int64)
    )
    for i in range(spec.n_photos):
        pid = f"p{i:06d}"
        uid = users[uploader_idx[i]] if users else "u00000"
        photo_tags = _draw_values(rng, tags, tag_p, spec.tags_per_photo)
        photo_groups = _draw_values(rng, groups, group_p, spec.groups_per_photo)
        pool = user_sets.get(uid, [])
        photo_sets = _draw_values(
            rng, pool, np.full(len(pool), 1.0 / len(pool)) if pool else np.zeros(0),
            spec.sets_per_photo,
        )
        photo_galleries = _draw_values(rng, galleries, gallery_p, spec.galleries_per_photo)
        location = None
        if spec.n_locations and rng.random() < spec.location_rate:
            location = locations[rng.choice(spec.n_locations, p=location_p)]
        wordbag = _draw_values(rng, words, word_p, spec.words_per_photo)
        wordlist = sorted(wordbag)
        title = " ".join(wordlist[:3])
        comments = [" ".join(wordlist[3:])] if len(wordlist) > 3 else []
        photos[pid] = PhotoRecord(
            photo_id=pid,
            uploader_id=uid,
            title=title,
            description="",
            comments=tuple(comments),
            tags=photo_tags,
            groups=photo_groups,
            sets=photo_sets,
            galleries=photo_galleries,
            location_id=location,
            timestamp=int(1_300_000_000 + i),
        )

    # Inverted indexes for planting.
    members: dict[str, dict[str, list[str]]] = {p: {} for p in PLANTABLE_PROPERTIES}
    for pid, rec in photos.items():
        for t in rec.tags:
            members["tags"].setdefault(t, []).append(pid)
        for g in rec.groups:
            members["groups"].setdefault(g, []).append(pid)
        for s in rec.sets:
            members["sets"].setdefault(s, []).append(pid)
        for g in rec.galleries:
            members["galleries"].setdefault(g, []).append(pid)
        if rec.location_id is not None:
            members["location"].setdefault(rec.location_id, []).append(pid)
        members["user"].setdefault(rec.uploader_id, []).append(pid)
    # A contact "value" is a user: activation covers the user's photos and
    # the photos of their contacts.
    for uid, urec in user_records.items():
        reach = list(members["user"].get(uid, []))
        for other in sorted(urec.contact_ids):
            reach.extend(members["user"].get(other, []))
        if reach:
            members["contact"][uid] = reach

    labels: dict[str, dict[str, int]] = {}
    n_target = spec.target_positive_rate * spec.n_photos
    for c in range(spec.n_categories):
        cat = f"cat{c:02d}"
        plants = spec.plants_for(c)
        positive: set[str] = set()
        planted_props = [p for p in PLANTABLE_PROPERTIES if plants.get(p, 0.0) > 0.0]
        if planted_props:
            # Round-robin over planted properties, designating one value at a
            # time until the expected coverage target is met.
            candidates = {
                p: [v for v in sorted(members[p]) if members[p][v]]
                for p in planted_props
            }
            for p in planted_props:
                perm = rng.permutation(len(candidates[p]))
                candidates[p] = [candidates[p][i] for i in perm]
            covered: set[str] = set()
            cursor = {p: 0 for p in planted_props}
            exhausted = False
            while len(covered) < n_target and not exhausted:
                exhausted = True
                for p in planted_props:
                    if cursor[p] >= len(candidates[p]):
                        continue
                    exhausted = False
                    value = candidates[p][cursor[p]]
                    cursor[p] += 1
                    covered.update(members[p][value])
                    if rng.random() < plants[p]:
                        positive.update(members[p][value])
                    if len(covered) >= n_target:
                        break
        noise = rng.random(spec.n_photos) < spec.label_noise
        table: dict[str, int] = {}
        for i, pid in enumerate(photos):
            table[pid] = 1 if (pid in positive or noise[i]) else -1
        labels[cat] = table

    train, test = make_split(list(photos), spec.test_fraction, seed=spec.seed + 1)
    ds = Dataset(
        photos=photos,
        users=user_records,
        labels=labels,
        splits={"train": train, "test": test},
    )
    ds.validate()
    return ds
