"""Dataset records and file I/O.

On disk a dataset is a directory of four files:

* ``photos.jsonl``   one JSON photo record per line, after a header line
* ``users.jsonl``    one JSON user record per line, after a header line
* ``labels.json``    ``{"format_version": 1, "labels": {category: {photo_id: +/-1}}}``
* ``splits.json``    ``{"format_version": 1, "train": [...], "test": [...]}``

The jsonl header line is ``{"format_version": 1, "kind": "photos"|"users"}``.
Photos absent from a category's label map are simply not in that category's
universe. All validation errors carry file names and line numbers.
"""

from __future__ import annotations

import json
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FORMAT_VERSION",
    "PHOTOS_FILE",
    "USERS_FILE",
    "LABELS_FILE",
    "SPLITS_FILE",
    "DatasetFormatError",
    "IntegrityError",
    "PhotoRecord",
    "UserRecord",
    "Dataset",
    "TargetSelection",
    "load_dataset",
    "save_dataset",
    "make_split",
    "select_targets",
    "atomic_write_text",
]

FORMAT_VERSION = 1
PHOTOS_FILE = "photos.jsonl"
USERS_FILE = "users.jsonl"
LABELS_FILE = "labels.json"
SPLITS_FILE = "splits.json"

TARGET_KINDS = ("labels", "tags", "groups")


class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries the file and line number."""


class IntegrityError(ValueError):
    """Referential integrity violation; message names the dangling id."""


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class PhotoRecord:
    """One metadata-bearing photo."""

    photo_id: str
    uploader_id: str
    title: str = ""
    description: str = ""
    comments: tuple[str, ...] = ()
    tags: frozenset[str] = frozenset()
    groups: frozenset[str] = frozenset()
    sets: frozenset[str] = frozenset()
    galleries: frozenset[str] = frozenset()
    location_id: str | None = None
    timestamp: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "comments", tuple(self.comments))
        for name in ("tags", "groups", "sets", "galleries"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))

    def to_json_dict(self) -> dict:
        return {
            "photo_id": self.photo_id,
            "uploader_id": self.uploader_id,
            "title": self.title,
            "description": self.description,
            "comments": list(self.comments),
            "tags": sorted(self.tags),
            "groups": sorted(self.groups),
            "sets": sorted(self.sets),
            "galleries": sorted(self.galleries),
            "location_id": self.location_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PhotoRecord":
        return cls(
            photo_id=str(d["photo_id"]),
            uploader_id=str(d["uploader_id"]),
            title=d.get("title", ""),
            description=d.get("description", ""),
            comments=tuple(d.get("comments", ())),
            tags=frozenset(d.get("tags", ())),
            groups=frozenset(d.get("groups", ())),
            sets=frozenset(d.get("sets", ())),
            galleries=frozenset(d.get("galleries", ())),
            location_id=d.get("location_id"),
            timestamp=d.get("timestamp"),
        )


@dataclass(frozen=True)
class UserRecord:
    """One uploader with their contact list."""

    user_id: str
    contact_ids: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "contact_ids", frozenset(self.contact_ids))
        if self.user_id in self.contact_ids:
            raise IntegrityError(f"user {self.user_id!r} lists itself as a contact")

    def to_json_dict(self) -> dict:
        return {"user_id": self.user_id, "contact_ids": sorted(self.contact_ids)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "UserRecord":
        return cls(str(d["user_id"]), frozenset(d.get("contact_ids", ())))


@dataclass
class Dataset:
    photos: dict[str, PhotoRecord] = field(default_factory=dict)
    users: dict[str, UserRecord] = field(default_factory=dict)
    labels: dict[str, dict[str, int]] = field(default_factory=dict)
    splits: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def validate(self) -> None:
        for pid, photo in self.photos.items():
            if pid != photo.photo_id:
                raise IntegrityError(f"photo table key {pid!r} != record id")
            if photo.uploader_id not in self.users:
                raise IntegrityError(
                    f"photo {pid!r} references unknown uploader {photo.uploader_id!r}"
                )
        for cat, table in self.labels.items():
            for pid, value in table.items():
                if pid not in self.photos:
                    raise IntegrityError(
                        f"label for category {cat!r} references unknown photo {pid!r}"
                    )
                if value not in (-1, 1):
                    raise IntegrityError(
                        f"label for {cat!r}/{pid!r} must be -1 or +1, got {value!r}"
                    )
        for name, ids in self.splits.items():
            if name not in ("train", "test"):
                raise IntegrityError(f"unknown split name {name!r}")
            for pid in ids:
                if pid not in self.photos:
                    raise IntegrityError(f"split {name!r} lists unknown photo {pid!r}")
        overlap = set(self.splits.get("train", ())) & set(self.splits.get("test", ()))
        if overlap:
            raise IntegrityError(
                f"photo {sorted(overlap)[0]!r} appears in both train and test"
            )

    def photo_list(self) -> list[PhotoRecord]:
        return list(self.photos.values())

    def split_ids(self, name: str) -> tuple[str, ...]:
        return tuple(self.splits.get(name, ()))

    def category_universe(self, category: str) -> list[str]:
        """Photo ids labeled for ``category``, in photo-table order."""
        table = self.labels.get(category, {})
        return [pid for pid in self.photos if pid in table]


def _read_jsonl(path: Path, kind: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            if lineno == 1:
                if obj.get("format_version") != FORMAT_VERSION or obj.get("kind") != kind:
                    raise DatasetFormatError(
                        f"{path}:1: expected header with format_version "
                        f"{FORMAT_VERSION} and kind {kind!r}"
                    )
                continue
            rows.append((lineno, obj))
    return rows


def load_dataset(directory) -> Dataset:
    """Load and validate a dataset directory."""
    directory = Path(directory)
    ds = Dataset()

    for lineno, obj in _read_jsonl(directory / USERS_FILE, "users"):
        try:
            rec = UserRecord.from_json_dict(obj)
        except (KeyError, IntegrityError) as exc:
            raise DatasetFormatError(f"{directory / USERS_FILE}:{lineno}: {exc}") from None
        if rec.user_id in ds.users:
            raise DatasetFormatError(
                f"{directory / USERS_FILE}:{lineno}: duplicate user {rec.user_id!r}"
            )
        ds.users[rec.user_id] = rec

    for lineno, obj in _read_jsonl(directory / PHOTOS_FILE, "photos"):
        try:
            rec = PhotoRecord.from_json_dict(obj)
        except KeyError as exc:
            raise DatasetFormatError(
                f"{directory / PHOTOS_FILE}:{lineno}: missing field {exc}"
            ) from None
        if rec.photo_id in ds.photos:
            raise DatasetFormatError(
                f"{directory / PHOTOS_FILE}:{lineno}: duplicate photo {rec.photo_id!r}"
            )
        ds.photos[rec.photo_id] = rec

    labels_path = directory / LABELS_FILE
    with open(labels_path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{labels_path}: {exc}") from None
    if payload.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{labels_path}: unsupported format_version")
    ds.labels = {
        str(cat): {str(pid): int(v) for pid, v in table.items()}
        for cat, table in payload.get("labels", {}).items()
    }

    splits_path = directory / SPLITS_FILE
    with open(splits_path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{splits_path}: {exc}") from None
    if payload.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{splits_path}: unsupported format_version")
    ds.splits = {
        name: tuple(str(p) for p in payload.get(name, ()))
        for name in ("train", "test")
    }

    ds.validate()
    return ds


def save_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    ds.validate()

    lines = [json.dumps({"format_version": FORMAT_VERSION, "kind": "photos"})]
    lines += [json.dumps(p.to_json_dict()) for p in ds.photos.values()]
    atomic_write_text(directory / PHOTOS_FILE, "\n".join(lines) + "\n")

    lines = [json.dumps({"format_version": FORMAT_VERSION, "kind": "users"})]
    lines += [json.dumps(u.to_json_dict()) for u in ds.users.values()]
    atomic_write_text(directory / USERS_FILE, "\n".join(lines) + "\n")

    labels_payload = {
        "format_version": FORMAT_VERSION,
        "labels": {
            cat: {pid: ds.labels[cat][pid] for pid in sorted(ds.labels[cat])}
            for cat in sorted(ds.labels)
        },
    }
    atomic_write_text(
        directory / LABELS_FILE, json.dumps(labels_payload, indent=1) + "\n"
    )

    splits_payload = {
        "format_version": FORMAT_VERSION,
        "train": list(ds.splits.get("train", ())),
        "test": list(ds.splits.get("test", ())),
    }
    atomic_write_text(
        directory / SPLITS_FILE, json.dumps(splits_payload, indent=1) + "\n"
    )


def make_split(
    photo_ids, test_fraction: float = 0.5, seed: int = 0
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Seeded uniform train/test split (returns id tuples in original order)."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError("test_fraction must be in [0, 1]")
    ids = list(photo_ids)
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * len(ids)))
    test_idx = set(rng.permutation(len(ids))[:n_test].tolist())
    train = tuple(pid for i, pid in enumerate(ids) if i not in test_idx)
    test = tuple(pid for i, pid in enumerate(ids) if i in test_idx)
    return train, test


@dataclass(frozen=True)
class TargetSelection:
    """Binary truths per target category plus the feature exclusions that keep
    the target's own metadata out of the model."""

    target_kind: str
    truths: dict[str, dict[str, int]]
    masked_node_families: tuple[str, ...]
    masked_edge_components: tuple[int, ...]


def select_targets(ds: Dataset, target_kind: str, top_k: int = 100) -> TargetSelection:
    """Pick prediction targets.

    ``labels``: the label file's categories as-is with no feature exclusions.
    ``tags`` / ``groups``: the ``top_k`` most frequent values become
    categories over all photos, with absence treated as the negative label;
    the matching indicator family and shared-count edge component are masked.
    """
    if target_kind not in TARGET_KINDS:
        raise ValueError(f"target_kind must be one of {TARGET_KINDS}")
    if target_kind == "labels":
        if not ds.labels:
            raise ValueError("dataset has no labels file content")
        return TargetSelection("labels", dict(ds.labels), (), ())

    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    attr = "tags" if target_kind == "tags" else "groups"
    freq = Counter()
    for p in ds.photos.values():
        freq.update(getattr(p, attr))
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    truths: dict[str, dict[str, int]] = {}
    prefix = "tag" if target_kind == "tags" else "group"
    for value, _ in ranked:
        truths[f"{prefix}:{value}"] = {
            pid: (1 if value in getattr(p, attr) else -1)
            for pid, p in ds.photos.items()
        }
    family = "tag" if target_kind == "tags" else "group"
    component = 0 if target_kind == "tags" else 1
    return TargetSelection(target_kind, truths, (family,), (component,))
