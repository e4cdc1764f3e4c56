"""Interaction ingest, positive filtering, chronological splits, negative sampling.

The pipeline is: ``ingest_csv`` -> ``preprocess`` -> ``build_dataset``.  All ids
are dense 0-based integers after ingest; ``preprocess`` re-densifies once more
after filtering so downstream arrays stay compact.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SCHEMA = {
    "user": "user_id",
    "item": "item_id",
    "rating": "rating",
    "timestamp": "timestamp",
    "category": "category",
}

BUNDLE_VERSION = 1


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: float
    timestamp: int


@dataclass
class RawLog:
    """Ingested interactions with dense ids and the per-item category map."""

    interactions: list[Interaction]
    item_category: np.ndarray  # (num_items,) category index per item
    num_categories: int
    num_users: int
    num_items: int


@dataclass
class ItemCatalog:
    category_of: np.ndarray    # (num_items,) int
    popularity_of: np.ndarray  # (num_items,) training-split positive counts
    num_categories: int

    @property
    def num_items(self) -> int:
        return int(len(self.category_of))


@dataclass
class Dataset:
    num_users: int
    num_items: int
    train: list[Interaction]
    validation: list[Interaction]
    test: list[Interaction]
    support: dict[int, list[int]]  # per-user support items, chronological
    query: dict[int, list[int]]    # per-user query items, chronological
    catalog: ItemCatalog
    _by_user: dict = field(default_factory=dict, repr=False, compare=False)
    _pos_arrays: dict = field(default_factory=dict, repr=False, compare=False)

    def items_by_user(self, split: str) -> dict[int, np.ndarray]:
        """Item ids per user for one split, in that split's chronological order."""
        if split not in self._by_user:
            rows = {"train": self.train, "validation": self.validation,
                    "test": self.test}[split]
            out: dict[int, list[int]] = {}
            for it in rows:
                out.setdefault(it.user_id, []).append(it.item_id)
            self._by_user[split] = {
                u: np.asarray(v, dtype=np.int64) for u, v in sorted(out.items())
            }
        return self._by_user[split]

    def train_pos_array(self, user_id: int) -> np.ndarray:
        """Sorted unique training positives of one user (empty if none)."""
        if user_id not in self._pos_arrays:
            items = self.items_by_user("train").get(user_id)
            if items is None:
                arr = np.empty(0, dtype=np.int64)
            else:
                arr = np.unique(items)
            self._pos_arrays[user_id] = arr
        return self._pos_arrays[user_id]

    @property
    def meta_users(self) -> list[int]:
        """Users eligible for support/query training, ascending."""
        return sorted(self.support.keys())


def ingest_csv(path, schema: dict | None = None) -> RawLog:
    """Read an interaction log CSV and densify user/item/category ids.

    Expected columns (renameable through ``schema``): user_id, item_id,
    rating, timestamp, category.  Ratings must lie in [1, 5]; malformed rows
    raise with their line number.  Duplicate (user, item) rows are retained;
    deduplication happens in ``preprocess``.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    cats: dict[str, int] = {}
    item_cat: dict[int, int] = {}
    interactions: list[Interaction] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in schema.values() if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"input CSV is missing columns: {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rating = float(row[schema["rating"]])
                ts = int(row[schema["timestamp"]])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"malformed row at line {lineno}: {exc}") from None
            if not (1.0 <= rating <= 5.0):
                raise ValueError(
                    f"rating {rating} out of range [1, 5] at line {lineno}")
            u = users.setdefault(row[schema["user"]], len(users))
            i = items.setdefault(row[schema["item"]], len(items))
            c = cats.setdefault(row[schema["category"]], len(cats))
            prev = item_cat.setdefault(i, c)
            if prev != c:
                raise ValueError(
                    f"item {row[schema['item']]} has conflicting categories "
                    f"at line {lineno}")
            interactions.append(Interaction(u, i, rating, ts))
    item_category = np.asarray([item_cat[i] for i in range(len(items))],
                               dtype=np.int64)
    return RawLog(interactions, item_category, len(cats), len(users), len(items))


def preprocess(raw: RawLog, min_interactions: int = 10,
               positive_threshold: float = 4.0) -> RawLog:
    """Binarize, deduplicate and filter, then re-densify ids.

    Keeps rows with rating >= positive_threshold, keeps only the latest
    (user, item) positive, and drops users/items with fewer than
    ``min_interactions`` positives, iterating to a fixed point.
    """
    positives = [it for it in raw.interactions
                 if it.rating >= positive_threshold]
    latest: dict[tuple[int, int], Interaction] = {}
    for it in positives:  # file order; later rows win timestamp ties
        key = (it.user_id, it.item_id)
        prev = latest.get(key)
        if prev is None or it.timestamp >= prev.timestamp:
            latest[key] = it
    rows = [latest[k] for k in latest]  # insertion order, stable

    while True:
        ucount: dict[int, int] = {}
        icount: dict[int, int] = {}
        for it in rows:
            ucount[it.user_id] = ucount.get(it.user_id, 0) + 1
            icount[it.item_id] = icount.get(it.item_id, 0) + 1
        kept = [it for it in rows
                if ucount[it.user_id] >= min_interactions
                and icount[it.item_id] >= min_interactions]
        if len(kept) == len(rows):
            break
        rows = kept
    if not rows:
        raise ValueError("no interactions survive preprocessing")

    old_users = sorted({it.user_id for it in rows})
    old_items = sorted({it.item_id for it in rows})
    umap = {u: k for k, u in enumerate(old_users)}
    imap = {i: k for k, i in enumerate(old_items)}
    old_cats = sorted({int(raw.item_category[i]) for i in old_items})
    cmap = {c: k for k, c in enumerate(old_cats)}
    item_category = np.asarray(
        [cmap[int(raw.item_category[i])] for i in old_items], dtype=np.int64)
    rows = [Interaction(umap[it.user_id], imap[it.item_id], it.rating,
                        it.timestamp) for it in rows]
    return RawLog(rows, item_category, len(old_cats), len(old_users),
                  len(old_items))


def chronological_split(interactions: list[Interaction],
                        ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)):
    """Global time-ordered split into train/validation/test lists.

    Sorts by (timestamp, user_id, item_id) then cuts at floor(ratio * n)
    boundaries.  Requires at least 5 interactions and ratios summing to 1.
    """
    if len(interactions) < 5:
        raise ValueError("need at least 5 interactions to split")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    rows = sorted(interactions,
                  key=lambda it: (it.timestamp, it.user_id, it.item_id))
    n = len(rows)
    n_train = int(math.floor(ratios[0] * n))
    n_val = int(math.floor((ratios[0] + ratios[1]) * n)) - n_train
    return rows[:n_train], rows[n_train:n_train + n_val], rows[n_train + n_val:]


def support_query_split(train: list[Interaction], support_fraction: float = 0.8):
    """Per-user split of training positives into support and query sets.

    The earliest ceil(f * n) positives form the support set, the remainder the
    query set; the query set is kept non-empty by moving the latest support
    item over when the ceiling consumes everything.  Users with a single
    training positive are excluded with a warning.
    """
    by_user: dict[int, list[Interaction]] = {}
    for it in train:
        by_user.setdefault(it.user_id, []).append(it)
    support: dict[int, list[int]] = {}
    query: dict[int, list[int]] = {}
    for u in sorted(by_user):
        rows = sorted(by_user[u], key=lambda it: (it.timestamp, it.item_id))
        items = [it.item_id for it in rows]
        if len(items) < 2:
            warnings.warn(
                f"user {u} has a single training positive; "
                f"excluded from meta-training")
            continue
        n_s = int(math.ceil(support_fraction * len(items)))
        n_s = min(n_s, len(items) - 1)  # query must stay non-empty
        support[u] = items[:n_s]
        query[u] = items[n_s:]
    return support, query


def build_dataset(raw: RawLog,
                  ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
                  support_fraction: float = 0.8) -> Dataset:
    """Assemble a Dataset from preprocessed positives.

    Popularity counts come from the training split only; items absent from it
    keep popularity 0.
    """
    train, val, test = chronological_split(raw.interactions, ratios)
    support, query = support_query_split(train, support_fraction)
    item_ids = np.asarray([it.item_id for it in train], dtype=np.int64)
    popularity = np.bincount(item_ids, minlength=raw.num_items)
    catalog = ItemCatalog(raw.item_category.copy(), popularity.astype(np.int64),
                          raw.num_categories)
    return Dataset(raw.num_users, raw.num_items, train, val, test,
                   support, query, catalog)


def prepare_dataset(raw: RawLog, min_interactions: int = 10,
                    positive_threshold: float = 4.0,
                    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
                    support_fraction: float = 0.8) -> Dataset:
    """Full preprocessing pipeline from an ingested log to a Dataset."""
    return build_dataset(preprocess(raw, min_interactions, positive_threshold),
                         ratios, support_fraction)


def sample_negative(dataset: Dataset, user_id: int, rng: np.random.Generator) -> int:
    """One uniform negative for a user: an item with no training positive.

    Rejection-samples over the item universe; raises if the user has
    interacted with every item.
    """
    return int(sample_negatives(dataset, user_id, 1, rng)[0])


def sample_negatives(dataset: Dataset, user_id: int, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Vectorized rejection sampling of ``n`` uniform negatives for a user."""
    pos = dataset.train_pos_array(user_id)
    if len(pos) >= dataset.num_items:
        raise ValueError(f"user {user_id} has interacted with every item; "
                         f"no negatives exist")
    out = np.empty(n, dtype=np.int64)
    filled = 0
    while filled < n:
        draw = rng.integers(0, dataset.num_items, size=2 * (n - filled) + 8)
        ok = draw[~np.isin(draw, pos)]
        take = min(len(ok), n - filled)
        out[filled:filled + take] = ok[:take]
        filled += take
    return out


def save_bundle(dataset: Dataset, path) -> None:
    """Serialize a Dataset to the JSON bundle format (see README)."""
    def rows(split):
        return [[it.user_id, it.item_id, it.rating, it.timestamp]
                for it in split]

    payload = {
        "version": BUNDLE_VERSION,
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "num_categories": dataset.catalog.num_categories,
        "category_of": dataset.catalog.category_of.tolist(),
        "popularity_of": dataset.catalog.popularity_of.tolist(),
        "train": rows(dataset.train),
        "validation": rows(dataset.validation),
        "test": rows(dataset.test),
        "support": {str(u): v for u, v in sorted(dataset.support.items())},
        "query": {str(u): v for u, v in sorted(dataset.query.items())},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, separators=(",", ":"))


def load_bundle(path) -> Dataset:
    """Inverse of ``save_bundle``; round-trips losslessly."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {payload.get('version')}")

    def rows(key):
        return [Interaction(int(u), int(i), float(r), int(t))
                for u, i, r, t in payload[key]]

    catalog = ItemCatalog(
        np.asarray(payload["category_of"], dtype=np.int64),
        np.asarray(payload["popularity_of"], dtype=np.int64),
        int(payload["num_categories"]),
    )
    return Dataset(
        int(payload["num_users"]), int(payload["num_items"]),
        rows("train"), rows("validation"), rows("test"),
        {int(u): [int(x) for x in v] for u, v in payload["support"].items()},
        {int(u): [int(x) for x in v] for u, v in payload["query"].items()},
        catalog,
    )
