"""Synthetic interaction-log generators for desk-scale experiments and tests.

Items get power-law popularity weights and one category each; users draw
events from category-tilted item distributions.  Output is a ``RawLog`` that
feeds straight into :func:`booml.data.preprocess`, or a CSV in the ingest
schema via :func:`write_csv`.
"""

from __future__ import annotations

import numpy as np

from .data import Interaction, RawLog

TIME_RANGE = 10_000_000


def _item_weights(num_items: int, alpha: float, rng: np.random.Generator):
    """Popularity weights proportional to rank^(-alpha), ranks shuffled."""
    ranks = rng.permutation(num_items) + 1
    w = ranks.astype(np.float64) ** (-alpha)
    return w / w.sum()


def _draw_events(rng, n_events, valid_cats, cat_items, cat_probs, focus_cats,
                 focus_prob):
    """Item ids for one user: focused category draws mixed with global draws.

    ``valid_cats`` restricts draws to categories that actually own items.
    """
    items = np.empty(n_events, dtype=np.int64)
    for e in range(n_events):
        if focus_cats is not None and rng.random() < focus_prob:
            c = focus_cats[rng.integers(0, len(focus_cats))]
        else:
            c = int(valid_cats[rng.integers(0, len(valid_cats))])
        pool = cat_items[c]
        items[e] = pool[rng.choice(len(pool), p=cat_probs[c])]
    return items


def _assemble(rng, user_items, ratings, item_category, num_categories,
              num_items):
    interactions = []
    for u, items in enumerate(user_items):
        for e, i in enumerate(items):
            ts = int(rng.integers(0, TIME_RANGE))
            interactions.append(Interaction(u, int(i), float(ratings[u][e]), ts))
    return RawLog(interactions, item_category, num_categories,
                  len(user_items), num_items)


def _ratings(rng, n, positive_rate):
    """Mostly 4/5 star ratings with a sprinkle of sub-threshold ones."""
    r = np.where(rng.random(n) < 0.6, 5.0, 4.0)
    low = rng.random(n) >= positive_rate
    r[low] = rng.integers(1, 4, size=int(low.sum())).astype(np.float64)
    return r


def generate(num_users: int = 500, num_items: int = 1000,
             num_categories: int = 20, seed: int = 0, alpha: float = 0.6,
             events_per_user: tuple[int, int] = (30, 60),
             focus_prob: float = 0.6, positive_rate: float = 0.9) -> RawLog:
    """Desk-scale corpus: power-law item popularity, category-focused users."""
    rng = np.random.default_rng(seed)
    item_category = rng.integers(0, num_categories, size=num_items)
    weights = _item_weights(num_items, alpha, rng)
    cat_items = [np.flatnonzero(item_category == c) for c in range(num_categories)]
    valid = np.asarray([c for c in range(num_categories) if len(cat_items[c])])
    cat_probs = []
    for c in range(num_categories):
        w = weights[cat_items[c]]
        cat_probs.append(w / w.sum() if w.sum() > 0 else w)

    user_items, ratings = [], []
    for _ in range(num_users):
        n = int(rng.integers(events_per_user[0], events_per_user[1] + 1))
        k = min(int(rng.integers(1, 5)), len(valid))
        focus = rng.choice(valid, size=k, replace=False)
        user_items.append(_draw_events(rng, n, valid, cat_items,
                                       cat_probs, focus, focus_prob))
        ratings.append(_ratings(rng, n, positive_rate))
    return _assemble(rng, user_items, ratings, item_category, num_categories,
                     num_items)


def planted_populations(num_users: int = 300, num_items: int = 500,
                        num_categories: int = 15, seed: int = 0,
                        alpha: float = 0.8,
                        events_per_user: tuple[int, int] = (30, 50)) -> RawLog:
    """Corpus with three equal user blocks of distinct behavioral signatures.

    Block 0 concentrates on popular items in two categories, block 1 spreads
    uniformly over all categories, block 2 favours long-tail items.  The
    blocks are separable by (num_items, category_ratio, avg_popularity)
    statistics, so user clustering can recover them.
    """
    rng = np.random.default_rng(seed)
    item_category = rng.integers(0, num_categories, size=num_items)
    weights = _item_weights(num_items, alpha, rng)
    cat_items = [np.flatnonzero(item_category == c) for c in range(num_categories)]
    valid = np.asarray([c for c in range(num_categories) if len(cat_items[c])])

    def probs(tilt):
        out = []
        for c in range(num_categories):
            w = weights[cat_items[c]] ** tilt
            out.append(w / w.sum() if w.sum() > 0 else w)
        return out

    head_probs = probs(1.5)    # popularity-concentrated
    plain_probs = probs(1.0)
    tail_probs = probs(-0.6)   # long-tail tilted

    user_items, ratings = [], []
    third = num_users // 3
    for u in range(num_users):
        n = int(rng.integers(events_per_user[0], events_per_user[1] + 1))
        if u < third:  # accuracy-leaning: narrow and popular
            focus = rng.choice(valid, size=min(2, len(valid)), replace=False)
            items = _draw_events(rng, n, valid, cat_items, head_probs,
                                 focus, 0.95)
        elif u < 2 * third:  # diversity-leaning: spread over categories
            items = _draw_events(rng, n, valid, cat_items, plain_probs,
                                 None, 0.0)
        else:  # fairness-leaning: long-tail engagement
            items = _draw_events(rng, n, valid, cat_items, tail_probs,
                                 None, 0.0)
        user_items.append(items)
        ratings.append(_ratings(rng, n, 0.95))
    return _assemble(rng, user_items, ratings, item_category, num_categories,
                     num_items)


def write_csv(path, raw: RawLog) -> None:
    """Emit a RawLog as a CSV in the ingest schema."""
    with open(path, "w") as fh:
        fh.write("user_id,item_id,rating,timestamp,category\n")
        for it in raw.interactions:
            cat = int(raw.item_category[it.item_id])
            fh.write(f"u{it.user_id},i{it.item_id},{it.rating},"
                     f"{it.timestamp},c{cat}\n")
