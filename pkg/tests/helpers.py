"""Shared builders and numeric oracles for the verification suite."""

import math

import numpy as np

from booml import data, synth
from booml.data import Dataset, Interaction, ItemCatalog
from booml.encoder import Encoder, EncoderConfig, EncoderKind, init_params
from booml.objectives import UserSlice


def fd_grad(f, x0, eps=1e-5):
    """Central finite differences of a scalar function at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def rel_err(a, b):
    """Relative vector error ||a - b|| / max(||b||, 1e-12)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def make_dataset(seed=0, users=40, items=80, cats=6, min_interactions=3):
    raw = synth.generate(num_users=users, num_items=items, num_categories=cats,
                         seed=seed)
    return data.prepare_dataset(raw, min_interactions=min_interactions)


def manual_dataset(per_user, category_of, popularity_of,
                   num_categories=None):
    """Hand-built Dataset: per_user maps user -> training item list."""
    category_of = np.asarray(category_of, dtype=np.int64)
    popularity_of = np.asarray(popularity_of, dtype=np.int64)
    if num_categories is None:
        num_categories = int(category_of.max()) + 1
    train, t = [], 0
    support, query = {}, {}
    for u in sorted(per_user):
        items = list(per_user[u])
        for i in items:
            train.append(Interaction(u, int(i), 1.0, t))
            t += 1
        if len(items) >= 2:
            cut = max(1, len(items) - 1)
            support[u] = [int(i) for i in items[:cut]]
            query[u] = [int(i) for i in items[cut:]]
    return Dataset(num_users=max(per_user) + 1, num_items=len(category_of),
                   train=train, validation=[], test=[],
                   support=support, query=query,
                   catalog=ItemCatalog(category_of, popularity_of,
                                       num_categories))


def make_encoder(kind, num_users, num_items, d=5, seed=0, num_layers=2,
                 edges=None):
    """Encoder + params; LightGCN gets a graph attached (edges or a default)."""
    config = EncoderConfig(kind=kind, d=d, num_layers=num_layers)
    enc = Encoder(config, num_users, num_items)
    params = init_params(config, num_users, num_items, seed)
    if kind == EncoderKind.LIGHTGCN:
        if edges is None:
            rng = np.random.default_rng(seed + 1)
            us = rng.integers(0, num_users, size=3 * num_items)
            vs = rng.integers(0, num_items, size=3 * num_items)
            edges = (us.tolist(), vs.tolist())
        enc.attach_graph(*edges)
    return enc, params


def random_instance(rng, num_users=3, num_items=8, num_cats=3, d=4,
                    n_pos=3, n_cand=5, kind=EncoderKind.MF):
    """A random scored slice plus its catalog, for gradient oracles."""
    enc, params = make_encoder(kind, num_users, num_items, d=d,
                               seed=int(rng.integers(1 << 30)))
    cats = rng.integers(0, num_cats, size=num_items)
    catalog = ItemCatalog(cats, np.ones(num_items, dtype=np.int64), num_cats)
    user = int(rng.integers(num_users))
    pos = rng.choice(num_items, size=n_pos, replace=False)
    neg = rng.choice(num_items, size=n_pos, replace=True)
    cand = rng.choice(num_items, size=n_cand, replace=False)
    slc = UserSlice(user, pos.astype(np.int64), neg.astype(np.int64),
                    cand.astype(np.int64))
    return enc, params, catalog, slc


def oracle_slice_losses(u, v_rows, pos_idx, neg_idx, cand_idx, cand_cats,
                        num_categories, r_bar):
    """Independent loss formulas over effective rows (fair mean frozen)."""
    gaps = (v_rows[pos_idx] - v_rows[neg_idx]) @ u
    acc = float(np.sum(np.log1p(np.exp(-np.clip(gaps, -500, 500)))))
    scores = v_rows[cand_idx] @ u
    s = np.zeros(num_categories)
    np.add.at(s, cand_cats, scores)
    e = np.exp(s - s.max())
    p = e / e.sum()
    div = float(np.sum(p * np.log(p)))
    sig = 1.0 / (1.0 + np.exp(-scores))
    fair = float(np.mean(np.abs(sig - r_bar)))
    return acc, div, fair


def write_interactions_csv(path, rows, header=None):
    """rows: iterable of (user, item, rating, timestamp, category) tuples."""
    header = header or "user_id,item_id,rating,timestamp,category"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(",".join(str(x) for x in r) + "\n")


def assert_close(a, b, tol=1e-10, msg=""):
    assert abs(float(a) - float(b)) <= tol, (
        f"{msg}: {a} vs {b} (diff {abs(float(a) - float(b)):.3e})")
