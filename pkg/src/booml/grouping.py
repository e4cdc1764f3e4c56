"""Behavioral user statistics and k-means grouping.

Users are clustered on (num_items, category_ratio, avg_popularity) computed
from training positives.  num_items and avg_popularity are heavy-tailed, so
they are log-transformed (switchable) before per-dimension z-scoring.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

KMEANS_MAX_ITERS = 100
KMEANS_TOL = 1e-6


@dataclass
class UserStats:
    num_items: int           # training positives
    category_ratio: float    # distinct categories / num_items
    avg_popularity: float    # mean training popularity of those items


@dataclass
class GroupAssignment:
    group_of: np.ndarray     # (num_users,) group index per user
    centroids: np.ndarray    # (W, 3) in standardized feature space

    @property
    def num_groups(self) -> int:
        return self.centroids.shape[0]


def compute_stats(dataset) -> list[UserStats]:
    """Per-user statistics over training positives; empty users are an error."""
    by_user = dataset.items_by_user("train")
    catalog = dataset.catalog
    out = []
    for u in range(dataset.num_users):
        items = by_user.get(u)
        if items is None or len(items) == 0:
            raise ValueError(f"user {u} has no training positives")
        n = len(items)
        distinct = len(np.unique(catalog.category_of[items]))
        out.append(UserStats(
            num_items=n,
            category_ratio=distinct / n,
            avg_popularity=float(catalog.popularity_of[items].mean()),
        ))
    return out


def feature_matrix(stats: list[UserStats], log_features: bool = True) -> np.ndarray:
    """Standardized (n, 3) feature matrix; constant dimensions keep scale 1."""
    raw = np.array([[s.num_items, s.category_ratio, s.avg_popularity]
                    for s in stats], dtype=np.float64)
    if log_features:
        raw[:, 0] = np.log1p(raw[:, 0])
        raw[:, 2] = np.log1p(raw[:, 2])
    mu = raw.mean(axis=0)
    sd = raw.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return (raw - mu) / sd


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(x: np.ndarray, k: int, seed: int, max_iters: int = KMEANS_MAX_ITERS,
           tol: float = KMEANS_TOL, n_init: int = 8):
    """Best of ``n_init`` k-means++ runs by final WCSS, deterministic per seed.

    Returns (labels, centroids, wcss_history) of the winning run.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= {n}, got {k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _kmeans_once(x, k, rng, max_iters, tol)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    return best


def _kmeans_once(x: np.ndarray, k: int, rng: np.random.Generator,
                 max_iters: int, tol: float):
    """Lloyd iterations with k-means++ init and empty-cluster reseeding.

    An empty cluster is reseeded from the point farthest from its assigned
    centroid (lowest index on ties), which is then pinned to that cluster for
    the iteration.  Stops when every centroid moves less than ``tol`` or after
    ``max_iters`` iterations.
    """
    n = len(x)
    centers = _kmeans_pp_init(x, k, rng)
    wcss_history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        assigned = dists[np.arange(n), labels]
        pinned: set[int] = set()
        for c in range(k):
            if np.any(labels == c):
                continue
            for p in np.argsort(-assigned, kind="stable"):
                if int(p) not in pinned:
                    labels[p] = c
                    pinned.add(int(p))
                    break
        new_centers = np.empty_like(centers)
        for c in range(k):
            new_centers[c] = x[labels == c].mean(axis=0)
        move = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        wcss_history.append(
            float(((x - centers[labels]) ** 2).sum()))
        if move < tol:
            break
    return labels, centers, wcss_history


def cluster_users(stats: list[UserStats], num_groups: int, seed: int,
                  log_features: bool = True) -> GroupAssignment:
    """Group users by k-means over standardized behavior features."""
    if not stats:
        raise ValueError("no user statistics to cluster")
    feats = feature_matrix(stats, log_features)
    labels, centers, _ = kmeans(feats, num_groups, seed)
    return GroupAssignment(group_of=labels, centroids=centers)


def save_groups_csv(path, assignment: GroupAssignment) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "group"])
        for u, g in enumerate(assignment.group_of):
            writer.writerow([u, int(g)])


def load_groups_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [(int(r["user_id"]), int(r["group"])) for r in reader]
    rows.sort()
    return np.asarray([g for _, g in rows], dtype=np.int64)
