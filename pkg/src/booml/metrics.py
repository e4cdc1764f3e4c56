"""Top-K evaluation: ranking accuracy, list diversity, popularity, overall score.

NDCG uses binary gains with log2 discounting.  ILD is the mean pairwise
Euclidean distance between the *effective* item embeddings of each list.  ARP
is the mean training-split popularity of recommended items.  ``scalarize``
folds the three into a single score; ``constraint_penalty`` adds soft
threshold handling on top.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import expit

from .encoder import Encoder, ModelParams

RES_SUM = "ressum"
HAR_MEAN = "harmean"


@dataclass
class MetricReport:
    k: int
    ndcg: float
    ild: float
    arp: float
    res_sum: float
    har_mean: float
    constraint_penalty: float

    def to_dict(self) -> dict:
        return {"k": self.k, "ndcg": self.ndcg, "ild": self.ild,
                "arp": self.arp, "res_sum": self.res_sum,
                "har_mean": self.har_mean,
                "constraint_penalty": self.constraint_penalty}


def top_k(scores, k: int, exclude=None) -> np.ndarray:
    """Indices of the k highest scores, ties broken by ascending index.

    ``exclude`` lists indices barred from the result.  If fewer than k
    candidates remain the list is shorter and a warning is emitted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    masked = scores.copy()
    n_excl = 0
    if exclude is not None:
        excl = np.unique(np.asarray(exclude, dtype=np.int64))
        if excl.size:
            masked[excl] = -np.inf
            n_excl = excl.size
    order = np.lexsort((np.arange(len(masked)), -masked))
    avail = len(masked) - n_excl
    if avail < k:
        warnings.warn(f"only {avail} candidates available for a top-{k} list")
    return order[:min(k, avail)]


def ndcg_at_k(lists: dict[int, np.ndarray], truth: dict[int, np.ndarray],
              k: int) -> float:
    """Mean NDCG@k over users with non-empty ground truth.

    DCG sums 1/log2(rank + 1) over hit positions (1-based ranks); the ideal
    DCG places min(k, |truth|) hits at the top.
    """
    per_user = []
    for u in sorted(lists):
        t = truth.get(u)
        if t is None or len(t) == 0:
            continue
        per_user.append(ndcg_single(np.asarray(lists[u])[:k], np.asarray(t), k))
    if not per_user:
        raise ValueError("no users with non-empty ground truth")
    return float(np.mean(per_user))


def ndcg_single(rec: np.ndarray, truth: np.ndarray, k: int) -> float:
    truth_set = np.unique(truth)
    hits = np.isin(rec[:k], truth_set)
    ranks = np.flatnonzero(hits) + 1
    dcg = float(np.sum(1.0 / np.log2(ranks + 1.0)))
    ideal = min(k, truth_set.size)
    idcg = float(np.sum(1.0 / np.log2(np.arange(1, ideal + 1) + 1.0)))
    return dcg / idcg


def ild_at_k(lists: dict[int, np.ndarray], item_vecs: np.ndarray) -> float:
    """Mean over users of the average pairwise distance within their list.

    The average runs over ordered pairs, which coincides with the mean of the
    unordered pairwise distances.  Lists with fewer than 2 items are skipped.
    """
    per_user = []
    for u in sorted(lists):
        rl = np.asarray(lists[u], dtype=np.int64)
        if rl.size < 2:
            continue
        per_user.append(float(pdist(item_vecs[rl]).mean()))
    if not per_user:
        raise ValueError("no users with lists of length >= 2")
    return float(np.mean(per_user))


def arp_at_k(lists: dict[int, np.ndarray], popularity: np.ndarray) -> float:
    """Mean over users of the average popularity of their recommended items."""
    per_user = []
    for u in sorted(lists):
        rl = np.asarray(lists[u], dtype=np.int64)
        if rl.size == 0:
            continue
        per_user.append(float(popularity[rl].mean()))
    if not per_user:
        raise ValueError("no users with non-empty lists")
    return float(np.mean(per_user))


def scalarize(ndcg: float, ild: float, arp: float, mode: str = RES_SUM) -> float:
    """Overall score g(NDCG, ILD, ARP).

    ressum:  NDCG + sigmoid(ILD) + sigmoid(1/ARP)
    harmean: harmonic mean of the same three terms; defined as 0 when NDCG
    is 0.  sigmoid(1/ARP) is taken as 1 when ARP is 0 (its limit).
    """
    if ndcg < 0 or ild < 0 or arp < 0:
        raise ValueError("metric inputs must be non-negative")
    s_ild = float(expit(ild))
    s_arp = 1.0 if arp == 0 else float(expit(1.0 / arp))
    if mode == RES_SUM:
        return ndcg + s_ild + s_arp
    if mode == HAR_MEAN:
        if ndcg == 0:
            return 0.0
        return 3.0 / (1.0 / ndcg + 1.0 / s_ild + 1.0 / s_arp)
    raise ValueError(f"unknown scalarization mode {mode!r}")


def constraint_penalty(ndcg: float, ild: float, arp: float,
                       thresholds: tuple[float, float, float],
                       kappa: float) -> float:
    """kappa-weighted sum of threshold violations (hinge form).

    thresholds = (tau_acc, tau_div, tau_fair): NDCG and ILD must stay above
    their floors, ARP below its ceiling (use inf to disable).
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    tau_acc, tau_div, tau_fair = thresholds
    violation = (max(tau_acc - ndcg, 0.0) + max(tau_div - ild, 0.0)
                 + max(arp - tau_fair, 0.0))
    return kappa * violation


def xi_value(report: MetricReport, mode: str = RES_SUM) -> float:
    """Trial observation: overall score minus the constraint penalty."""
    base = report.res_sum if mode == RES_SUM else report.har_mean
    return base - report.constraint_penalty


def recommend_lists(enc: Encoder, params: ModelParams, dataset, k: int,
                    split: str = "validation") -> dict[int, np.ndarray]:
    """Top-k lists for every user, excluding known positives.

    Training positives are always excluded; evaluating on the test split also
    excludes validation positives.
    """
    u_eff, v_eff = enc.effective(params)
    train_items = dataset.items_by_user("train")
    val_items = dataset.items_by_user("validation") if split == "test" else {}
    lists: dict[int, np.ndarray] = {}
    block = 512
    for start in range(0, dataset.num_users, block):
        stop = min(start + block, dataset.num_users)
        scores = u_eff[start:stop] @ v_eff.T
        for u in range(start, stop):
            excl = train_items.get(u, np.empty(0, dtype=np.int64))
            if u in val_items:
                excl = np.concatenate([excl, val_items[u]])
            lists[u] = top_k(scores[u - start], k, excl)
    return lists


def evaluate_model(enc: Encoder, params: ModelParams, dataset, k: int,
                   split: str = "validation",
                   thresholds: tuple[float, float, float] = (0.0, 0.0, math.inf),
                   kappa: float = 0.0,
                   lists: dict[int, np.ndarray] | None = None) -> MetricReport:
    """MetricReport at cutoff k on one split."""
    if lists is None:
        lists = recommend_lists(enc, params, dataset, k, split)
    truth = dataset.items_by_user(split)
    _, v_eff = enc.effective(params)
    ndcg = ndcg_at_k(lists, truth, k)
    ild = ild_at_k(lists, v_eff)
    arp = arp_at_k(lists, dataset.catalog.popularity_of)
    penalty = constraint_penalty(ndcg, ild, arp, thresholds, kappa)
    return MetricReport(k=k, ndcg=ndcg, ild=ild, arp=arp,
                        res_sum=scalarize(ndcg, ild, arp, RES_SUM),
                        har_mean=scalarize(ndcg, ild, arp, HAR_MEAN),
                        constraint_penalty=penalty)


def group_reports(enc: Encoder, params: ModelParams, dataset, groups, k: int,
                  split: str = "test") -> dict[int, dict]:
    """Per-group NDCG/ILD/ARP at cutoff k (nan where a group lacks data)."""
    lists = recommend_lists(enc, params, dataset, k, split)
    truth = dataset.items_by_user(split)
    _, v_eff = enc.effective(params)
    out: dict[int, dict] = {}
    for g in range(groups.num_groups):
        members = [u for u in lists if groups.group_of[u] == g]
        sub = {u: lists[u] for u in members}
        row = {}
        for name, fn in (("ndcg", lambda s: ndcg_at_k(s, truth, k)),
                         ("ild", lambda s: ild_at_k(s, v_eff)),
                         ("arp", lambda s: arp_at_k(s, dataset.catalog.popularity_of))):
            try:
                row[name] = fn(sub)
            except ValueError:
                row[name] = float("nan")
        row["num_users"] = len(members)
        out[g] = row
    return out
