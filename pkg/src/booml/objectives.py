"""Accuracy, diversity and fairness training objectives and their gradients.

Conventions:
  * accuracy: pairwise ranking loss summed over (user, pos, neg) triples,
    -log sigmoid(score_pos - score_neg), numerically via logaddexp.
  * diversity: per user, the negative entropy of the softmax over per-category
    aggregated candidate scores (natural log); empty categories keep logit 0.
  * fairness: mean absolute deviation of sigmoid scores from their sample mean
    r_bar; r_bar is treated as a constant in gradients (stop-gradient) and the
    subgradient of |x| at 0 is taken as 0.

All gradients are available both at whole-parameter level (for tests) and
restricted to a ParamView's coordinates (the training hot path).  Under the
propagated encoder the view gradient is the full backpropagated gradient
restricted to the view's coordinates, other parameters held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .encoder import Encoder, ModelParams, ParamView

WEIGHT_LO = 0.01
WEIGHT_HI = 10.0


class ObjectiveKind(Enum):
    ACCURACY = "accuracy"
    DIVERSITY = "diversity"
    FAIRNESS = "fairness"


OBJECTIVE_ORDER = (ObjectiveKind.ACCURACY, ObjectiveKind.DIVERSITY,
                   ObjectiveKind.FAIRNESS)


@dataclass
class GroupWeights:
    """Per-group diversity (lam) and fairness (beta) weights, in [0.01, 10]."""

    lam: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.lam.shape != self.beta.shape or self.lam.ndim != 1:
            raise ValueError("lam and beta must be 1-d arrays of equal length")
        both = np.concatenate([self.lam, self.beta])
        if np.any(both < WEIGHT_LO) or np.any(both > WEIGHT_HI):
            raise ValueError(
                f"weights must lie in [{WEIGHT_LO}, {WEIGHT_HI}]")

    @property
    def num_groups(self) -> int:
        return len(self.lam)


@dataclass
class UserSlice:
    """One user's training slice: ranking triples plus candidate items."""

    user_id: int
    pos_items: np.ndarray   # positives j, one ranking triple per entry
    neg_items: np.ndarray   # matched negatives k, same length
    cand_items: np.ndarray  # candidates for the diversity/fairness terms

    def __post_init__(self):
        self.pos_items = np.asarray(self.pos_items, dtype=np.int64)
        self.neg_items = np.asarray(self.neg_items, dtype=np.int64)
        self.cand_items = np.asarray(self.cand_items, dtype=np.int64)
        if self.pos_items.shape != self.neg_items.shape:
            raise ValueError("pos_items and neg_items must be matched 1:1")


# ---------------------------------------------------------------------------
# score-space terms: losses and gradients given resolved embedding rows

def _acc_terms(u, vj, vk):
    gaps = (vj - vk) @ u
    loss = float(np.logaddexp(0.0, -gaps).sum())
    coeff = -expit(-gaps)            # d/dgap of -log sigmoid(gap)
    gu = coeff @ (vj - vk)
    gvj = coeff[:, None] * u
    return loss, gu, gvj, -gvj


def _div_terms(u, vc, cats, num_categories):
    scores = vc @ u
    s = np.zeros(num_categories)
    np.add.at(s, cats, scores)
    e = np.exp(s - s.max())
    p = e / e.sum()
    logp = np.zeros_like(p)
    nz = p > 0
    logp[nz] = np.log(p[nz])
    loss = float((p * logp).sum())
    gs = p * (logp - loss)           # d/ds_m of sum p log p
    gcand = gs[cats]
    gu = gcand @ vc
    gvc = gcand[:, None] * u
    return loss, gu, gvc, p


def _fair_terms(u, vc, r_bar=None):
    scores = vc @ u
    sig = expit(scores)
    rb = float(sig.mean()) if r_bar is None else float(r_bar)
    dev = sig - rb
    loss = float(np.abs(dev).mean())
    coeff = np.sign(dev) * sig * (1.0 - sig) / len(scores)
    gu = coeff @ vc
    gvc = coeff[:, None] * u
    return loss, gu, gvc


# ---------------------------------------------------------------------------
# whole-parameter losses (tests, evaluation, SGD loss tracking)

def loss_accuracy(enc: Encoder, params: ModelParams, triples) -> float:
    """Ranking loss summed over (user, pos item, neg item) triples."""
    u_arr, j_arr, k_arr = (np.asarray(a, dtype=np.int64) for a in triples)
    if u_arr.size == 0:
        return 0.0
    u_eff, v_eff = enc.effective(params)
    gaps = np.einsum("nd,nd->n", u_eff[u_arr], v_eff[j_arr] - v_eff[k_arr])
    return float(np.logaddexp(0.0, -gaps).sum())


def category_distribution(enc: Encoder, params: ModelParams, catalog,
                          user_id: int, candidate_items) -> np.ndarray:
    """Softmax over per-category aggregated scores of the candidate items.

    Categories with no candidate item keep an aggregated score of 0 before
    the softmax, so the distribution always spans the whole catalog's
    category set.
    """
    cand = np.asarray(candidate_items, dtype=np.int64)
    if cand.size and (cand.min() < 0 or cand.max() >= catalog.num_items):
        raise IndexError("candidate item id out of range")
    u_eff, v_eff = enc.effective(params)
    scores = v_eff[cand] @ u_eff[user_id]
    s = np.zeros(catalog.num_categories)
    np.add.at(s, catalog.category_of[cand], scores)
    e = np.exp(s - s.max())
    return e / e.sum()


def loss_diversity(enc: Encoder, params: ModelParams, catalog,
                   candidates: dict[int, np.ndarray]) -> float:
    """Sum over users of the negative entropy of their category distribution."""
    if not candidates:
        raise ValueError("need at least one user")
    u_eff, v_eff = enc.effective(params)
    total = 0.0
    for user_id, cand in candidates.items():
        cand = np.asarray(cand, dtype=np.int64)
        loss, _, _, _ = _div_terms(u_eff[user_id], v_eff[cand],
                                   catalog.category_of[cand],
                                   catalog.num_categories)
        total += loss
    return total


def loss_fairness(enc: Encoder, params: ModelParams, pairs,
                  r_bar: float | None = None) -> float:
    """Mean |sigmoid(score) - r_bar| over the sampled (user, item) pairs.

    r_bar defaults to the mean sigmoid score of the same sample; pass a fixed
    value to evaluate the stop-gradient objective at a frozen mean.
    """
    u_arr, j_arr = (np.asarray(a, dtype=np.int64) for a in pairs)
    if u_arr.size == 0:
        raise ValueError("pair sample must be non-empty")
    u_eff, v_eff = enc.effective(params)
    sig = expit(np.einsum("nd,nd->n", u_eff[u_arr], v_eff[j_arr]))
    rb = float(sig.mean()) if r_bar is None else float(r_bar)
    return float(np.abs(sig - rb).mean())


def combined_loss_weighted(enc: Encoder, params: ModelParams, catalog,
                           slc: UserSlice, lam: float, beta: float) -> float:
    """Per-user combined loss f_acc + lam * f_div + beta * f_fair."""
    u = np.full(len(slc.pos_items), slc.user_id, dtype=np.int64)
    acc = loss_accuracy(enc, params, (u, slc.pos_items, slc.neg_items))
    div = loss_diversity(enc, params, catalog, {slc.user_id: slc.cand_items})
    uc = np.full(len(slc.cand_items), slc.user_id, dtype=np.int64)
    fair = loss_fairness(enc, params, (uc, slc.cand_items))
    return acc + lam * div + beta * fair


def combined_loss(enc: Encoder, params: ModelParams, catalog, slc: UserSlice,
                  groups, weights: GroupWeights) -> float:
    """Group-resolved combined loss for one user's slice.

    ``groups`` is a GroupAssignment; a user missing from it is an error.
    """
    if not (0 <= slc.user_id < len(groups.group_of)):
        raise KeyError(f"user {slc.user_id} has no group assignment")
    w = int(groups.group_of[slc.user_id])
    return combined_loss_weighted(enc, params, catalog, slc,
                                  float(weights.lam[w]), float(weights.beta[w]))


# ---------------------------------------------------------------------------
# view-restricted gradients (training hot path)

def _scope_positions(view: ParamView, ids: np.ndarray) -> np.ndarray:
    if ids.size == 0:
        return ids
    pos = np.searchsorted(view.item_ids, ids)
    bad = (pos >= len(view.item_ids)) | (view.item_ids[np.minimum(
        pos, len(view.item_ids) - 1)] != ids)
    if np.any(bad):
        missing = ids[bad][0]
        raise ValueError(f"item {int(missing)} is not in the view scope")
    return pos


def slice_losses_and_grads(enc: Encoder, params: ModelParams, catalog,
                           view: ParamView, slc: UserSlice,
                           vector: np.ndarray | None = None):
    """All three objective losses and view-restricted gradients in one pass.

    Returns (losses, grads): losses is a length-3 array and grads a
    (3, len(view)) array, both in (accuracy, diversity, fairness) order.
    ``vector`` evaluates at an override of the view's coordinates without
    touching the stored parameters.
    """
    u, v_rows = enc.user_rows(params, view, vector)
    n_scope, d = v_rows.shape
    pos_idx = _scope_positions(view, slc.pos_items)
    neg_idx = _scope_positions(view, slc.neg_items)
    cand_idx = _scope_positions(view, slc.cand_items)

    losses = np.zeros(3)
    grads = np.empty((3, len(view)))

    # accuracy
    buf = np.zeros((n_scope, d))
    if pos_idx.size:
        loss, gu, gvj, gvk = _acc_terms(u, v_rows[pos_idx], v_rows[neg_idx])
        np.add.at(buf, pos_idx, gvj)
        np.add.at(buf, neg_idx, gvk)
    else:
        loss, gu = 0.0, np.zeros(d)
    losses[0] = loss
    grads[0] = enc.to_view_grad(view, gu, buf)

    # diversity
    buf = np.zeros((n_scope, d))
    if cand_idx.size:
        loss, gu, gvc, _ = _div_terms(u, v_rows[cand_idx],
                                      catalog.category_of[slc.cand_items],
                                      catalog.num_categories)
        np.add.at(buf, cand_idx, gvc)
    else:
        loss, gu = 0.0, np.zeros(d)
    losses[1] = loss
    grads[1] = enc.to_view_grad(view, gu, buf)

    # fairness
    buf = np.zeros((n_scope, d))
    if cand_idx.size:
        loss, gu, gvc = _fair_terms(u, v_rows[cand_idx])
        np.add.at(buf, cand_idx, gvc)
    else:
        loss, gu = 0.0, np.zeros(d)
    losses[2] = loss
    grads[2] = enc.to_view_grad(view, gu, buf)

    return losses, grads


def objective_gradient(enc: Encoder, params: ModelParams, catalog,
                       view: ParamView, kind: ObjectiveKind, slc: UserSlice,
                       vector: np.ndarray | None = None) -> np.ndarray:
    """Gradient of one objective w.r.t. the view's flattened parameters."""
    losses, grads = slice_losses_and_grads(enc, params, catalog, view, slc,
                                           vector)
    return grads[OBJECTIVE_ORDER.index(kind)]


def combined_grad_view(enc: Encoder, params: ModelParams, catalog,
                       view: ParamView, slc: UserSlice, lam: float,
                       beta: float, vector: np.ndarray | None = None):
    """Combined loss and its view-restricted gradient for one user slice."""
    losses, grads = slice_losses_and_grads(enc, params, catalog, view, slc,
                                           vector)
    loss = losses[0] + lam * losses[1] + beta * losses[2]
    grad = grads[0] + lam * grads[1] + beta * grads[2]
    return loss, grad, losses, grads
