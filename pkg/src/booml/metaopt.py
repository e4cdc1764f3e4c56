"""Training procedures: orthogonal meta-learning, plain SGD, trainable weights.

The meta procedure is first-order: each user takes one ephemeral inner step on
the support slice of their combined loss, then the three *unweighted*
objective gradients at the adapted point on the query slice are (optionally)
conflict-projected and applied to the original parameters.  Item rows touched
by several users in a batch receive the average of the per-user updates, once
at batch end.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import metrics
from .data import Dataset, sample_negatives
from .encoder import Encoder, ModelParams, ParamView
from .objectives import (GroupWeights, UserSlice, combined_grad_view,
                         slice_losses_and_grads)


class MetaVariant(Enum):
    META = "Meta"              # no projection
    ORTHO_META = "OrthoMeta"   # conflict-projected outer gradients


@dataclass
class MetaConfig:
    eta1: float = 1e-2         # inner-step rate
    eta2: float = 1e-2         # outer-step rate
    epochs: int = 5            # E_ml, meta epochs per trial
    batch_users: int = 256
    cand_size: int = 200       # per-user candidate sample for div/fair terms
    eval_k: int = 20
    g_mode: str = metrics.RES_SUM
    kappa: float = 0.0
    tau: tuple[float, float, float] = (0.0, 0.0, math.inf)
    seed: int = 0
    pcgrad_order: str = "fixed"  # "fixed" or "shuffled" (sensitivity runs)


@dataclass
class SgdConfig:
    lr: float = 1e-3
    weight_lr: float = 1e-3    # trainable-weight logit rate (Trainable only)
    max_epochs: int = 100
    tol: float = 1e-4          # convergence: val loss improvement threshold
    patience: int = 5          # epochs without improvement before stopping
    batch_users: int = 256
    cand_size: int = 200
    eval_k: int = 20
    eval_every: int = 1        # metric-evaluation cadence (val loss is per-epoch)
    g_mode: str = metrics.RES_SUM
    kappa: float = 0.0
    tau: tuple[float, float, float] = (0.0, 0.0, math.inf)
    seed: int = 0


@dataclass
class EpochRecord:
    trial: int
    epoch: int
    ndcg: float
    ild: float
    arp: float
    res_sum: float
    har_mean: float
    xi: float
    val_loss: float
    wall_ms: float
    conflicts: int = 0

    def jsonl_row(self, lam, beta) -> dict:
        return {"trial": self.trial, "epoch": self.epoch,
                "lambda": [float(x) for x in lam],
                "beta": [float(x) for x in beta],
                "ndcg": self.ndcg, "ild": self.ild, "arp": self.arp,
                "res_sum": self.res_sum, "har_mean": self.har_mean,
                "xi": self.xi, "wall_ms": self.wall_ms}


@dataclass
class TrainRunResult:
    params: ModelParams
    epochs: list[EpochRecord]
    val_losses: list[float]          # per trained epoch, in order
    initial_val_loss: float
    best_epoch: int = 0
    best_xi: float = -math.inf
    best_params: ModelParams | None = None
    epochs_run: int = 0
    failed: bool = False
    fail_reason: str = ""
    weight_traj: list[np.ndarray] = field(default_factory=list)   # Trainable
    loss_traj: list[np.ndarray] = field(default_factory=list)     # Trainable

    @property
    def final_xi(self) -> float:
        return self.epochs[-1].xi if self.epochs else -math.inf


# ---------------------------------------------------------------------------
# conflict projection

def project_out(g: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Remove g's conflicting component along ref; zero-norm refs are skipped."""
    nrm = float(ref @ ref)
    if nrm <= 0.0:
        return g.copy()
    dot = float(g @ ref)
    if dot >= 0.0:
        return g.copy()
    return g - (dot / nrm) * ref


def pcgrad_project(grads: np.ndarray, order=None) -> np.ndarray:
    """Single-pass conflict projection against the original gradients.

    g~_m = g_m - sum_{n != m} min(<g_m, g_n>, 0) / ||g_n||^2 * g_n, with all
    dot products taken between the *original* gradients.  ``order`` fixes the
    reference summation order (it only affects floating-point rounding);
    default is index order, i.e. (accuracy, diversity, fairness).
    """
    grads = np.asarray(grads, dtype=np.float64)
    m = grads.shape[0]
    if order is None:
        order = range(m)
    dots = grads @ grads.T
    norms2 = np.diagonal(dots)
    out = grads.copy()
    for i in range(m):
        for j in order:
            if j == i or norms2[j] <= 0.0:
                continue
            c = dots[i, j]
            if c < 0.0:
                out[i] -= (c / norms2[j]) * grads[j]
    return out


def count_conflicts(grads: np.ndarray) -> int:
    """Number of ordered gradient pairs with negative inner product."""
    dots = grads @ grads.T
    m = grads.shape[0]
    mask = ~np.eye(m, dtype=bool)
    return int((dots[mask] < 0.0).sum())


# ---------------------------------------------------------------------------
# meta primitives

@dataclass
class AdaptedView:
    """Ephemeral one-step adaptation of a view; the original is untouched."""
    view: ParamView
    vector: np.ndarray
    base_vector: np.ndarray
    support_losses: np.ndarray


def inner_adapt(enc: Encoder, params: ModelParams, catalog, view: ParamView,
                slc: UserSlice, lam: float, beta: float,
                eta1: float) -> AdaptedView:
    """One combined-loss gradient step on the support slice, off to the side."""
    _, grad, losses, _ = combined_grad_view(enc, params, catalog, view, slc,
                                            lam, beta)
    if not np.all(np.isfinite(losses)) or not np.all(np.isfinite(grad)):
        raise FloatingPointError(
            f"non-finite inner gradient for user {slc.user_id}; "
            f"losses (acc, div, fair) = {losses.tolist()}")
    base = view.get_vector()
    return AdaptedView(view, base - eta1 * grad, base, losses)


def outer_gradients(enc: Encoder, params: ModelParams, catalog,
                    adapted: AdaptedView, query_slc: UserSlice):
    """Unweighted per-objective gradients at the adapted point on query data."""
    losses, grads = slice_losses_and_grads(enc, params, catalog, adapted.view,
                                           query_slc, vector=adapted.vector)
    if not np.all(np.isfinite(losses)) or not np.all(np.isfinite(grads)):
        raise FloatingPointError(
            f"non-finite outer gradient for user {query_slc.user_id}; "
            f"losses (acc, div, fair) = {losses.tolist()}")
    return losses, grads


def outer_update(view: ParamView, projected: np.ndarray, eta2: float) -> None:
    """Apply the summed (projected) outer gradients to the view, write-through."""
    view.set_vector(view.get_vector() - eta2 * projected.sum(axis=0))


class _UpdateAccumulator:
    """Collects per-user updates; shared item rows get their average."""

    def __init__(self, params: ModelParams):
        self.item_sum = np.zeros_like(params.item_emb)
        self.item_cnt = np.zeros(params.num_items)
        self.touched: list[np.ndarray] = []
        self.user_updates: list[tuple[int, np.ndarray]] = []

    def add(self, view: ParamView, update_vec: np.ndarray) -> None:
        u_row, i_rows = view.split(update_vec)
        self.user_updates.append((view.user_id, u_row))
        np.add.at(self.item_sum, view.item_ids, i_rows)
        self.item_cnt[view.item_ids] += 1.0
        self.touched.append(view.item_ids)

    def apply(self, params: ModelParams, rate: float) -> None:
        for uid, vec in self.user_updates:
            params.user_emb[uid] -= rate * vec
        if self.touched:
            rows = np.unique(np.concatenate(self.touched))
            params.item_emb[rows] -= rate * (
                self.item_sum[rows] / self.item_cnt[rows, None])


# ---------------------------------------------------------------------------
# slice sampling and fixed evaluation slices

def _draw_slices(dataset: Dataset, user_items: dict[int, np.ndarray],
                 rng: np.random.Generator, cand_size: int):
    """Per-epoch training slices: matched negatives plus a candidate sample."""
    m = min(cand_size, dataset.num_items)
    slices = {}
    for u in sorted(user_items):
        pos = user_items[u]
        neg = sample_negatives(dataset, u, len(pos), rng)
        cand = rng.permutation(dataset.num_items)[:m]
        slices[u] = UserSlice(u, pos, neg, cand)
    return slices


def fixed_eval_slices(dataset: Dataset, cand_size: int, seed: int,
                      split: str = "validation"):
    """Deterministic slices for comparable loss curves across runs.

    Triples come from the split's positives with sampled negatives; the
    candidate samples are drawn once.  Derived from the seed only, so two runs
    with the same dataset and seed share identical slices.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    by_user = dataset.items_by_user(split)
    m = min(cand_size, dataset.num_items)
    slices = []
    for u in sorted(by_user):
        pos = by_user[u]
        neg = sample_negatives(dataset, u, len(pos), rng)
        cand = rng.permutation(dataset.num_items)[:m]
        slices.append(UserSlice(u, pos, neg, cand))
    return slices


def combined_loss_on_slices(enc: Encoder, params: ModelParams, catalog,
                            slices, groups, lam_of, beta_of,
                            acc_of=None) -> float:
    """Sum of per-user combined losses over prepared slices (one encode pass).

    ``lam_of``/``beta_of`` (and optional ``acc_of``) are per-group weight
    arrays; ``acc_of`` defaults to 1 everywhere.
    """
    from .objectives import _acc_terms, _div_terms, _fair_terms
    u_eff, v_eff = enc.effective(params)
    total = 0.0
    for slc in slices:
        u = u_eff[slc.user_id]
        w = int(groups.group_of[slc.user_id])
        acc, _, _, _ = _acc_terms(u, v_eff[slc.pos_items], v_eff[slc.neg_items])
        div, _, _, _ = _div_terms(u, v_eff[slc.cand_items],
                                  catalog.category_of[slc.cand_items],
                                  catalog.num_categories)
        fair, _, _ = _fair_terms(u, v_eff[slc.cand_items])
        wa = 1.0 if acc_of is None else float(acc_of[w])
        total += (wa * acc + float(lam_of[w]) * div + float(beta_of[w]) * fair)
    return total


def unweighted_losses_on_slices(enc: Encoder, params: ModelParams, catalog,
                                slices) -> np.ndarray:
    """Summed (acc, div, fair) losses over prepared slices, no weights."""
    from .objectives import _acc_terms, _div_terms, _fair_terms
    u_eff, v_eff = enc.effective(params)
    out = np.zeros(3)
    for slc in slices:
        u = u_eff[slc.user_id]
        acc, _, _, _ = _acc_terms(u, v_eff[slc.pos_items], v_eff[slc.neg_items])
        div, _, _, _ = _div_terms(u, v_eff[slc.cand_items],
                                  catalog.category_of[slc.cand_items],
                                  catalog.num_categories)
        fair, _, _ = _fair_terms(u, v_eff[slc.cand_items])
        out += (acc, div, fair)
    return out


def _evaluate_epoch(enc, params, dataset, config, trial, epoch, val_loss,
                    wall_ms, conflicts=0) -> EpochRecord:
    report = metrics.evaluate_model(enc, params, dataset, config.eval_k,
                                    split="validation", thresholds=config.tau,
                                    kappa=config.kappa)
    xi = metrics.xi_value(report, config.g_mode)
    return EpochRecord(trial=trial, epoch=epoch, ndcg=report.ndcg,
                       ild=report.ild, arp=report.arp, res_sum=report.res_sum,
                       har_mean=report.har_mean, xi=xi, val_loss=val_loss,
                       wall_ms=wall_ms, conflicts=conflicts)


def _check_weights(groups, weights: GroupWeights) -> None:
    if weights.num_groups != groups.num_groups:
        raise ValueError(
            f"weights cover {weights.num_groups} groups, assignment has "
            f"{groups.num_groups}")


# ---------------------------------------------------------------------------
# training loops

def run_meta_training(enc: Encoder, params: ModelParams, dataset: Dataset,
                      groups, weights: GroupWeights, config: MetaConfig,
                      variant: MetaVariant = MetaVariant.ORTHO_META,
                      trial: int = 0, epoch_log=None) -> TrainRunResult:
    """One meta-learning training run (E_ml epochs) for fixed group weights.

    Continues from the given params (warm starts across tuning trials).  Logs
    one validation-evaluated record per epoch through ``epoch_log`` and keeps
    a copy of the best-xi epoch's params.  On divergence the entry params are
    restored and the run is marked failed.
    """
    _check_weights(groups, weights)
    catalog = dataset.catalog
    users = dataset.meta_users
    if not users:
        raise ValueError("no users eligible for meta-training")
    support = {u: np.asarray(dataset.support[u], dtype=np.int64) for u in users}
    query = {u: np.asarray(dataset.query[u], dtype=np.int64) for u in users}
    eval_slices = fixed_eval_slices(dataset, config.cand_size, config.seed)
    rng = np.random.default_rng([config.seed, trial, 1])
    entry_params = params.copy()

    val0 = combined_loss_on_slices(enc, params, catalog, eval_slices, groups,
                                   weights.lam, weights.beta)
    rec0 = _evaluate_epoch(enc, params, dataset, config, trial, 0, val0, 0.0)
    result = TrainRunResult(params=params, epochs=[rec0], val_losses=[],
                            initial_val_loss=val0)
    if epoch_log:
        epoch_log(rec0.jsonl_row(weights.lam, weights.beta))

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        slices_s = _draw_slices(dataset, support, rng, config.cand_size)
        negs_q = {u: sample_negatives(dataset, u, len(query[u]), rng)
                  for u in users}
        order = rng.permutation(len(users))
        conflicts = 0
        try:
            for start in range(0, len(order), config.batch_users):
                accum = _UpdateAccumulator(params)
                for idx in order[start:start + config.batch_users]:
                    u = users[idx]
                    s_slc = slices_s[u]
                    q_slc = UserSlice(u, query[u], negs_q[u], s_slc.cand_items)
                    scope = np.unique(np.concatenate(
                        [s_slc.pos_items, s_slc.neg_items, q_slc.pos_items,
                         q_slc.neg_items, s_slc.cand_items]))
                    view = ParamView(params, u, scope)
                    w = int(groups.group_of[u])
                    adapted = inner_adapt(enc, params, catalog, view, s_slc,
                                          float(weights.lam[w]),
                                          float(weights.beta[w]), config.eta1)
                    _, grads = outer_gradients(enc, params, catalog, adapted,
                                               q_slc)
                    conflicts += count_conflicts(grads)
                    if variant == MetaVariant.ORTHO_META:
                        proj_order = (rng.permutation(3)
                                      if config.pcgrad_order == "shuffled"
                                      else None)
                        grads = pcgrad_project(grads, proj_order)
                    accum.add(view, grads.sum(axis=0))
                accum.apply(params, config.eta2)
        except FloatingPointError as exc:
            params.user_emb[:] = entry_params.user_emb
            params.item_emb[:] = entry_params.item_emb
            result.failed = True
            result.fail_reason = str(exc)
            return result

        val_loss = combined_loss_on_slices(enc, params, catalog, eval_slices,
                                           groups, weights.lam, weights.beta)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        rec = _evaluate_epoch(enc, params, dataset, config, trial, epoch,
                              val_loss, wall_ms, conflicts)
        result.epochs.append(rec)
        result.val_losses.append(val_loss)
        result.epochs_run = epoch
        if epoch_log:
            epoch_log(rec.jsonl_row(weights.lam, weights.beta))
        if not np.isfinite(val_loss):
            params.user_emb[:] = entry_params.user_emb
            params.item_emb[:] = entry_params.item_emb
            result.failed = True
            result.fail_reason = f"non-finite validation loss at epoch {epoch}"
            return result
        if rec.xi > result.best_xi:
            result.best_xi = rec.xi
            result.best_epoch = epoch
            result.best_params = params.copy()
    return result


def run_sgd_training(enc: Encoder, params: ModelParams, dataset: Dataset,
                     groups, weights: GroupWeights, config: SgdConfig,
                     trial: int = 0, epoch_log=None) -> TrainRunResult:
    """Plain per-user SGD on the combined loss with fixed weights.

    Each user takes one direct step per epoch on their full training slice;
    batch application averages shared item rows exactly like the meta loop.
    Stops when the validation combined loss has not improved by ``tol`` for
    ``patience`` epochs, or at ``max_epochs``.
    """
    _check_weights(groups, weights)
    catalog = dataset.catalog
    by_user = dataset.items_by_user("train")
    users = sorted(by_user)
    eval_slices = fixed_eval_slices(dataset, config.cand_size, config.seed)
    rng = np.random.default_rng([config.seed, trial, 2])
    entry_params = params.copy()

    val0 = combined_loss_on_slices(enc, params, catalog, eval_slices, groups,
                                   weights.lam, weights.beta)
    rec0 = _evaluate_epoch(enc, params, dataset, config, trial, 0, val0, 0.0)
    result = TrainRunResult(params=params, epochs=[rec0], val_losses=[],
                            initial_val_loss=val0)
    if epoch_log:
        epoch_log(rec0.jsonl_row(weights.lam, weights.beta))

    best_val = val0
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        slices = _draw_slices(dataset, by_user, rng, config.cand_size)
        order = rng.permutation(len(users))
        try:
            for start in range(0, len(order), config.batch_users):
                accum = _UpdateAccumulator(params)
                for idx in order[start:start + config.batch_users]:
                    u = users[idx]
                    slc = slices[u]
                    scope = np.unique(np.concatenate(
                        [slc.pos_items, slc.neg_items, slc.cand_items]))
                    view = ParamView(params, u, scope)
                    w = int(groups.group_of[u])
                    _, grad, losses, _ = combined_grad_view(
                        enc, params, catalog, view, slc,
                        float(weights.lam[w]), float(weights.beta[w]))
                    if not np.all(np.isfinite(grad)):
                        raise FloatingPointError(
                            f"non-finite gradient for user {u}; losses "
                            f"(acc, div, fair) = {losses.tolist()}")
                    accum.add(view, grad)
                accum.apply(params, config.lr)
        except FloatingPointError as exc:
            params.user_emb[:] = entry_params.user_emb
            params.item_emb[:] = entry_params.item_emb
            result.failed = True
            result.fail_reason = str(exc)
            return result

        val_loss = combined_loss_on_slices(enc, params, catalog, eval_slices,
                                           groups, weights.lam, weights.beta)
        result.val_losses.append(val_loss)
        result.epochs_run = epoch
        wall_ms = (time.perf_counter() - t0) * 1000.0
        stopping = (epoch == config.max_epochs)
        if not np.isfinite(val_loss):
            params.user_emb[:] = entry_params.user_emb
            params.item_emb[:] = entry_params.item_emb
            result.failed = True
            result.fail_reason = f"non-finite validation loss at epoch {epoch}"
            return result
        if val_loss < best_val - config.tol:
            best_val = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                stopping = True
        if epoch % config.eval_every == 0 or stopping:
            rec = _evaluate_epoch(enc, params, dataset, config, trial, epoch,
                                  val_loss, wall_ms)
            result.epochs.append(rec)
            if epoch_log:
                epoch_log(rec.jsonl_row(weights.lam, weights.beta))
            if rec.xi > result.best_xi:
                result.best_xi = rec.xi
                result.best_epoch = epoch
                result.best_params = params.copy()
        if stopping:
            break
    return result


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def run_trainable_training(enc: Encoder, params: ModelParams, dataset: Dataset,
                           groups, config: SgdConfig,
                           epoch_log=None) -> TrainRunResult:
    """Joint SGD on params and softmax-parameterized per-group weights.

    Each group owns three free logits whose softmax weights the accuracy,
    diversity and fairness losses; logits and embeddings descend the weighted
    loss together.  Normalized weight trajectories and unweighted loss
    trajectories are recorded per epoch (this setup reproduces the collapse
    onto the cheapest objective).
    """
    catalog = dataset.catalog
    by_user = dataset.items_by_user("train")
    users = sorted(by_user)
    num_groups = groups.num_groups
    logits = np.zeros((num_groups, 3))
    eval_slices = fixed_eval_slices(dataset, config.cand_size, config.seed)
    train_eval = fixed_eval_slices(dataset, config.cand_size, config.seed,
                                   split="train")
    rng = np.random.default_rng([config.seed, 0, 3])
    entry_params = params.copy()

    def weighted_val_loss(wmat):
        return combined_loss_on_slices(enc, params, catalog, eval_slices,
                                       groups, wmat[:, 1], wmat[:, 2],
                                       acc_of=wmat[:, 0])

    wmat = _softmax_rows(logits)
    val0 = weighted_val_loss(wmat)
    rec0 = _evaluate_epoch(enc, params, dataset, config, 0, 0, val0, 0.0)
    result = TrainRunResult(params=params, epochs=[rec0], val_losses=[],
                            initial_val_loss=val0)
    result.weight_traj.append(wmat.copy())
    result.loss_traj.append(
        unweighted_losses_on_slices(enc, params, catalog, train_eval))
    if epoch_log:
        epoch_log(rec0.jsonl_row(wmat[:, 1], wmat[:, 2]))

    best_val = val0
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        wmat = _softmax_rows(logits)
        slices = _draw_slices(dataset, by_user, rng, config.cand_size)
        order = rng.permutation(len(users))
        logit_grad = np.zeros_like(logits)
        for start in range(0, len(order), config.batch_users):
            accum = _UpdateAccumulator(params)
            for idx in order[start:start + config.batch_users]:
                u = users[idx]
                slc = slices[u]
                scope = np.unique(np.concatenate(
                    [slc.pos_items, slc.neg_items, slc.cand_items]))
                view = ParamView(params, u, scope)
                g = int(groups.group_of[u])
                p = wmat[g]
                losses, grads = slice_losses_and_grads(enc, params, catalog,
                                                       view, slc)
                accum.add(view, p @ grads)
                # d/da_m of sum_o p_o * l_o = p_m (l_m - sum_o p_o l_o)
                logit_grad[g] += p * (losses - p @ losses)
            accum.apply(params, config.lr)
        logits -= config.weight_lr * logit_grad

        wmat = _softmax_rows(logits)
        val_loss = weighted_val_loss(wmat)
        if not np.isfinite(val_loss):
            params.user_emb[:] = entry_params.user_emb
            params.item_emb[:] = entry_params.item_emb
            result.failed = True
            result.fail_reason = f"non-finite validation loss at epoch {epoch}"
            return result
        result.val_losses.append(val_loss)
        result.epochs_run = epoch
        result.weight_traj.append(wmat.copy())
        result.loss_traj.append(
            unweighted_losses_on_slices(enc, params, catalog, train_eval))
        wall_ms = (time.perf_counter() - t0) * 1000.0
        rec = _evaluate_epoch(enc, params, dataset, config, 0, epoch, val_loss,
                              wall_ms)
        result.epochs.append(rec)
        if epoch_log:
            epoch_log(rec.jsonl_row(wmat[:, 1], wmat[:, 2]))
        if rec.xi > result.best_xi:
            result.best_xi = rec.xi
            result.best_epoch = epoch
            result.best_params = params.copy()
        if val_loss < best_val - config.tol:
            best_val = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return result
