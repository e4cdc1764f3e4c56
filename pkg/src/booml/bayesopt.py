"""Gaussian-process Bayesian optimization over group trade-off weights.

The search space is the per-group (lambda, beta) box [0.01, 10]^(2W), handled
internally in log10 coordinates rescaled to the unit box.  The surrogate is an
isotropic Matern-5/2 GP with hyperparameters picked from a small grid by log
marginal likelihood; acquisition is expected improvement over the best
observed (standardized) value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.spatial.distance import cdist
from scipy.stats import norm

from .objectives import WEIGHT_HI, WEIGHT_LO, GroupWeights

SIGNAL_GRID = (0.25, 1.0, 4.0)       # sigma_f^2
LENGTH_GRID = (0.05, 0.1, 0.2, 0.5, 1.0)
NOISE_GRID = (1e-6, 1e-4, 1e-2)      # sigma_n^2
BASE_JITTER = 1e-8
MAX_JITTER = 1e-2


@dataclass
class SearchSpace:
    """Unit-box encoding of the per-group weight vectors (log10 scale)."""

    num_groups: int
    lo: float = WEIGHT_LO
    hi: float = WEIGHT_HI

    @property
    def dim(self) -> int:
        return 2 * self.num_groups

    def encode_vec(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        llo, lhi = math.log10(self.lo), math.log10(self.hi)
        return (np.log10(raw) - llo) / (lhi - llo)

    def decode_vec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        llo, lhi = math.log10(self.lo), math.log10(self.hi)
        return np.clip(10.0 ** (llo + x * (lhi - llo)), self.lo, self.hi)

    def encode(self, weights: GroupWeights) -> np.ndarray:
        return self.encode_vec(np.concatenate([weights.lam, weights.beta]))

    def decode(self, x: np.ndarray) -> GroupWeights:
        raw = self.decode_vec(x)
        return GroupWeights(raw[:self.num_groups], raw[self.num_groups:])


def matern52(dists: np.ndarray, lengthscale: float) -> np.ndarray:
    """Matern-5/2 correlation for Euclidean distances."""
    r = np.sqrt(5.0) * dists / lengthscale
    return (1.0 + r + r * r / 3.0) * np.exp(-r)


@dataclass
class GpState:
    x: np.ndarray          # (n, dim) encoded inputs
    y: np.ndarray          # (n,) raw observations
    y_mean: float
    y_sd: float
    y_std: np.ndarray      # standardized observations
    sf2: float
    lengthscale: float
    noise: float
    jitter: float
    chol: np.ndarray       # lower Cholesky of K + (noise + jitter) I
    alpha: np.ndarray      # (K + ...)^-1 y_std
    log_marginal: float


def _chol_with_jitter(k: np.ndarray):
    jitter = BASE_JITTER
    while jitter <= MAX_JITTER:
        try:
            low = cholesky(k + jitter * np.eye(len(k)), lower=True)
            return low, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    return None, None


def gp_fit(x: np.ndarray, y: np.ndarray,
           signal_grid=SIGNAL_GRID, length_grid=LENGTH_GRID,
           noise_grid=NOISE_GRID) -> GpState:
    """Fit the GP, selecting hyperparameters by log marginal likelihood.

    Observations are standardized internally (constant y keeps scale 1).
    Cholesky gets an escalating jitter starting at 1e-8 until it succeeds.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n == 0:
        raise ValueError("cannot fit a GP on zero observations")
    y_mean = float(y.mean())
    y_sd = float(y.std())
    if y_sd < 1e-12:
        y_sd = 1.0
    y_std = (y - y_mean) / y_sd

    dists = cdist(x, x)
    best = None
    for sf2 in signal_grid:
        for ls in length_grid:
            corr = matern52(dists, ls)
            for noise in noise_grid:
                k = sf2 * corr + noise * np.eye(n)
                low, jitter = _chol_with_jitter(k)
                if low is None:
                    continue
                alpha = solve_triangular(
                    low.T, solve_triangular(low, y_std, lower=True),
                    lower=False)
                lml = (-0.5 * float(y_std @ alpha)
                       - float(np.log(np.diagonal(low)).sum())
                       - 0.5 * n * math.log(2.0 * math.pi))
                if best is None or lml > best[0]:
                    best = (lml, sf2, ls, noise, jitter, low, alpha)
    if best is None:
        raise RuntimeError("no GP hyperparameter combination factorized")
    lml, sf2, ls, noise, jitter, low, alpha = best
    return GpState(x=x, y=y, y_mean=y_mean, y_sd=y_sd, y_std=y_std, sf2=sf2,
                   lengthscale=ls, noise=noise, jitter=jitter, chol=low,
                   alpha=alpha, log_marginal=lml)


def gp_posterior(state: GpState, xq: np.ndarray):
    """Standardized latent posterior (mean, stddev) at query points (m, dim)."""
    xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
    ks = state.sf2 * matern52(cdist(xq, state.x), state.lengthscale)
    mu = ks @ state.alpha
    v = solve_triangular(state.chol, ks.T, lower=True)
    var = state.sf2 - np.einsum("ij,ij->j", v, v)
    return mu, np.sqrt(np.maximum(var, 0.0))


def gp_predict(state: GpState, xq: np.ndarray):
    """Posterior (mean, stddev) at query points in the original y units."""
    mu, sd = gp_posterior(state, xq)
    return state.y_mean + state.y_sd * mu, state.y_sd * sd


def ei_value(mu, sigma, best):
    """Expected improvement of N(mu, sigma^2) over ``best``; 0-sigma safe."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    diff = mu - best
    out = np.maximum(diff, 0.0)
    pos = sigma > 0
    z = np.divide(diff, sigma, out=np.zeros_like(diff), where=pos)
    ei = diff * norm.cdf(z) + sigma * norm.pdf(z)
    return np.where(pos, ei, out)


def expected_improvement(state: GpState, xq: np.ndarray,
                         best_y: float) -> np.ndarray:
    """EI at encoded query points against the best *standardized* observation."""
    mu, sd = gp_posterior(state, xq)
    return ei_value(mu, sd, best_y)


def latin_hypercube(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """n stratified samples in the unit box: one point per stratum per dim."""
    out = np.empty((n, dim))
    for j in range(dim):
        out[:, j] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return out


def propose_next(state: GpState, rng: np.random.Generator,
                 n_candidates: int = 1024, n_perturb: int = 16,
                 perturb_sigma: float = 0.05) -> np.ndarray:
    """Next encoded point: EI argmax over random + local candidates.

    Candidates are ``n_candidates`` uniform points plus Gaussian perturbations
    of the ``n_perturb`` best observed points, clipped to the box.  EI ties
    are broken by the higher posterior stddev.
    """
    dim = state.x.shape[1]
    cands = rng.uniform(size=(n_candidates, dim))
    k = min(n_perturb, len(state.x))
    if k > 0:
        best_idx = np.argsort(-state.y_std, kind="stable")[:k]
        local = state.x[best_idx] + rng.normal(0.0, perturb_sigma, size=(k, dim))
        cands = np.vstack([cands, np.clip(local, 0.0, 1.0)])
    mu, sd = gp_posterior(state, cands)
    best_y = float(state.y_std.max())
    ei = ei_value(mu, sd, best_y)
    top = float(ei.max())
    ties = ei >= top - 1e-12 * max(1.0, abs(top))
    tie_idx = np.flatnonzero(ties)
    pick = tie_idx[int(np.argmax(sd[tie_idx]))]
    return cands[pick]


@dataclass
class BoConfig:
    trials: int = 50
    k_init: int = 10
    g_mode: str = "ressum"
    kappa: float = 0.0
    tau: tuple[float, float, float] = (0.0, 0.0, math.inf)
    seed: int = 0
    n_candidates: int = 1024
    n_perturb: int = 16
    perturb_sigma: float = 0.05


@dataclass
class TrialOutcome:
    """What a train_fn reports back for one weight vector."""

    xi: float
    metrics: dict | None = None
    failed: bool = False
    fail_reason: str = ""
    best_epoch: int = 0
    best_epoch_xi: float | None = None   # defaults to xi
    payload: object = None               # e.g. best-epoch params


@dataclass
class TrialRecord:
    index: int
    weights: GroupWeights
    x: np.ndarray
    xi: float
    metrics: dict | None
    status: str
    best_epoch: int = 0
    best_epoch_xi: float = -math.inf
    fail_reason: str = ""

    def jsonl_row(self) -> dict:
        row = {"trial": self.index,
               "lambda": [float(v) for v in self.weights.lam],
               "beta": [float(v) for v in self.weights.beta],
               "xi": self.xi if math.isfinite(self.xi) else None,
               "status": self.status}
        row.update(self.metrics or {})
        return row


@dataclass
class BoResult:
    records: list[TrialRecord]
    best_record: TrialRecord
    best_payload: object
    incumbents: list[float]  # best-so-far successful xi after each trial

    @property
    def best_weights(self) -> GroupWeights:
        return self.best_record.weights


def run_bo(space: SearchSpace, train_fn, config: BoConfig,
           record_cb=None) -> BoResult:
    """Bayesian-optimization loop over the encoded weight box.

    The first ``k_init`` trials are a Latin hypercube in log space; later
    trials maximize EI under a GP refit on all successful trials.  Failed
    trials are recorded but excluded from the surrogate.  Returns the record
    whose best within-trial observation is globally maximal, with the payload
    its train_fn attached (e.g. a params snapshot).
    """
    if not (1 <= config.k_init <= config.trials):
        raise ValueError("need 1 <= k_init <= trials")
    rng = np.random.default_rng([config.seed, 7])
    init_pts = latin_hypercube(config.k_init, space.dim, rng)
    records: list[TrialRecord] = []
    incumbents: list[float] = []
    best_so_far = -math.inf
    best_record: TrialRecord | None = None
    best_payload = None
    for t in range(config.trials):
        ok = [r for r in records if r.status == "ok"]
        if t < config.k_init:
            x = init_pts[t]
        elif ok:
            state = gp_fit(np.stack([r.x for r in ok]),
                           np.asarray([r.xi for r in ok]))
            x = propose_next(state, rng, config.n_candidates,
                             config.n_perturb, config.perturb_sigma)
        else:
            x = rng.uniform(size=space.dim)
        weights = space.decode(x)
        outcome = train_fn(weights, t)
        if outcome.failed or not math.isfinite(outcome.xi):
            rec = TrialRecord(t, weights, x, math.nan, outcome.metrics,
                              "failed", fail_reason=outcome.fail_reason)
        else:
            bx = outcome.best_epoch_xi
            bx = outcome.xi if bx is None else bx
            rec = TrialRecord(t, weights, x, outcome.xi, outcome.metrics, "ok",
                              best_epoch=outcome.best_epoch, best_epoch_xi=bx)
            best_so_far = max(best_so_far, outcome.xi)
            if best_record is None or rec.best_epoch_xi > best_record.best_epoch_xi:
                best_record = rec
                best_payload = outcome.payload
        records.append(rec)
        incumbents.append(best_so_far)
        if record_cb:
            record_cb(rec)
    if best_record is None:
        raise RuntimeError("all tuning trials failed")
    return BoResult(records=records, best_record=best_record,
                    best_payload=best_payload, incumbents=incumbents)
