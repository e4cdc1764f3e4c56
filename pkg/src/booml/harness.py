"""Experiment harness: configuration, the five training variants, artifacts.

Variants:
  SGD        constant unit weights, plain training to convergence
  Trainable  softmax weights trained jointly with the model
  BO         Bayesian optimization, each trial trains from scratch with SGD
  BOML       Bayesian optimization over meta-learning (no projection)
  BOOML      Bayesian optimization over conflict-projected meta-learning

Every run writes a manifest (config hash, seed, versions) plus JSONL logs, a
best checkpoint and a ``result.json`` under its output directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, metrics
from .bayesopt import BoConfig, SearchSpace, TrialOutcome, run_bo
from .data import Dataset, load_bundle
from .encoder import Encoder, EncoderConfig, init_params, save_checkpoint
from .grouping import (GroupAssignment, cluster_users, compute_stats,
                       save_groups_csv)
from .metaopt import (MetaConfig, MetaVariant, SgdConfig, TrainRunResult,
                      run_meta_training, run_sgd_training,
                      run_trainable_training)
from .objectives import GroupWeights

VARIANTS = ("SGD", "Trainable", "BO", "BOML", "BOOML")
SEED_ENV = "BOOML_SEED"


@dataclass
class ExperimentConfig:
    bundle: str = ""
    variant: str = "BOOML"
    seed: int = 0
    num_groups: int = 3
    k_list: tuple[int, ...] = (20, 50)
    g_mode: str = metrics.RES_SUM
    kappa: float = 0.0
    tau: tuple[float, float, float] = (0.0, 0.0, math.inf)
    log_features: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    bo: BoConfig = field(default_factory=BoConfig)

    def to_dict(self) -> dict:
        tau = [None if math.isinf(t) else t for t in self.tau]
        return {
            "bundle": self.bundle, "variant": self.variant, "seed": self.seed,
            "num_groups": self.num_groups, "k_list": list(self.k_list),
            "g_mode": self.g_mode, "kappa": self.kappa, "tau": tau,
            "log_features": self.log_features,
            "encoder": self.encoder.to_dict(),
            "meta": {"eta1": self.meta.eta1, "eta2": self.meta.eta2,
                     "epochs": self.meta.epochs,
                     "batch_users": self.meta.batch_users,
                     "cand_size": self.meta.cand_size,
                     "eval_k": self.meta.eval_k,
                     "pcgrad_order": self.meta.pcgrad_order},
            "sgd": {"lr": self.sgd.lr, "weight_lr": self.sgd.weight_lr,
                    "max_epochs": self.sgd.max_epochs, "tol": self.sgd.tol,
                    "patience": self.sgd.patience,
                    "batch_users": self.sgd.batch_users,
                    "cand_size": self.sgd.cand_size,
                    "eval_k": self.sgd.eval_k,
                    "eval_every": self.sgd.eval_every},
            "bo": {"trials": self.bo.trials, "k_init": self.bo.k_init,
                   "n_candidates": self.bo.n_candidates,
                   "n_perturb": self.bo.n_perturb,
                   "perturb_sigma": self.bo.perturb_sigma},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        tau = tuple(math.inf if t is None else float(t)
                    for t in d.get("tau", [0.0, 0.0, None]))
        cfg = cls(
            bundle=d.get("bundle", ""), variant=d.get("variant", "BOOML"),
            seed=int(d.get("seed", 0)),
            num_groups=int(d.get("num_groups", 3)),
            k_list=tuple(int(k) for k in d.get("k_list", [20, 50])),
            g_mode=d.get("g_mode", metrics.RES_SUM),
            kappa=float(d.get("kappa", 0.0)), tau=tau,
            log_features=bool(d.get("log_features", True)),
        )
        if "encoder" in d:
            cfg.encoder = EncoderConfig.from_dict(d["encoder"])
        for name, target in (("meta", cfg.meta), ("sgd", cfg.sgd),
                             ("bo", cfg.bo)):
            for key, val in d.get(name, {}).items():
                setattr(target, key, type(getattr(target, key))(val))
        return cfg


def resolve_seed(config: ExperimentConfig) -> int:
    """Config seed, overridable by the BOOML_SEED environment variable."""
    env = os.environ.get(SEED_ENV)
    return int(env) if env is not None else config.seed


def config_hash(config) -> str:
    """SHA-256 over the canonical JSON of a config (or any plain dict)."""
    cfg = config.to_dict() if hasattr(config, "to_dict") else dict(config)
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def write_manifest(outdir, config, seed: int, command: str | None = None,
                   extra: dict | None = None, name: str = "manifest.json"):
    """Record enough to re-run: config hash, seed, package/library versions."""
    manifest = {
        "config_hash": config_hash(config),
        "seed": seed,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "command": command,
    }
    manifest.update(extra or {})
    path = Path(outdir) / name
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def normalized_weights(lam: float, beta: float) -> tuple[float, float, float]:
    """(accuracy, diversity, fairness) weights rescaled to sum to 1."""
    denom = 1.0 + lam + beta
    return 1.0 / denom, lam / denom, beta / denom


@dataclass
class RunResult:
    variant: str
    seed: int
    reports: dict[int, metrics.MetricReport]   # test split, per K
    best_xi: float
    epochs_run: int
    wall_s: float
    best_weights: dict | None = None           # {"lam": [...], "beta": [...]}
    group_table: list[dict] | None = None
    weight_traj: list | None = None            # Trainable: per epoch (W, 3)
    loss_traj: list | None = None              # Trainable: per epoch (3,)
    incumbents: list | None = None             # BO family
    val_curve: list | None = None              # [trial, epoch, val_loss] rows
    trial_count: int | None = None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "seed": self.seed,
            "reports": {str(k): r.to_dict() for k, r in self.reports.items()},
            "best_xi": self.best_xi, "epochs_run": self.epochs_run,
            "wall_s": self.wall_s, "best_weights": self.best_weights,
            "group_table": self.group_table,
            "weight_traj": ([[list(map(float, row)) for row in w]
                             for w in self.weight_traj]
                            if self.weight_traj is not None else None),
            "loss_traj": ([list(map(float, row)) for row in self.loss_traj]
                          if self.loss_traj is not None else None),
            "incumbents": self.incumbents,
            "val_curve": self.val_curve,
            "trial_count": self.trial_count,
        }


def _record_metrics(rec) -> dict:
    return {"ndcg": rec.ndcg, "ild": rec.ild, "arp": rec.arp,
            "res_sum": rec.res_sum, "har_mean": rec.har_mean}


def _runtime_configs(config: ExperimentConfig, seed: int):
    meta = dataclasses.replace(config.meta, seed=seed, g_mode=config.g_mode,
                               kappa=config.kappa, tau=config.tau)
    sgd = dataclasses.replace(config.sgd, seed=seed, g_mode=config.g_mode,
                              kappa=config.kappa, tau=config.tau)
    bo = dataclasses.replace(config.bo, seed=seed, g_mode=config.g_mode,
                             kappa=config.kappa, tau=config.tau)
    return meta, sgd, bo


def build_groups(dataset: Dataset, config: ExperimentConfig,
                 seed: int) -> GroupAssignment:
    stats = compute_stats(dataset)
    return cluster_users(stats, config.num_groups, seed, config.log_features)


def _group_table(enc, params, dataset, groups, weights, k, split="test",
                 triple_weights=None):
    """Per-group learned weights (normalized) and metrics at one cutoff."""
    per_group = metrics.group_reports(enc, params, dataset, groups, k, split)
    rows = []
    for g in range(groups.num_groups):
        if triple_weights is not None:
            wa, wd, wf = (float(x) for x in triple_weights[g])
            lam = beta = None
        else:
            lam = float(weights.lam[g])
            beta = float(weights.beta[g])
            wa, wd, wf = normalized_weights(lam, beta)
        rows.append({"group": g, "num_users": per_group[g]["num_users"],
                     "lam": lam, "beta": beta,
                     "w_acc": wa, "w_div": wd, "w_fair": wf,
                     "ndcg": per_group[g]["ndcg"], "ild": per_group[g]["ild"],
                     "arp": per_group[g]["arp"]})
    return rows


def run_variant(config: ExperimentConfig, dataset: Dataset | None = None,
                outdir: str | None = None,
                command: str | None = None) -> RunResult:
    """Execute one variant end to end; optionally write run artifacts."""
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown variant {config.variant!r}; "
                         f"expected one of {VARIANTS}")
    t_start = time.perf_counter()
    seed = resolve_seed(config)
    if dataset is None:
        dataset = load_bundle(config.bundle)
    meta_cfg, sgd_cfg, bo_cfg = _runtime_configs(config, seed)
    enc = Encoder(config.encoder, dataset.num_users, dataset.num_items)
    if enc.propagated:
        users = [it.user_id for it in dataset.train]
        items = [it.item_id for it in dataset.train]
        enc.attach_graph(users, items)
    groups = build_groups(dataset, config, seed)
    w = groups.num_groups

    out = Path(outdir) if outdir is not None else None
    epoch_fh = trial_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(config, out / "config.json")
        save_groups_csv(out / "groups.csv", groups)
        epoch_fh = open(out / "epochs.jsonl", "w")

    def epoch_log(row: dict) -> None:
        if epoch_fh:
            epoch_fh.write(json.dumps(row) + "\n")

    try:
        result = _dispatch_variant(config, dataset, enc, groups, w, seed,
                                   meta_cfg, sgd_cfg, bo_cfg, epoch_log, out)
    finally:
        if epoch_fh:
            epoch_fh.close()
    result.wall_s = time.perf_counter() - t_start

    if out is not None:
        with open(out / "result.json", "w") as fh:
            json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(out, config, seed, command)
    return result


def _dispatch_variant(config, dataset, enc, groups, w, seed, meta_cfg,
                      sgd_cfg, bo_cfg, epoch_log, out) -> RunResult:
    unit = GroupWeights(np.ones(w), np.ones(w))
    checkpoint_path = (out / "checkpoint.npz") if out is not None else None

    def finalize(best_params, best_xi, epochs_run, best_weights=None,
                 group_weights=None, triple_weights=None, **extras):
        reports = {}
        for k in config.k_list:
            reports[k] = metrics.evaluate_model(
                enc, best_params, dataset, k, split="test",
                thresholds=config.tau, kappa=config.kappa)
        table = _group_table(enc, best_params, dataset, groups,
                             group_weights or unit, config.k_list[0],
                             triple_weights=triple_weights)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, best_params, config.encoder, seed)
        return RunResult(variant=config.variant, seed=seed, reports=reports,
                         best_xi=best_xi, epochs_run=epochs_run, wall_s=0.0,
                         best_weights=best_weights, group_table=table, **extras)

    if config.variant == "SGD":
        params = init_params(config.encoder, dataset.num_users,
                             dataset.num_items, seed)
        res = run_sgd_training(enc, params, dataset, groups, unit, sgd_cfg,
                               epoch_log=epoch_log)
        if res.failed:
            raise RuntimeError(f"SGD training failed: {res.fail_reason}")
        return finalize(res.best_params, res.best_xi, res.epochs_run,
                        best_weights={"lam": [1.0] * w, "beta": [1.0] * w},
                        val_curve=[[0, e + 1, v]
                                   for e, v in enumerate(res.val_losses)])

    if config.variant == "Trainable":
        params = init_params(config.encoder, dataset.num_users,
                             dataset.num_items, seed)
        res = run_trainable_training(enc, params, dataset, groups, sgd_cfg,
                                     epoch_log=epoch_log)
        if res.failed:
            raise RuntimeError(f"Trainable training failed: {res.fail_reason}")
        final_w = res.weight_traj[-1]
        return finalize(res.best_params, res.best_xi, res.epochs_run,
                        triple_weights=final_w,
                        weight_traj=res.weight_traj, loss_traj=res.loss_traj,
                        val_curve=[[0, e + 1, v]
                                   for e, v in enumerate(res.val_losses)])

    # BO family
    space = SearchSpace(w)
    val_curve: list[list[float]] = []
    shared = {"params": None}

    def sgd_train_fn(weights: GroupWeights, trial: int) -> TrialOutcome:
        params = init_params(config.encoder, dataset.num_users,
                             dataset.num_items, seed)
        res = run_sgd_training(enc, params, dataset, groups, weights, sgd_cfg,
                               trial=trial, epoch_log=epoch_log)
        return _outcome_from(res, trial, val_curve)

    def meta_train_fn(weights: GroupWeights, trial: int) -> TrialOutcome:
        variant = (MetaVariant.ORTHO_META if config.variant == "BOOML"
                   else MetaVariant.META)
        res = run_meta_training(enc, shared["params"], dataset, groups,
                                weights, meta_cfg, variant, trial=trial,
                                epoch_log=epoch_log)
        return _outcome_from(res, trial, val_curve)

    if config.variant == "BO":
        train_fn = sgd_train_fn
    else:
        shared["params"] = init_params(config.encoder, dataset.num_users,
                                       dataset.num_items, seed)
        train_fn = meta_train_fn

    bo_res = run_bo(space, train_fn, bo_cfg)
    if out is not None:
        with open(out / "trials.jsonl", "w") as fh:
            for rec in bo_res.records:
                row = rec.jsonl_row()
                row["checkpoint"] = (str(out / "checkpoint.npz")
                                     if rec is bo_res.best_record else None)
                fh.write(json.dumps(row) + "\n")
    best = bo_res.best_record
    return finalize(bo_res.best_payload, best.best_epoch_xi, len(val_curve),
                    best_weights={"lam": [float(v) for v in best.weights.lam],
                                  "beta": [float(v) for v in best.weights.beta]},
                    group_weights=best.weights,
                    incumbents=[None if not math.isfinite(v) else v
                                for v in bo_res.incumbents],
                    val_curve=val_curve, trial_count=len(bo_res.records))


def _outcome_from(res: TrainRunResult, trial: int,
                  val_curve: list) -> TrialOutcome:
    for e, v in enumerate(res.val_losses):
        val_curve.append([trial, e + 1, v])
    if res.failed:
        return TrialOutcome(xi=math.nan, failed=True,
                            fail_reason=res.fail_reason)
    final = res.epochs[-1]
    return TrialOutcome(xi=final.xi, metrics=_record_metrics(final),
                        best_epoch=res.best_epoch, best_epoch_xi=res.best_xi,
                        payload=res.best_params)


def grid_search(config: ExperimentConfig, lambda_grid, beta_grid,
                dataset: Dataset | None = None) -> list[dict]:
    """Exhaustive (lambda, beta) sweep with shared global weights (no groups).

    One SGD training per cell; rows carry metrics per K plus argmax markers
    (best NDCG and ILD are maxima, best ARP the minimum) per cutoff.
    """
    seed = resolve_seed(config)
    if dataset is None:
        dataset = load_bundle(config.bundle)
    _, sgd_cfg, _ = _runtime_configs(config, seed)
    enc = Encoder(config.encoder, dataset.num_users, dataset.num_items)
    if enc.propagated:
        enc.attach_graph([it.user_id for it in dataset.train],
                         [it.item_id for it in dataset.train])
    groups = GroupAssignment(group_of=np.zeros(dataset.num_users, dtype=np.int64),
                             centroids=np.zeros((1, 3)))
    rows = []
    for lam in lambda_grid:
        for beta in beta_grid:
            params = init_params(config.encoder, dataset.num_users,
                                 dataset.num_items, seed)
            weights = GroupWeights([lam], [beta])
            res = run_sgd_training(enc, params, dataset, groups, weights,
                                   sgd_cfg)
            for k in config.k_list:
                if res.failed:
                    rows.append({"lam": lam, "beta": beta, "k": k,
                                 "status": "failed", "ndcg": math.nan,
                                 "ild": math.nan, "arp": math.nan,
                                 "res_sum": math.nan, "har_mean": math.nan})
                    continue
                rep = metrics.evaluate_model(enc, res.best_params, dataset, k,
                                             split="test",
                                             thresholds=config.tau,
                                             kappa=config.kappa)
                rows.append({"lam": lam, "beta": beta, "k": k, "status": "ok",
                             "ndcg": rep.ndcg, "ild": rep.ild, "arp": rep.arp,
                             "res_sum": rep.res_sum,
                             "har_mean": rep.har_mean})
    for k in config.k_list:
        sub = [r for r in rows if r["k"] == k and r["status"] == "ok"]
        if not sub:
            continue
        best_ndcg = max(r["ndcg"] for r in sub)
        best_ild = max(r["ild"] for r in sub)
        best_arp = min(r["arp"] for r in sub)
        for r in sub:
            r["best_ndcg"] = r["ndcg"] == best_ndcg
            r["best_ild"] = r["ild"] == best_ild
            r["best_arp"] = r["arp"] == best_arp
    return rows
