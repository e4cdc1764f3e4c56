"""Command-line entry points.

Subcommands cover the full workflow: ``synth`` emits a synthetic interaction
CSV, ``prep`` turns a CSV into a dataset bundle plus user groups, ``train``
and ``tune`` run one variant, ``grid`` sweeps shared global weights,
``ablate`` runs every variant over several seeds, ``evaluate`` scores a saved
checkpoint and ``report`` aggregates run directories into tables and figures.

Seeds may be overridden globally through the BOOML_SEED environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

from . import data, harness, metrics, report, synth
from .encoder import (Encoder, EncoderConfig, EncoderKind, load_checkpoint)
from .grouping import cluster_users, compute_stats, save_groups_csv
from .harness import (ExperimentConfig, VARIANTS, grid_search, load_config,
                      resolve_seed, run_variant, write_manifest)


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "fn"}


def _parse_floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _parse_ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _add_run_flags(p: argparse.ArgumentParser, default_variant: str,
                   choices=VARIANTS) -> None:
    p.add_argument("--bundle", required=True, help="dataset bundle path")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", help="experiment config JSON to start from")
    p.add_argument("--variant", choices=choices, default=default_variant)
    p.add_argument("--seed", type=int)
    p.add_argument("--groups", type=int, help="number of user groups W")
    p.add_argument("--k", help="evaluation cutoffs, e.g. 20,50")
    p.add_argument("--g-mode", choices=[metrics.RES_SUM, metrics.HAR_MEAN])
    p.add_argument("--kappa", type=float)
    p.add_argument("--tau", help="acc,div,fair thresholds; 'inf' allowed")
    p.add_argument("--encoder", choices=[k.value for k in EncoderKind])
    p.add_argument("--d", type=int, help="embedding dimension")
    p.add_argument("--layers", type=int, help="propagation depth (LightGCN)")
    p.add_argument("--epochs", type=int, help="meta epochs per trial (E_ml)")
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--cand-size", type=int)
    p.add_argument("--batch-users", type=int)
    p.add_argument("--trials", type=int, help="tuning trials T")
    p.add_argument("--init", type=int, help="initial design size")


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.bundle = args.bundle
    if args.variant is not None:
        cfg.variant = args.variant
    if args.seed is not None:
        cfg.seed = args.seed
    if args.groups is not None:
        cfg.num_groups = args.groups
    if args.k is not None:
        cfg.k_list = tuple(_parse_ints(args.k))
    if args.g_mode is not None:
        cfg.g_mode = args.g_mode
    if args.kappa is not None:
        cfg.kappa = args.kappa
    if args.tau is not None:
        cfg.tau = tuple(float(tok) for tok in args.tau.split(","))
    if args.encoder is not None:
        cfg.encoder.kind = EncoderKind(args.encoder)
    if args.d is not None:
        cfg.encoder.d = args.d
    if args.layers is not None:
        cfg.encoder.num_layers = args.layers
    if args.epochs is not None:
        cfg.meta.epochs = args.epochs
    if args.eta1 is not None:
        cfg.meta.eta1 = args.eta1
    if args.eta2 is not None:
        cfg.meta.eta2 = args.eta2
    if args.lr is not None:
        cfg.sgd.lr = args.lr
    if args.weight_lr is not None:
        cfg.sgd.weight_lr = args.weight_lr
    if args.max_epochs is not None:
        cfg.sgd.max_epochs = args.max_epochs
    if args.patience is not None:
        cfg.sgd.patience = args.patience
    if args.eval_every is not None:
        cfg.sgd.eval_every = args.eval_every
    if args.cand_size is not None:
        cfg.meta.cand_size = args.cand_size
        cfg.sgd.cand_size = args.cand_size
    if args.batch_users is not None:
        cfg.meta.batch_users = args.batch_users
        cfg.sgd.batch_users = args.batch_users
    if args.trials is not None:
        cfg.bo.trials = args.trials
    if args.init is not None:
        cfg.bo.k_init = args.init
    cfg.meta.eval_k = cfg.sgd.eval_k = cfg.k_list[0]
    return cfg


def cmd_synth(args) -> int:
    if args.mode == "planted":
        raw = synth.planted_populations(args.users, args.items,
                                        args.categories, args.seed)
    else:
        raw = synth.generate(args.users, args.items, args.categories,
                             args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synth.write_csv(out, raw)
    write_manifest(out.parent, _args_dict(args), args.seed,
                   command=" ".join(sys.argv),
                   name=out.name + ".manifest.json")
    print(f"wrote {len(raw.interactions)} interactions to {out}")
    return 0


def cmd_prep(args) -> int:
    raw = data.ingest_csv(args.input)
    dataset = data.prepare_dataset(raw, args.min_interactions,
                                   args.positive_threshold,
                                   support_fraction=args.support_fraction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_bundle(dataset, out)
    groups = cluster_users(compute_stats(dataset), args.groups, args.seed)
    groups_path = out.with_suffix(out.suffix + ".groups.csv")
    save_groups_csv(groups_path, groups)
    cfg = ExperimentConfig(bundle=str(out), seed=args.seed,
                           num_groups=args.groups)
    write_manifest(out.parent, cfg, args.seed, command=" ".join(sys.argv),
                   extra={"bundle": str(out), "groups_csv": str(groups_path)})
    print(f"bundle: {out} ({dataset.num_users} users, {dataset.num_items} "
          f"items, {len(dataset.train)} train positives)")
    print(f"groups: {groups_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    result = run_variant(cfg, outdir=args.out, command=" ".join(sys.argv))
    for k in sorted(result.reports):
        rep = result.reports[k]
        print(f"{cfg.variant} K={k}: ndcg={rep.ndcg:.4f} ild={rep.ild:.4f} "
              f"arp={rep.arp:.4f} ressum={rep.res_sum:.4f} "
              f"harmean={rep.har_mean:.4f}")
    print(f"best validation xi: {result.best_xi:.4f} "
          f"({result.epochs_run} trained epochs, {result.wall_s:.1f}s)")
    return 0


def cmd_grid(args) -> int:
    cfg = _config_from_args(args)
    rows = grid_search(cfg, _parse_floats(args.lambda_grid),
                       _parse_floats(args.beta_grid))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "grid.csv"
    header = ["lambda", "beta", "k", "status", "ndcg", "ild", "arp",
              "res_sum", "har_mean", "best_ndcg", "best_ild", "best_arp"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([r["lam"], r["beta"], r["k"], r["status"],
                             r["ndcg"], r["ild"], r["arp"], r["res_sum"],
                             r["har_mean"], r.get("best_ndcg", ""),
                             r.get("best_ild", ""), r.get("best_arp", "")])
    write_manifest(out, cfg, resolve_seed(cfg), command=" ".join(sys.argv))
    print(f"wrote {len(rows)} grid rows to {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    seeds = _parse_ints(args.seeds)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise SystemExit(f"unknown variant {v!r}")
    dataset = data.load_bundle(cfg.bundle)
    out = Path(args.out)
    for variant in variants:
        for seed in seeds:
            run_cfg = ExperimentConfig.from_dict(cfg.to_dict())
            run_cfg.variant = variant
            run_cfg.seed = seed
            rundir = out / variant / f"seed{seed}"
            result = run_variant(run_cfg, dataset=dataset, outdir=rundir,
                                 command=" ".join(sys.argv))
            rep = result.reports[run_cfg.k_list[0]]
            print(f"{variant} seed={seed}: ressum@{run_cfg.k_list[0]}="
                  f"{rep.res_sum:.4f} ({result.wall_s:.1f}s)")
    paths = report.generate_report(out, out / "report")
    write_manifest(out, cfg, resolve_seed(cfg), command=" ".join(sys.argv),
                   extra={"seeds": seeds, "variants": variants})
    print(f"report: {paths['summary']}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = data.load_bundle(args.bundle)
    params, enc_cfg, _ = load_checkpoint(args.checkpoint)
    enc = Encoder(enc_cfg, dataset.num_users, dataset.num_items)
    if enc.propagated:
        enc.attach_graph([it.user_id for it in dataset.train],
                         [it.item_id for it in dataset.train])
    tau = (tuple(float(t) for t in args.tau.split(","))
           if args.tau else (0.0, 0.0, math.inf))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "evaluate.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "k", "split", "ndcg", "ild", "arp",
                         "res_sum", "har_mean", "penalty"])
        for k in _parse_ints(args.k):
            rep = metrics.evaluate_model(enc, params, dataset, k,
                                         split=args.split, thresholds=tau,
                                         kappa=args.kappa)
            writer.writerow([args.label, k, args.split,
                             f"{rep.ndcg:.10g}", f"{rep.ild:.10g}",
                             f"{rep.arp:.10g}", f"{rep.res_sum:.10g}",
                             f"{rep.har_mean:.10g}",
                             f"{rep.constraint_penalty:.10g}"])
            print(f"{args.label} K={k}: ndcg={rep.ndcg:.4f} "
                  f"ild={rep.ild:.4f} arp={rep.arp:.4f}")
    write_manifest(out, _args_dict(args), 0, command=" ".join(sys.argv))
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    paths = report.generate_report(args.results, args.out)
    write_manifest(args.out, _args_dict(args), 0, command=" ".join(sys.argv))
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="booml",
        description="group-personalized multi-objective recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic interaction CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=1000)
    p.add_argument("--categories", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["standard", "planted"],
                   default="standard")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prep", help="CSV -> dataset bundle + user groups")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-interactions", type=int, default=10)
    p.add_argument("--positive-threshold", type=float, default=4.0)
    p.add_argument("--support-fraction", type=float, default=0.8)
    p.add_argument("--groups", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("train", help="run a fixed-weight or trainable variant")
    _add_run_flags(p, "SGD")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("tune", help="run a Bayesian-optimization variant")
    _add_run_flags(p, "BOOML", choices=("BO", "BOML", "BOOML"))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("grid", help="exhaustive shared-weight sweep")
    _add_run_flags(p, "SGD")
    p.add_argument("--lambda-grid", required=True,
                   help="comma-separated diversity weights")
    p.add_argument("--beta-grid", required=True,
                   help="comma-separated fairness weights")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("ablate", help="all variants over several seeds")
    _add_run_flags(p, "BOOML")
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--variants", help="subset, e.g. SGD,BOOML (default all)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("evaluate", help="score a saved checkpoint")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", default="20,50")
    p.add_argument("--split", choices=["validation", "test"], default="test")
    p.add_argument("--label", default="model")
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--tau", help="acc,div,fair thresholds")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate run directories")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
