"""Aggregation of run artifacts into summary tables, plot data and figures.

``generate_report`` scans a results tree for ``result.json`` files and writes:

  summary.csv               per (variant, K) mean and std over runs
  group_table.csv           per-group normalized weights and metrics
  plotdata/*.csv            raw series behind every figure
  figures/*.png             rendered matplotlib figures

The delimited outputs are deterministic: fixed row order, fixed float
formatting, newline line endings.  Rerunning the report over the same results
yields byte-identical CSV files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import VARIANTS

METRIC_KEYS = ("ndcg", "ild", "arp", "res_sum", "har_mean")


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.10g}"


def collect_results(root) -> list[dict]:
    """Load every result.json below root, tagged with its relative run path."""
    root = Path(root)
    out = []
    for path in sorted(root.rglob("result.json")):
        with open(path) as fh:
            res = json.load(fh)
        res["run"] = path.parent.relative_to(root).as_posix()
        out.append(res)
    if not out:
        raise ValueError(f"no result.json files found under {root}")
    return out


def _variant_rank(name: str) -> tuple:
    return (VARIANTS.index(name) if name in VARIANTS else len(VARIANTS), name)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_summary(results: list[dict], path) -> list[dict]:
    """Per (variant, K) mean and population std of the test metrics."""
    cells: dict[tuple, dict[str, list]] = {}
    for res in results:
        for k, rep in res["reports"].items():
            key = (res["variant"], int(k))
            bucket = cells.setdefault(key, {m: [] for m in METRIC_KEYS})
            for m in METRIC_KEYS:
                bucket[m].append(rep[m])
    header = ["variant", "k", "runs"]
    for m in METRIC_KEYS:
        header += [f"{m}_mean", f"{m}_std"]
    rows, table = [], []
    for (variant, k) in sorted(cells, key=lambda vk: (_variant_rank(vk[0]), vk[1])):
        bucket = cells[(variant, k)]
        row = [variant, str(k), str(len(bucket[METRIC_KEYS[0]]))]
        entry = {"variant": variant, "k": k}
        for m in METRIC_KEYS:
            vals = np.asarray(bucket[m], dtype=np.float64)
            entry[f"{m}_mean"] = float(np.mean(vals))
            entry[f"{m}_std"] = float(np.std(vals))
            row += [_fmt(entry[f"{m}_mean"]), _fmt(entry[f"{m}_std"])]
        rows.append(row)
        table.append(entry)
    _write_csv(path, header, rows)
    return table


def write_group_table(results: list[dict], path) -> None:
    """Per-group learned weights (normalized to sum 1) and metrics."""
    header = ["run", "variant", "seed", "group", "num_users", "lambda", "beta",
              "w_acc", "w_div", "w_fair", "ndcg", "ild", "arp"]
    rows = []
    for res in results:
        for gr in res.get("group_table") or []:
            rows.append([res["run"], res["variant"], str(res["seed"]),
                         str(gr["group"]), str(gr["num_users"]),
                         _fmt(gr.get("lam")), _fmt(gr.get("beta")),
                         _fmt(gr["w_acc"]), _fmt(gr["w_div"]),
                         _fmt(gr["w_fair"]), _fmt(gr["ndcg"]),
                         _fmt(gr["ild"]), _fmt(gr["arp"])])
    _write_csv(path, header, rows)


def write_loss_curves(results: list[dict], path) -> None:
    header = ["run", "variant", "seed", "trial", "epoch", "val_loss"]
    rows = []
    for res in results:
        for trial, epoch, val in res.get("val_curve") or []:
            rows.append([res["run"], res["variant"], str(res["seed"]),
                         str(int(trial)), str(int(epoch)), _fmt(val)])
    _write_csv(path, header, rows)


def write_incumbents(results: list[dict], path) -> None:
    header = ["run", "variant", "seed", "trial", "incumbent_xi"]
    rows = []
    for res in results:
        for t, xi in enumerate(res.get("incumbents") or []):
            rows.append([res["run"], res["variant"], str(res["seed"]),
                         str(t), _fmt(xi)])
    _write_csv(path, header, rows)


def write_weight_trajectories(results: list[dict], path) -> None:
    header = ["run", "variant", "seed", "epoch", "group",
              "w_acc", "w_div", "w_fair"]
    rows = []
    for res in results:
        for epoch, wmat in enumerate(res.get("weight_traj") or []):
            for g, (wa, wd, wf) in enumerate(wmat):
                rows.append([res["run"], res["variant"], str(res["seed"]),
                             str(epoch), str(g), _fmt(wa), _fmt(wd), _fmt(wf)])
    _write_csv(path, header, rows)


def write_objective_losses(results: list[dict], path) -> None:
    header = ["run", "variant", "seed", "epoch",
              "acc_loss", "div_loss", "fair_loss"]
    rows = []
    for res in results:
        for epoch, (la, ld, lf) in enumerate(res.get("loss_traj") or []):
            rows.append([res["run"], res["variant"], str(res["seed"]),
                         str(epoch), _fmt(la), _fmt(ld), _fmt(lf)])
    _write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# figures

def _finish(fig, ax, title, xlabel, ylabel, path):
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(results, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    drew = False
    for res in results:
        curve = res.get("val_curve") or []
        if not curve:
            continue
        ys = [row[2] for row in curve]
        ax.plot(range(1, len(ys) + 1), ys, label=res["run"], linewidth=1)
        drew = True
    if not drew:
        plt.close(fig)
        return None
    return _finish(fig, ax, "validation combined loss", "trained epoch",
                   "loss", path)


def plot_incumbents(results, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    drew = False
    for res in results:
        inc = res.get("incumbents") or []
        if not inc:
            continue
        ys = [math.nan if v is None else v for v in inc]
        ax.plot(range(len(ys)), ys, label=res["run"], linewidth=1)
        drew = True
    if not drew:
        plt.close(fig)
        return None
    return _finish(fig, ax, "tuning incumbent", "trial", "best xi so far",
                   path)


def plot_weight_trajectories(results, path):
    chosen = next((r for r in results if r.get("weight_traj")), None)
    if chosen is None:
        return None
    traj = np.asarray(chosen["weight_traj"], dtype=np.float64)  # (E, W, 3)
    fig, ax = plt.subplots(figsize=(6, 4))
    styles = ("-", "--", ":")
    names = ("acc", "div", "fair")
    for g in range(traj.shape[1]):
        for o in range(3):
            ax.plot(traj[:, g, o], styles[o], linewidth=1,
                    label=f"g{g} {names[o]}")
    return _finish(fig, ax, f"trainable weights ({chosen['run']})", "epoch",
                   "softmax weight", path)


def plot_group_weights(results, path):
    chosen = next((r for r in results
                   if r.get("group_table") and r["variant"] not in
                   ("SGD", "Trainable")), None)
    if chosen is None:
        return None
    table = chosen["group_table"]
    groups = np.arange(len(table))
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.25
    for i, key in enumerate(("w_acc", "w_div", "w_fair")):
        ax.bar(groups + (i - 1) * width, [row[key] for row in table], width,
               label=key)
    ax.set_xticks(groups)
    ax.set_xticklabels([f"group {g}" for g in groups])
    return _finish(fig, ax, f"learned trade-off weights ({chosen['run']})",
                   "", "normalized weight", path)


def generate_report(root, outdir) -> dict:
    """Aggregate all runs under root into CSVs and figures under outdir."""
    results = collect_results(root)
    out = Path(outdir)
    plotdata = out / "plotdata"
    figures = out / "figures"
    plotdata.mkdir(parents=True, exist_ok=True)
    figures.mkdir(parents=True, exist_ok=True)

    paths = {"summary": out / "summary.csv",
             "group_table": out / "group_table.csv"}
    write_summary(results, paths["summary"])
    write_group_table(results, paths["group_table"])
    for name, fn in (("loss_curves", write_loss_curves),
                     ("incumbents", write_incumbents),
                     ("weight_trajectories", write_weight_trajectories),
                     ("objective_losses", write_objective_losses)):
        paths[name] = plotdata / f"{name}.csv"
        fn(results, paths[name])
    for name, fn in (("loss_curves", plot_loss_curves),
                     ("incumbents", plot_incumbents),
                     ("weight_trajectories", plot_weight_trajectories),
                     ("group_weights", plot_group_weights)):
        fig_path = fn(results, figures / f"{name}.png")
        if fig_path is not None:
            paths[f"fig_{name}"] = fig_path
    return {k: str(v) for k, v in paths.items()}
