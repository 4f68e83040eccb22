"""Delimited outputs and the figures rendered alongside them.

Every report path writes a CSV (comma delimiter, '.' decimal, header row)
and a PNG figure next to it. PNG metadata is pinned so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport, GroupMetrics  # noqa: E402
from .trainer import TrainLog  # noqa: E402

PNG_METADATA = {"Software": "viewseg"}
EVAL_COLUMNS = ("group", "f1_10", "f1_25", "f1_50", "edit", "acc", "count")
_METRIC_KEYS = ("f1_10", "f1_25", "f1_50", "edit", "acc", "count")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _save_figure(fig, path) -> None:
    fig.savefig(path, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)


def write_group_metrics_csv(path, groups: dict[str, GroupMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_COLUMNS)
        for name, gm in groups.items():
            writer.writerow([name] + [_fmt(gm.as_dict()[k]) for k in _METRIC_KEYS])


def write_eval_csv(path, report: EvalReport) -> None:
    write_group_metrics_csv(path, report.groups)


def write_train_log_csv(path, log: TrainLog, group_names: list[str]) -> None:
    header = ["epoch", "tas", "seq", "action", "aux"]
    for g in group_names:
        header.extend(f"{g}_{k}" for k in _METRIC_KEYS)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for entry in log.epochs:
            row = [entry.epoch, _fmt(entry.tas), _fmt(entry.seq),
                   _fmt(entry.action), _fmt(entry.aux)]
            for g in group_names:
                gm = entry.report.groups.get(g) if entry.report else None
                if gm is None:
                    row.extend([""] * len(_METRIC_KEYS))
                else:
                    row.extend(_fmt(gm.as_dict()[k]) for k in _METRIC_KEYS)
            writer.writerow(row)


def write_bench_csv(path, results: dict[str, EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("method",) + EVAL_COLUMNS)
        for method, report in results.items():
            for name, gm in report.groups.items():
                writer.writerow([method, name] +
                                [_fmt(gm.as_dict()[k]) for k in _METRIC_KEYS])


# ---------------------------------------------------------------------------
# figures


def plot_group_metrics(path, groups: dict[str, GroupMetrics], title: str) -> None:
    names = list(groups)
    metrics = ("f1_10", "f1_25", "f1_50", "edit", "acc")
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(metrics)
    for i, key in enumerate(metrics):
        xs = [j + i * width for j in range(len(names))]
        ax.bar(xs, [groups[n].as_dict()[key] for n in names], width=width, label=key)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(names))])
    ax.set_xticklabels(names)
    ax.set_ylabel("score")
    ax.set_ylim(0, 105)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_figure(fig, path)


def plot_eval_report(path, report: EvalReport, title: str = "evaluation") -> None:
    plot_group_metrics(path, report.groups, title)


def plot_train_curves(path, log: TrainLog, title: str = "training") -> None:
    epochs = [e.epoch for e in log.epochs]
    snapshots = [(e.epoch, e.report) for e in log.epochs if e.report is not None]
    fig, axes = plt.subplots(1, 2 if snapshots else 1, figsize=(9, 4), squeeze=False)
    ax = axes[0][0]
    for key in ("tas", "seq", "action", "aux"):
        vals = [getattr(e, key) for e in log.epochs]
        if any(v != 0.0 for v in vals) or key == "tas":
            ax.plot(epochs, vals, marker="o", markersize=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean step loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    if snapshots:
        ax2 = axes[0][1]
        group_names = list(snapshots[-1][1].groups)
        for g in group_names:
            xs = [ep for ep, rep in snapshots if g in rep.groups]
            ys = [rep.groups[g].f1_50 for _, rep in snapshots if g in rep.groups]
            ax2.plot(xs, ys, marker="s", markersize=3, label=g)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("F1@50")
        ax2.set_ylim(0, 105)
        ax2.set_title("evaluation snapshots")
        ax2.legend(fontsize=8)
    fig.tight_layout()
    _save_figure(fig, path)


def plot_bench_f1(path, results: dict[str, EvalReport], title: str = "method comparison") -> None:
    methods = list(results)
    group_names: list[str] = []
    for report in results.values():
        for g in report.groups:
            if g not in group_names:
                group_names.append(g)
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / max(1, len(group_names))
    for i, g in enumerate(group_names):
        xs = [j + i * width for j in range(len(methods))]
        ys = [results[m].groups[g].f1_50 if g in results[m].groups else 0.0
              for m in methods]
        ax.bar(xs, ys, width=width, label=g)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(methods))])
    ax.set_xticklabels(methods, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("F1@50")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save_figure(fig, path)
