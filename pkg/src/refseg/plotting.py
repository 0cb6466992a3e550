"""Static figures from ablation-grid CSV reports (written to files, Agg backend)."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRICS = ("mIoU", "NTA-IoU")


def _num(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def _ok(rows: Sequence[dict]) -> list[dict]:
    return [r for r in rows if r.get("status", "ok") == "ok"]


def lambda_sweep_series(rows: Sequence[dict], metric: str = "mIoU") -> dict[str, list[tuple[float, float]]]:
    """Two curves: the metric against lambda_cpcl with lambda_tccl held at
    0.1, and against lambda_tccl with lambda_cpcl held at 0.1. Points are
    averaged over seeds and sorted by lambda."""
    acc: dict[tuple[str, float], list[float]] = defaultdict(list)
    for r in _ok(rows):
        c, t, v = _num(r.get("lambda_cpcl")), _num(r.get("lambda_tccl")), _num(r.get(metric))
        if math.isnan(v):
            continue
        if math.isclose(t, 0.1):
            acc[("lambda_cpcl", c)].append(v)
        if math.isclose(c, 0.1):
            acc[("lambda_tccl", t)].append(v)
    series: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for (name, lam), vals in sorted(acc.items()):
        series[name].append((lam, sum(vals) / len(vals)))
    return dict(series)


def plot_lambda_sweep(rows: Sequence[dict], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in METRICS:
        series = lambda_sweep_series(rows, metric)
        if not any(len(pts) > 1 for pts in series.values()):
            continue
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), sharey=True)
        for ax, name in zip(axes, ("lambda_cpcl", "lambda_tccl")):
            pts = series.get(name, [])
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, [100 * y for y in ys], marker="o", color="tab:blue")
            other = "lambda_tccl" if name == "lambda_cpcl" else "lambda_cpcl"
            ax.set_xlabel(f"{name} ({other} = 0.1)")
            ax.grid(alpha=0.3)
        axes[0].set_ylabel(f"{metric} (%)")
        fig.tight_layout()
        path = out_dir / f"lambda_sweep_{metric.replace('-', '_').lower()}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def plot_cells(rows: Sequence[dict], out_dir: str | Path) -> Path | None:
    """Bar chart of mIoU and NTA-IoU per grid cell (seed-averaged)."""
    acc: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    order: list[str] = []
    for r in _ok(rows):
        if r["cell"] not in order:
            order.append(r["cell"])
        for m in METRICS:
            v = _num(r.get(m))
            if not math.isnan(v):
                acc[r["cell"]][m].append(v)
    if not order:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 1.2 * len(order) + 2), 3.2))
    for ax, m in zip(axes, METRICS):
        vals = [100 * sum(acc[c][m]) / len(acc[c][m]) if acc[c][m] else 0.0 for c in order]
        ax.bar(range(len(order)), vals, color="tab:gray")
        ax.set_xticks(range(len(order)), order, rotation=30, ha="right")
        ax.set_ylabel(f"{m} (%)")
    fig.tight_layout()
    path = out_dir / "cells.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_report(rows: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """All figures that the rows support."""
    written = plot_lambda_sweep(rows, out_dir)
    cells = plot_cells(rows, out_dir)
    if cells is not None:
        written.append(cells)
    return written
