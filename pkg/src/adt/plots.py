"""Static figures: mAP-vs-iteration curves and P_attack sweep bars."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


class PlotError(ValueError):
    pass


def _curve(path) -> tuple[str, list[int], list[float]]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise PlotError(f"{path}: empty log")
    label = Path(path).parent.name or Path(path).stem
    xs, ys = [], []
    for n, line in enumerate(text):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise PlotError(f"{path}:{n + 1}: malformed line") from exc
        if n == 0 and "header" in rec:
            label = rec["header"].get("arm", label)
            continue
        if rec.get("phase") == "eval":
            try:
                xs.append(int(rec["iteration"]))
                ys.append(float(rec["teacher"]["mAP50"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise PlotError(f"{path}:{n + 1}: eval record lacks teacher mAP50") from exc
    if not xs:
        raise PlotError(f"{path}: no evaluation records")
    return label, xs, ys


def plot_curves(logs, out_path) -> list[str]:
    """One line per metrics log; returns the legend labels in order."""
    curves = [_curve(p) for p in logs]
    if not curves:
        raise PlotError("no logs given")
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = []
    for (label, xs, ys), path in zip(curves, logs):
        name = f"{label} ({Path(path).parent.parent.name})" if Path(path).parent.parent.name.startswith("seed") else label
        ax.plot(xs, ys, marker="o", label=name)
        labels.append(name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("teacher mAP@0.5 (%)")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return labels


def sweep_bars(summary: dict) -> list[tuple[str, float]]:
    """(arm, mean mAP50) ordered by P_attack where available, arms without one first."""
    arms = summary.get("arms") or {}
    if not arms:
        raise PlotError("sweep summary has no arms")
    rows = []
    for name in summary.get("order", list(arms)):
        entry = arms[name]
        p = entry.get("p_attack")
        rows.append((-1.0 if p is None else float(p), name, entry.get("mean_mAP50")))
    rows.sort(key=lambda r: r[0])
    return [(name, float("nan") if v is None else float(v)) for _, name, v in rows]


def plot_sweep(summary: dict, out_path) -> list[tuple[str, float]]:
    bars = sweep_bars(summary)
    fig, ax = plt.subplots(figsize=(max(4, 1 + len(bars)), 4))
    names = [b[0] for b in bars]
    vals = [b[1] for b in bars]
    ax.bar(np.arange(len(bars)), vals, color="tab:blue")
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.1f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(np.arange(len(bars)), names)
    ax.set_ylabel("seed-mean mAP@0.5 (%)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return bars
