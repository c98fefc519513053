"""Figure rendering for sweep tables and per-layer campaign breakdowns.

Renders to files only (Agg backend); no interactive windows.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import InputError
from .report import DSETable, LayerMetrics


def render_sweep(table: DSETable, path: str) -> None:
    """Grouped bars: relative accuracy under faults per bit width and method."""
    rows = [r for r in table.rows if r.error is None]
    if not rows:
        raise InputError("no successful sweep cells to plot")
    widths = sorted({r.bits for r in rows}, reverse=True)
    methods = []
    for r in rows:
        if r.method not in methods:
            methods.append(r.method)
    cell = {(r.bits, r.method): r.relative_accuracy for r in rows}
    fig, ax = plt.subplots(figsize=(7, 4))
    group_w = 0.8
    bar_w = group_w / len(methods)
    for j, method in enumerate(methods):
        xs = [i - group_w / 2 + bar_w * (j + 0.5) for i in range(len(widths))]
        ys = [cell.get((b, method), 0.0) for b in widths]
        ax.bar(xs, ys, width=bar_w, label=method)
    ax.set_xticks(range(len(widths)))
    ax.set_xticklabels([f"{b}-bit" for b in widths])
    ax.set_ylabel("relative accuracy under faults (%)")
    ax.set_xlabel("activation/weight width")
    ax.set_ylim(0, 105)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_layer_breakdown(groups: tuple[LayerMetrics, ...], path: str) -> None:
    """Per-layer SDC rates for one campaign."""
    if not groups:
        raise InputError("no per-layer groups to plot")
    layers = [g.layer for g in groups]
    fig, ax = plt.subplots(figsize=(7, 4))
    series = (("SDC-1", [g.metrics.sdc1_rate for g in groups]),
              ("SDC-5", [g.metrics.sdc5_rate for g in groups]),
              ("SDC-10%", [g.metrics.sdc10_rate for g in groups]))
    bar_w = 0.8 / len(series)
    for j, (label, ys) in enumerate(series):
        xs = [i - 0.4 + bar_w * (j + 0.5) for i in range(len(layers))]
        ax.bar(xs, ys, width=bar_w, label=label)
    ax.set_xticks(range(len(layers)))
    ax.set_xticklabels([f"layer {i}" for i in layers])
    ax.set_ylabel("rate over (repetition, input) pairs (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
