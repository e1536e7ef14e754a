"""Figure rendering for run reports, landscapes, and sweeps.

Figures are written next to the delimited outputs they visualize; every
number shown is read from the same in-memory results the CSV/JSON writers
receive, so the plots never recompute anything.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import AccuracyMatrix, RunReport

_METRIC_KEYS = ("final_acc", "aaa", "forgetting", "plasticity")


def render_report_figure(report: RunReport, path: str | Path) -> Path:
    """Accuracy matrix heatmap plus metric bars for one run."""
    m: AccuracyMatrix = report.acc_matrix
    size = m.num_tasks
    grid = np.full((size, size), np.nan)
    for t, row in enumerate(m.rows):
        grid[t, : len(row)] = row

    fig, (ax_mat, ax_bar) = plt.subplots(1, 2, figsize=(9, 4))
    im = ax_mat.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
    ax_mat.set_xlabel("task evaluated")
    ax_mat.set_ylabel("after training task")
    ax_mat.set_xticks(range(size), [str(i + 1) for i in range(size)])
    ax_mat.set_yticks(range(size), [str(i + 1) for i in range(size)])
    ax_mat.set_title(f"{report.method} seed {report.seed}")
    fig.colorbar(im, ax=ax_mat, fraction=0.046)

    metrics = report.metrics()
    vals = [metrics[k] for k in _METRIC_KEYS]
    ax_bar.bar(range(len(_METRIC_KEYS)), vals, color="tab:blue")
    ax_bar.set_xticks(range(len(_METRIC_KEYS)), _METRIC_KEYS, rotation=20)
    ax_bar.set_ylim(0, 1)
    ax_bar.set_title("metrics")
    for i, v in enumerate(vals):
        ax_bar.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)

    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_summary_figure(summary_rows: list[dict], path: str | Path) -> Path:
    """Grouped bars of mean metrics per method, with std error bars."""
    methods = [r["method"] for r in summary_rows]
    fig, axes = plt.subplots(1, len(_METRIC_KEYS), figsize=(3.2 * len(_METRIC_KEYS), 3.4))
    for ax, key in zip(np.atleast_1d(axes), _METRIC_KEYS):
        means = [r[f"{key}_mean"] for r in summary_rows]
        stds = [r[f"{key}_std"] for r in summary_rows]
        ax.bar(range(len(methods)), means, yerr=stds, capsize=3, color="tab:purple")
        ax.set_xticks(range(len(methods)), methods, rotation=30, ha="right")
        ax.set_title(key)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_landscape_figure(
    beta_vals: np.ndarray,
    alpha_vals: np.ndarray,
    losses: np.ndarray,
    markers: dict,
    path: str | Path,
) -> Path:
    """Loss heatmap over the merge plane with the three reference points."""
    fig, ax = plt.subplots(figsize=(5.6, 4.6))
    clipped = np.minimum(losses, np.nanpercentile(losses, 98))
    mesh = ax.pcolormesh(beta_vals, alpha_vals, clipped.T, cmap="magma", shading="auto")
    fig.colorbar(mesh, ax=ax, label="avg task loss")
    # the convex merge family lives on beta = 1 - alpha
    a_line = np.linspace(alpha_vals.min(), alpha_vals.max(), 50)
    ax.plot(1.0 - a_line, a_line, color="white", lw=0.8, ls="--", alpha=0.7)
    ax.plot(1.0, 0.0, marker="o", color="cyan", ms=7, ls="none", label="previous model")
    ax.plot(0.0, 1.0, marker="s", color="lime", ms=7, ls="none", label="task solution")
    ax.plot(
        markers["merged"]["beta"], markers["merged"]["alpha"],
        marker="*", color="red", ms=12, ls="none", label="merged",
    )
    ax.set_xlabel("beta (previous-model weight)")
    ax.set_ylabel("alpha (task-solution weight)")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_sweep_figure(param: str, rows: list[dict], path: str | Path) -> Path:
    """Metric curves (mean over seeds) against the swept parameter."""
    ok_rows = sorted(
        (r for r in rows if r.get("n_seeds") and r.get(f"{_METRIC_KEYS[0]}_mean") is not None),
        key=lambda r: r["value"],
    )
    values = [r["value"] for r in ok_rows]
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    for key in _METRIC_KEYS:
        means = [r[f"{key}_mean"] for r in ok_rows]
        stds = [r[f"{key}_std"] for r in ok_rows]
        ax.errorbar(values, means, yerr=stds, marker="o", capsize=3, label=key)
    ax.set_xlabel(param)
    ax.set_ylabel("metric value")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
