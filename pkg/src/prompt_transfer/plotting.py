"""Figure rendering for reports: transfer heatmaps, training curves, indicator bars."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    # keep the SVG/PNG bytes free of timestamps and random ids
    "svg.hashsalt": "prompt-transfer",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def transfer_heatmap(matrix, path: str | Path, title: str = "zero-shot relative performance (%)") -> Path:
    """Sources (plus the random row) by targets, annotated with relative scores."""
    grid = np.vstack([matrix.relative, matrix.random_relative[None, :]])
    rows = [*matrix.sources, "random"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(matrix.targets), 0.8 + 0.5 * len(rows)))
        im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=max(100.0, float(grid.max())), aspect="auto")
        ax.set_xticks(range(len(matrix.targets)), matrix.targets, rotation=45, ha="right")
        ax.set_yticks(range(len(rows)), rows)
        ax.set_xlabel("target task")
        ax.set_ylabel("source prompt")
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                v = grid[i, j]
                ax.text(j, i, f"{v:.0f}", ha="center", va="center", color="white" if v < 60 else "black", fontsize=7)
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(title)
        return _save(fig, path)


def training_curves(curves: Mapping[str, object], path: str | Path, title: str = "dev score") -> Path:
    """One line per labelled ``TrainCurve``; dev score against optimizer steps."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for label, curve in curves.items():
            ax.plot(curve.steps, curve.scores, marker="o", ms=2.5, lw=1.2, label=label)
            if curve.convergence_step is not None:
                ax.axvline(curve.convergence_step, lw=0.6, ls=":", color=ax.lines[-1].get_color())
        ax.set_xlabel("step")
        ax.set_ylabel("dev score")
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
        ax.set_title(title)
        return _save(fig, path)


def indicator_bars(report, path: str | Path, title: str = "Spearman coefficient by metric") -> Path:
    """Overall mean coefficient per metric, with per-target values as dots."""
    metrics = report.metrics
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.0 + 0.9 * len(metrics), 3.0))
        means = [report.overall(m) for m in metrics]
        ax.bar(range(len(metrics)), [0.0 if v is None else v for v in means], color="0.7", edgecolor="0.3")
        for i, m in enumerate(metrics):
            vals = [v for v in report.coefficients[m].values() if v is not None]
            ax.scatter(np.full(len(vals), i), vals, s=10, color="C0", zorder=3)
        ax.axhline(0.0, color="black", lw=0.6)
        ax.set_xticks(range(len(metrics)), metrics)
        ax.set_ylim(-1.05, 1.05)
        ax.set_ylabel("coefficient")
        ax.set_title(title)
        return _save(fig, path)
