"""Figures for benchmark reports; everything is rendered straight to files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

from cip.bench import BenchRun  # noqa: E402

PANEL_METRICS = (("si", "SI (lower is better)"), ("cfc", "CFC"), ("afr", "AFR"), ("auroc", "OOD AUROC"))

RC = {
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _names(runs: Sequence[BenchRun]) -> list[str]:
    return list(dict.fromkeys(r.name for r in runs))


def metric_panels(runs: Sequence[BenchRun], path: str | Path) -> Path:
    """One panel per diagnostic: seed mean as a bar, individual seeds as dots."""
    names = _names(runs)
    x = np.arange(len(names))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(PANEL_METRICS), figsize=(3.0 * len(PANEL_METRICS), 3.2))
        for ax, (metric, label) in zip(axes, PANEL_METRICS):
            for i, name in enumerate(names):
                vals = np.array([np.nan if getattr(r.report, metric) is None else getattr(r.report, metric)
                                 for r in runs if r.name == name], dtype=float)
                ax.bar(i, np.nanmean(vals), color="0.8", edgecolor="0.3", width=0.6)
                jitter = np.linspace(-0.15, 0.15, len(vals)) if len(vals) > 1 else np.zeros(1)
                ax.plot(i + jitter, vals, "o", ms=3, color="C0")
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=45, ha="right")
            ax.set_title(label)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def training_curves(runs: Sequence[BenchRun], path: str | Path) -> Path:
    """Validation AUROC and total loss per epoch, one line per (config, seed)."""
    names = _names(runs)
    with plt.rc_context(RC):
        fig, (ax_auc, ax_loss) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        for i, name in enumerate(names):
            for j, run in enumerate(r for r in runs if r.name == name):
                ep = [e["epoch"] for e in run.train_log]
                auc = [np.nan if e["val_auroc"] is None else e["val_auroc"] for e in run.train_log]
                label = name if j == 0 else None
                ax_auc.plot(ep, auc, color=f"C{i}", lw=1, alpha=0.8, label=label)
                ax_auc.axvline(run.best_epoch, color=f"C{i}", lw=0.5, ls=":")
                ax_loss.plot(ep, [e["total"] for e in run.train_log], color=f"C{i}", lw=1, alpha=0.8, label=label)
        for ax in (ax_auc, ax_loss):
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax_auc.set_xlabel("epoch")
        ax_auc.set_ylabel("validation AUROC")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training objective")
        ax_loss.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path
