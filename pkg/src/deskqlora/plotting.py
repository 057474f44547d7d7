"""Figures written next to the CSV/JSON reports: loss curves and rank distributions."""

from __future__ import annotations

from pathlib import Path

import matplotlib as mpl
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .judge import RankTable, ordinal
from .trainkit import LossCurve

# no version/date metadata, so reruns produce identical bytes
_PNG_META = {"Software": None}

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width: float, height: float) -> Figure:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def plot_loss_curve(curve: LossCurve, path, title: str = "Train & validation loss") -> Path:
    with mpl.rc_context(_STYLE):
        fig = _figure(6.0, 3.2)
        ax_tr, ax_va = fig.subplots(1, 2, sharey=True)
        if curve.train:
            it, loss = zip(*curve.train)
            ax_tr.plot(it, loss, lw=1.0, color="tab:blue")
        if curve.val:
            it, loss = zip(*curve.val)
            ax_va.plot(it, loss, lw=1.2, marker="o", ms=3, color="tab:orange")
        ax_tr.set_title("train")
        ax_va.set_title("validation")
        for ax in (ax_tr, ax_va):
            ax.set_xlabel("iteration")
            ax.grid(alpha=0.3)
        ax_tr.set_ylabel("cross-entropy")
        fig.suptitle(title)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, format="png", metadata=_PNG_META)
    return path


def plot_rank_distribution(table: RankTable, path, title: str = "Model placement per rank") -> Path:
    """One bar panel per rank position, bars = percentage of prompts per model."""
    k = table.k
    cols = 2 if k > 1 else 1
    rows = -(-k // cols)
    with mpl.rc_context(_STYLE):
        fig = _figure(3.2 * cols, 2.4 * rows)
        axes = fig.subplots(rows, cols, squeeze=False).ravel()
        colors = [f"C{i}" for i in range(len(table.models))]
        for j in range(k):
            ax = axes[j]
            vals = [float(table.rounded(m, j + 1)) for m in table.models]
            ax.bar(range(len(table.models)), vals, color=colors)
            ax.set_xticks(range(len(table.models)))
            ax.set_xticklabels(table.models, rotation=20, ha="right", fontsize=7)
            ax.set_ylim(0, 100)
            ax.set_title(f"{ordinal(j + 1)} place")
            ax.set_ylabel("% of prompts")
        for ax in axes[k:]:
            ax.set_visible(False)
        fig.suptitle(title)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, format="png", metadata=_PNG_META)
    return path
