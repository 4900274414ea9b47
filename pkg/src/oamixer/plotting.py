"""Figures written next to the CSV reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

SPLIT_LABELS = {
    "original": "Original",
    "only_bg": "Only-BG",
    "mixed_same": "Mixed-Same",
    "mixed_rand": "Mixed-Rand",
}


def figsize(scale: float = 1.0):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    width = 5.5 * scale
    return width, width * golden


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_kappa(per_layer: Sequence[float], quarters: Sequence[float], path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=figsize(1.3))
        ax1.bar(range(1, len(per_layer) + 1), per_layer, color="#4c72b0")
        ax1.set_xlabel("layer")
        ax1.set_ylabel("mask scale")
        ax1.set_xticks(range(1, len(per_layer) + 1))
        ax2.bar([f"{q}/4" for q in range(1, 5)], quarters, color="#dd8452")
        ax2.set_xlabel("depth quarter")
        for ax in (ax1, ax2):
            ax.axhline(0, color="k", lw=0.5)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_accuracies(results: dict[str, dict[str, float]], path) -> Path:
    """Grouped bars per split; ``results`` maps a model name to split accuracies."""
    splits = [s for s in SPLIT_LABELS if any(s in r for r in results.values())]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        width = 0.8 / max(len(results), 1)
        for k, (name, accs) in enumerate(results.items()):
            xs = [i + (k - (len(results) - 1) / 2) * width for i in range(len(splits))]
            label = name
            if "bg_gap" in accs:
                label = f"{name} (BG-Gap {100 * accs['bg_gap']:.1f})"
            ax.bar(xs, [100 * accs.get(s, float("nan")) for s in splits], width, label=label)
        ax.set_xticks(range(len(splits)))
        ax.set_xticklabels([SPLIT_LABELS[s] for s in splits])
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_training(records: list[dict], path) -> Path:
    steps = [r for r in records if "step" in r]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot([r["step"] for r in steps], [r["loss"] for r in steps], lw=0.6, color="#4c72b0")
        ax.set_xlabel("step")
        ax.set_ylabel("train loss")
        if steps and steps[0]["kappa"]:
            ax2 = ax.twinx()
            kap = list(zip(*[r["kappa"] for r in steps]))
            for i, series in enumerate(kap):
                ax2.plot([r["step"] for r in steps], series, lw=0.8, ls="--", label=f"kappa {i + 1}")
            ax2.set_ylabel("mask scale")
            ax2.legend(frameon=False, loc="upper right")
        return _save(fig, path)
