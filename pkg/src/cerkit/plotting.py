"""Report figures. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cerkit.taxonomy import COMPOUND_NAMES

# fixed metadata keeps the PNG bytes stable across runs
_PNG_META = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def plot_confusion(cm: np.ndarray, path: str | Path, title: str = "", normalize: bool = True) -> Path:
    cm = np.asarray(cm, dtype=np.float64)
    shown = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1) if normalize else cm
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.2, 4.6))
        im = ax.imshow(shown, cmap="Blues", vmin=0, vmax=1 if normalize else None)
        labels = list(COMPOUND_NAMES)
        ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
        ax.set_yticks(range(len(labels)), labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        for (i, j), v in np.ndenumerate(cm):
            if v:
                ax.text(j, i, f"{int(v)}", ha="center", va="center", fontsize=7,
                        color="white" if shown[i, j] > 0.5 else "black")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return Path(path)


def plot_per_class(reports: Sequence, model_names: Sequence[str], path: str | Path) -> Path:
    """Grouped bars of per-class accuracy, one group per compound class."""
    n = len(reports)
    x = np.arange(len(COMPOUND_NAMES))
    width = 0.8 / max(n, 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 3.6))
        for k, (rep, name) in enumerate(zip(reports, model_names)):
            vals = np.nan_to_num(np.asarray(rep.per_class_accuracy, dtype=float))
            ax.bar(x + (k - (n - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x, COMPOUND_NAMES, rotation=30, ha="right")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return Path(path)


def plot_training_curves(log_rows: Sequence[dict], path: str | Path) -> Path:
    epochs = [r["epoch"] for r in log_rows]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
        for key in ("L_basic", "L_ce", "L_CL", "total"):
            a1.plot(epochs, [r[key] for r in log_rows], label=key)
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a1.legend(frameon=False, fontsize=8)
        a2.plot(epochs, [r["val_macro_f1"] for r in log_rows], marker="o", ms=3)
        a2.set_xlabel("epoch")
        a2.set_ylabel("val macro-F1")
        a2.set_ylim(0, 1)
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return Path(path)
