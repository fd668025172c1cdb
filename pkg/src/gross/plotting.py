"""Figures for search and ranking reports (PNG, Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .search import format_config  # noqa: E402

__all__ = ["plot_search", "plot_ranking", "plot_history"]

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.6),
    "savefig.dpi": 150,
}


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_search(result, path, baseline=None, title=None):
    """Accuracy against total MACs for every configuration a search scored.

    The budget is drawn as a vertical line, the chosen configuration is
    ringed, and ``baseline`` (a config tuple) is marked if it was scored.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        macs = np.array([e.total_macs for e in result.evaluated], dtype=float) / 1e6
        acc = np.array([e.accuracy for e in result.evaluated]) * 100
        ax.scatter(macs, acc, s=10, c="0.55", lw=0, label="evaluated")
        ax.axvline(result.budget / 1e6, color="tab:red", ls="--", lw=1, label="budget")
        if baseline is not None:
            for e in result.evaluated:
                if e.config == tuple(baseline):
                    ax.scatter([e.total_macs / 1e6], [e.accuracy * 100], marker="s", s=30,
                               color="tab:blue", label=f"baseline {format_config(e.config)}")
        ax.scatter([result.best_macs.total_macs / 1e6], [result.best_accuracy * 100], s=60,
                   facecolors="none", edgecolors="tab:green", lw=1.5, label=f"found {format_config(result.best)}")
        ax.set_xlabel("MACs (millions)")
        ax.set_ylabel("accuracy (%)")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, fontsize=7, loc="lower right")
        return _save(fig, path)


def plot_ranking(predicted, true, path, title=None):
    """Predicted against true accuracy with the identity line."""
    p = np.asarray(predicted, dtype=float) * 100
    t = np.asarray(true, dtype=float) * 100
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(t, p, s=12, color="tab:blue", lw=0)
        lo, hi = min(p.min(), t.min()), max(p.max(), t.max())
        ax.plot([lo, hi], [lo, hi], color="0.4", lw=0.8, ls=":")
        ax.set_xlabel("true accuracy (%)")
        ax.set_ylabel("predicted accuracy (%)")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_history(history, path, title=None):
    """Training loss and accuracy per epoch."""
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [r["train_loss"] for r in history], color="tab:red", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.spines["right"].set_visible(True)
        ax2.plot(epochs, [r["train_accuracy"] * 100 for r in history], color="tab:blue", label="train acc")
        if all(r.get("val_accuracy") is not None for r in history):
            ax2.plot(epochs, [r["val_accuracy"] * 100 for r in history], color="tab:green", label="val acc")
        ax2.set_ylabel("accuracy (%)")
        fig.legend(frameon=False, fontsize=7, loc="upper center", ncol=3)
        if title:
            ax.set_title(title)
        return _save(fig, path)
