"""Training-curve figures rendered next to the CSV metrics.

Uses the Agg backend so rendering works headless; import this module
lazily from command handlers to keep CLI startup light.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_STYLE = {
    "figure.figsize": (9.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 10,
}


def render_training_curves(log: list[dict], out_path: str, title: str | None = None) -> str:
    """Two panels over epochs: objective on the left, error rates on the
    right. Returns the written path."""
    epochs = [row["epoch"] for row in log]
    with plt.rc_context(_STYLE):
        fig, (ax_loss, ax_err) = plt.subplots(1, 2)
        ax_loss.plot(epochs, [row["train_loss"] for row in log], color="tab:blue")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training loss")
        ax_err.plot(epochs, [100 * row["train_err"] for row in log],
                    label="train", color="tab:blue")
        test = [(e, 100 * row["test_err"]) for e, row in zip(epochs, log)
                if row["test_err"] == row["test_err"]]  # skip NaN rows
        if test:
            ax_err.plot(*zip(*test), label="test", color="tab:red")
        ax_err.set_xlabel("epoch")
        ax_err.set_ylabel("error (%)")
        ax_err.legend()
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(out_path, dpi=150)
        plt.close(fig)
    return out_path


def render_comparison(curves: dict[str, list[dict]], out_path: str,
                      metric: str = "train_err", title: str | None = None) -> str:
    """Overlay one metric from several training logs (e.g. fused vs plain)."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.6))
        for name, log in curves.items():
            pts = [(row["epoch"], 100 * row[metric]) for row in log
                   if row[metric] == row[metric]]
            if pts:
                ax.plot(*zip(*pts), label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel(f"{metric.replace('_', ' ')} (%)")
        ax.legend()
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(out_path, dpi=150)
        plt.close(fig)
    return out_path
