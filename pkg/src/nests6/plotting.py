"""Report figures written next to the CSV outputs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps PNG bytes stable across identical runs.
_PNG_META = {"Software": None}

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig: plt.Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_training_curve(history: Sequence[dict[str, float]], path: str | Path) -> Path:
    """Train loss and validation MAE per epoch on twin axes."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = [h["epoch"] for h in history]
        ax.plot(ep, [h["train_loss"] for h in history], "o-", color="C0", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss", color="C0")
        ax2 = ax.twinx()
        ax2.plot(ep, [h["val_mae"] for h in history], "s--", color="C1", label="val MAE")
        ax2.set_ylabel("val MAE (raw units)", color="C1")
        ax2.grid(False)
        if not history:
            ax.text(0.5, 0.5, "no epochs run", ha="center", va="center", transform=ax.transAxes)
        return _save(fig, path)


def plot_rollout(horizons: Sequence[int], mae: Sequence[float], rmse: Sequence[float], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(horizons, mae, "o-", label="MAE")
        ax.plot(horizons, rmse, "s--", label="RMSE")
        ax.set_xlabel("horizon (steps)")
        ax.set_ylabel("error (raw units)")
        ax.set_xticks(list(horizons))
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_drift(kinds: Sequence[str], mae_on: Sequence[float], mae_off: Sequence[float], path: str | Path) -> Path:
    """Grouped bars of one-step MAE per drift kind, memory on vs off."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(kinds))
        ax.bar(x - 0.2, mae_on, 0.4, label="memory on")
        ax.bar(x + 0.2, mae_off, 0.4, label="memory off")
        ax.set_xticks(x, [k.replace("_", "\n") for k in kinds])
        ax.set_ylabel("one-step MAE (raw units)")
        ax.legend(frameon=False)
        ax.grid(axis="x", visible=False)
        return _save(fig, path)


def plot_heatmap(values: np.ndarray, path: str | Path, label: str = "RMSE (raw units)") -> Path:
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots()
        im = ax.imshow(values, cmap="viridis", origin="upper", interpolation="nearest")
        fig.colorbar(im, ax=ax, label=label)
        ax.set_xlabel("col")
        ax.set_ylabel("row")
        return _save(fig, path)
