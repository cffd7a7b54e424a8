"""SVG figures for training runs: accuracy curves and 2-D decision regions."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
from matplotlib import rc_context  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

GRID_SIZE = 200
# fixed hash salt and no date stamp keep the SVG text identical across reruns
SVG_RC = {"svg.hashsalt": "plotllp", "svg.fonttype": "path"}

CURVES = (
    ("td", "TD (posterior)"),
    ("td_ot", "TD_OT (after OT)"),
    ("td_ot_5", "TD_OT_5 (last-5 ensemble)"),
    ("test_acc", "test"),
)


class NotTwoDimensionalError(ValueError):
    pass


def _save(fig, path):
    with rc_context(SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})


def plot_accuracy_curves(records, path) -> None:
    """Accuracy vs epoch for every series that has at least one finite value."""
    fig = Figure(figsize=(6, 4), layout="constrained")
    ax = fig.add_subplot()
    epochs = np.array([r.epoch for r in records], dtype=float)
    for key, label in CURVES:
        y = np.array([getattr(r, key) for r in records], dtype=float)
        keep = np.isfinite(y)
        if keep.any():
            ax.plot(epochs[keep], y[keep], marker="o" if keep.sum() == 1 else None, markersize=3, label=label)
    stage2 = [r.epoch for r in records if r.stage != "stage1"]
    if stage2 and len(stage2) < len(records):
        ax.axvline(min(stage2) - 0.5, color="0.6", linestyle="--", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def decision_grid(model, X, size: int = GRID_SIZE, margin: float = 0.5):
    """Predicted class over a ``size x size`` grid spanning the data plus a margin."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != 2:
        raise NotTwoDimensionalError(
            f"decision regions need 2-D features, got dimension {X.shape[1] if X.ndim == 2 else X.ndim}"
        )
    lo, hi = X.min(axis=0) - margin, X.max(axis=0) + margin
    xs = np.linspace(lo[0], hi[0], size)
    ys = np.linspace(lo[1], hi[1], size)
    gx, gy = np.meshgrid(xs, ys)
    pred = model.predict(np.column_stack([gx.ravel(), gy.ravel()]))
    return xs, ys, pred.reshape(size, size)


def plot_decision_regions(model, X, path, size: int = GRID_SIZE) -> None:
    """Grid prediction as a filled region with the points colored by predicted class."""
    xs, ys, grid = decision_grid(model, X, size)
    K = model.num_classes
    colors = matplotlib.colormaps["tab10"](np.arange(K) % 10)
    fig = Figure(figsize=(5, 5), layout="constrained")
    ax = fig.add_subplot()
    ax.pcolormesh(xs, ys, grid, cmap=ListedColormap(colors), vmin=-0.5, vmax=K - 0.5, alpha=0.25, shading="auto")
    pred = model.predict(X)
    for k in range(K):
        pts = X[pred == k]
        ax.scatter(pts[:, 0], pts[:, 1], s=6, color=colors[k], label=f"class {k}")
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.legend(loc="upper right", fontsize=8)
    _save(fig, path)
