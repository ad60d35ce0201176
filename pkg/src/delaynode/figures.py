"""Figure rendering for the CLI report paths.

Every report subcommand writes its delimited output and, next to it, a PNG
with the matching picture: the sampled trajectories with their split, the
delay/loss training paths, rolled predictions against truth, bifurcation
diagrams, and the nonlinearity surfaces.  PNG only - its byte stream is
deterministic, so repeated runs stay comparable.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update(
    {
        "figure.figsize": (6.4, 4.0),
        "font.size": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "lines.linewidth": 1.2,
        "savefig.dpi": 150,
    }
)


def save_figure(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def dataset_figure(ds, traj_id=0):
    """One trajectory with the train/test split marked."""
    fig, ax = plt.subplots()
    vals = ds.values[traj_id]
    t_split = ds.times[ds.n_train - 1]
    ax.plot(ds.times[: ds.n_train], vals[: ds.n_train, 0], "C0.-", ms=2, label="train")
    ax.plot(ds.times[ds.n_train :], vals[ds.n_train :, 0], "C3.-", ms=2, label="test")
    ax.axvline(t_split, color="k", lw=0.8, ls="--")
    ax.set_xlabel("t")
    ax.set_ylabel("x")
    ax.set_title(f"trajectory {traj_id} ({ds.n_train} train / {ds.n_test} test samples)")
    ax.legend()
    return fig


def trainlog_figure(log):
    """Delay paths on top, training loss below."""
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 5.0))
    iters = np.arange(1, log.iterations + 1)
    for i in range(log.delays.shape[1]):
        ax1.plot(iters, log.delays[:, i], label=f"tau_{i+1}")
    ax1.set_ylabel("delay")
    ax1.legend()
    ax2.semilogy(iters, np.maximum(log.loss, 1e-12), "C0")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("batch loss")
    return fig


def predictions_figure(rows, t_split):
    """Rolled predictions vs truth, train window on top, test below.

    rows: array with columns (t, x_true, x_pred).
    """
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.4, 5.0))
    for ax, mask, title in (
        (ax1, rows[:, 0] <= t_split + 1e-9, "train window"),
        (ax2, rows[:, 0] > t_split + 1e-9, "test window"),
    ):
        sel = rows[mask]
        ax.plot(sel[:, 0], sel[:, 1], "k--", label="data")
        ax.plot(sel[:, 0], sel[:, 2], "C0", label="prediction")
        ax.set_ylabel("x")
        ax.set_title(title)
    ax2.set_xlabel("t")
    ax1.legend()
    return fig


def diagram_figure(diag, overlay=None):
    """Extrema vs delay; optional second diagram drawn underneath for
    comparison."""
    fig, ax = plt.subplots()
    if overlay is not None:
        pts = overlay.points()
        if len(pts):
            ax.plot(pts[:, 0], pts[:, 1], ".", color="0.7", ms=2, label="reference")
    pts = diag.points()
    if len(pts):
        ax.plot(pts[:, 0], pts[:, 1], ".", color="C0", ms=2, label="scan")
    ax.set_xlabel("tau")
    ax.set_ylabel("steady-state extrema of x")
    if overlay is not None:
        ax.legend()
    return fig


def surface_figure(grid):
    """Truth, model, and error surfaces over (x, x_delayed)."""
    fig, axes = plt.subplots(1, 3, figsize=(9.6, 3.2))
    extent = (grid.x_delayed[0], grid.x_delayed[-1], grid.x[0], grid.x[-1])
    for ax, data, title in (
        (axes[0], grid.truth, "truth"),
        (axes[1], grid.model, "model"),
        (axes[2], grid.error, "model - truth"),
    ):
        im = ax.imshow(data, origin="lower", extent=extent, aspect="auto")
        ax.set_title(title)
        ax.set_xlabel("x(t - tau)")
        fig.colorbar(im, ax=ax, shrink=0.85)
    axes[0].set_ylabel("x(t)")
    return fig
