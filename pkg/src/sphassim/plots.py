"""Figure rendering for the CLI report paths.

Every function writes a PNG next to the delimited output it illustrates and
returns the path.  Rendering is headless (Agg backend).
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_field_maps",
    "save_loss_trace",
    "save_rmse_curves",
    "save_sweep_boxplot",
    "save_pred_curve",
]


def _finish(fig, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def save_field_maps(values: np.ndarray, nlon: int, nlat: int, path,
                    channel_names=(), title: str = "") -> str:
    """Longitude-latitude maps, one panel per channel.

    ``values`` is (nlon*nlat, c) in lon-major point order (or already shaped
    (nlon, nlat, c)).
    """
    v = np.asarray(values)
    if v.ndim == 2 and v.shape[0] == nlon * nlat:
        v = v.reshape(nlon, nlat, -1)
    elif v.ndim == 2:
        v = v[:, :, None]
    c = v.shape[2]
    names = list(channel_names) or [f"ch{i}" for i in range(c)]
    fig, axes = plt.subplots(1, c, figsize=(5.2 * c, 3.2), squeeze=False)
    lon = np.linspace(0, 360, nlon + 1)
    lat = np.linspace(-90, 90, nlat + 1)
    for i in range(c):
        ax = axes[0, i]
        im = ax.pcolormesh(lon, lat, v[:, :, i].T, shading="flat", cmap="RdBu_r")
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.set_title(names[i])
        ax.set_xlabel("lon [deg]")
        ax.set_ylabel("lat [deg]")
    if title:
        fig.suptitle(title)
    return _finish(fig, path)


def save_loss_trace(rows, path, title: str = "training loss") -> str:
    """Semilogy curves of the (epoch, recon, pred) trace rows."""
    rows = list(rows)
    ep = [r[0] for r in rows]
    rec = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.semilogy(ep, rec, label="reconstruction")
    pred = [r[2] for r in rows]
    if any(math.isfinite(p) for p in pred):
        ax.semilogy(ep, pred, label="prediction")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title(title)
    return _finish(fig, path)


def save_rmse_curves(curves: dict[str, list[float]], path,
                     hline: float | None = None,
                     title: str = "assimilation RMSE") -> str:
    """Per-cycle RMSE lines, one per labelled run."""
    fig, ax = plt.subplots(figsize=(5.8, 3.6))
    for label, ys in curves.items():
        ax.plot(range(len(ys)), ys, label=label, lw=1.3)
    if hline is not None:
        ax.axhline(hline, color="k", ls="--", lw=0.9, label=f"ref {hline:g}")
    ax.set_xlabel("cycle")
    ax.set_ylabel("weighted RMSE")
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _finish(fig, path)


def save_sweep_boxplot(rows, path, title: str = "sweep results") -> str:
    """One box per method over all grid configurations (mean analysis RMSE)."""
    by_method: dict[str, list[float]] = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r.mean_analysis_rmse)
    fig, ax = plt.subplots(figsize=(1.2 * max(4, len(by_method)) + 1.5, 3.6))
    labels = list(by_method)
    ax.boxplot([by_method[k] for k in labels], tick_labels=labels)
    for i, k in enumerate(labels):
        best = min(by_method[k])
        ax.annotate(f"{best:.3f}", (i + 1, best), textcoords="offset points",
                    xytext=(0, -12), ha="center", fontsize=8, fontweight="bold")
    ax.set_ylabel("mean analysis RMSE")
    ax.set_title(title)
    return _finish(fig, path)


def save_pred_curve(curve, path, title: str = "multi-step prediction RMSE") -> str:
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(range(len(curve)), curve, marker="o", ms=3)
    ax.set_xlabel("prediction steps")
    ax.set_ylabel("weighted RMSE")
    ax.set_title(title)
    return _finish(fig, path)
