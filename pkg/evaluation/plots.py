"""
Static figures for the analysis commands (PNG, non-interactive backend).
"""

from pathlib import Path
from typing import Dict, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

DPI = 150


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_loss_curves(history: pd.DataFrame, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for column in history.columns:
        if column in ("epoch", "lr"):
            continue
        series = history[column].dropna()
        if len(series):
            ax.plot(history.loc[series.index, "epoch"], series, label=column)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_correlation(
    curves: Dict[str, np.ndarray], path: str | Path, threshold: float = 0.8
) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, curve in curves.items():
        ax.plot(np.arange(len(curve)), curve, label=label)
    ax.axhline(threshold, color="k", linestyle="--", linewidth=0.8)
    ax.set_xlabel("rollout step")
    ax.set_ylabel("correlation")
    ax.set_ylim(-0.1, 1.05)
    ax.legend()
    return _save(fig, path)


def plot_field(
    coords: np.ndarray,
    values: np.ndarray,
    path: str | Path,
    title: str = "",
    reference: Optional[np.ndarray] = None,
) -> Path:
    """Line plot for 1D coordinates, scatter heatmap for 2D point clouds."""
    coords = np.asarray(coords)
    values = np.asarray(values).reshape(len(coords), -1)[:, 0]
    if coords.shape[1] == 1:
        order = np.argsort(coords[:, 0])
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(coords[order, 0], values[order], label="prediction")
        if reference is not None:
            ref = np.asarray(reference).reshape(len(coords), -1)[:, 0]
            ax.plot(coords[order, 0], ref[order], "--", label="reference")
            ax.legend()
        ax.set_xlabel("x")
    else:
        panels = 1 if reference is None else 2
        fig, axes = plt.subplots(1, panels, figsize=(4 * panels, 4), squeeze=False)
        fields = [values] if reference is None else [values, np.asarray(reference).reshape(-1)]
        vmin = min(f.min() for f in fields)
        vmax = max(f.max() for f in fields)
        for ax, field, name in zip(axes[0], fields, ["prediction", "reference"]):
            im = ax.scatter(
                coords[:, 0], coords[:, 1], c=field, s=6, cmap="RdBu_r", vmin=vmin, vmax=vmax
            )
            ax.set_aspect("equal")
            ax.set_title(name)
        fig.colorbar(im, ax=axes[0].tolist())
    fig.suptitle(title)
    return _save(fig, path)


def plot_uncertainty(
    x: np.ndarray,
    mean: np.ndarray,
    std: np.ndarray,
    path: str | Path,
    truth: Optional[np.ndarray] = None,
    title: str = "",
) -> Path:
    """Ensemble mean with a +/- 3 std band along a 1D domain."""
    x = np.asarray(x).reshape(-1)
    order = np.argsort(x)
    mean, std = np.asarray(mean).reshape(-1)[order], np.asarray(std).reshape(-1)[order]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.fill_between(x[order], mean - 3 * std, mean + 3 * std, alpha=0.3, label="mean ± 3 std")
    ax.plot(x[order], mean, label="mean")
    if truth is not None:
        ax.plot(x[order], np.asarray(truth).reshape(-1)[order], "k--", label="reference")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_attention(coords: np.ndarray, maps: np.ndarray, path: str | Path, title: str = "") -> Path:
    """One panel per token map over the point set."""
    coords = np.asarray(coords)
    maps = np.atleast_2d(maps)
    n = len(maps)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3), squeeze=False)
    for j, ax in enumerate(axes[0]):
        if coords.shape[1] == 1:
            order = np.argsort(coords[:, 0])
            ax.plot(coords[order, 0], maps[j, order])
        else:
            ax.scatter(coords[:, 0], coords[:, 1], c=maps[j], s=6, cmap="viridis")
            ax.set_aspect("equal")
        ax.set_title(f"token {j}")
    fig.suptitle(title)
    return _save(fig, path)


def plot_latent_series(frame: pd.DataFrame, path: str | Path, column: str = "mu") -> Path:
    """Per-channel time series of one latent statistic, one line per token."""
    channels = sorted(frame["channel"].unique())
    fig, axes = plt.subplots(
        len(channels), 1, figsize=(6, 1.6 * len(channels)), sharex=True, squeeze=False
    )
    for ax, channel in zip(axes[:, 0], channels):
        sub = frame[frame["channel"] == channel].pivot(index="t", columns="token", values=column)
        ax.plot(sub.index, sub.values, linewidth=0.6)
        ax.set_ylabel(f"c{channel}")
    axes[-1, 0].set_xlabel("t")
    fig.suptitle(f"{column} over time")
    return _save(fig, path)


def plot_spectrum(spectra: Dict[str, tuple], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (k, energy) in spectra.items():
        ax.loglog(k[1:], energy[1:], label=label)
    ax.set_xlabel("|k|")
    ax.set_ylabel("energy")
    ax.legend()
    return _save(fig, path)
