"""
Trajectory metrics.

All functions take numpy arrays with a leading item axis and a time axis at
position 1: ``[B, T, N, C]`` (any trailing shape is flattened per frame).
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

HIGH_CORRELATION = 0.8


@dataclass
class CorrelationCurve:
    curve: np.ndarray  # [T], NaN where undefined for every item
    per_item: np.ndarray  # [B, T]
    high_corr_step: int  # first step below the threshold, T if never
    threshold: float = HIGH_CORRELATION


def _check_shapes(pred: np.ndarray, true: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"Shape mismatch: pred {pred.shape} vs true {true.shape}")
    return pred, true


def relative_l2(pred: np.ndarray, true: np.ndarray) -> float:
    """Mean over items of ||pred - true|| / ||true||, each item flattened."""
    pred, true = _check_shapes(pred, true)
    pred = pred.reshape(pred.shape[0], -1)
    true = true.reshape(true.shape[0], -1)
    norms = np.linalg.norm(true, axis=1)
    valid = norms > 0
    if not valid.all():
        logger.warning("Excluding %d item(s) with zero-norm ground truth", int((~valid).sum()))
    if not valid.any():
        return float("nan")
    errors = np.linalg.norm(pred[valid] - true[valid], axis=1) / norms[valid]
    return float(errors.mean())


def horizon_mse(
    pred: np.ndarray, true: np.ndarray, split: str = "in", boundary: Optional[int] = None
) -> float:
    """MSE over frames [0, boundary) for the in-horizon split, [boundary, T) otherwise."""
    pred, true = _check_shapes(pred, true)
    n_time = pred.shape[1]
    boundary = n_time // 2 if boundary is None else boundary
    key = split.lower().replace("-t", "")
    if key == "in":
        frames = slice(0, boundary)
    elif key == "out":
        frames = slice(boundary, n_time)
    else:
        raise ValueError(f"split must be 'In-t' or 'Out-t', got {split!r}")
    diff = pred[:, frames] - true[:, frames]
    if diff.size == 0:
        return float("nan")
    return float(np.mean(diff**2))


def one_step_mse(pred_next: np.ndarray, true_next: np.ndarray) -> float:
    pred_next, true_next = _check_shapes(pred_next, true_next)
    return float(np.mean((pred_next - true_next) ** 2))


def correlation_over_time(
    pred: np.ndarray, true: np.ndarray, threshold: float = HIGH_CORRELATION
) -> CorrelationCurve:
    """Spatial Pearson correlation per step, averaged over items."""
    pred, true = _check_shapes(pred, true)
    n_items, n_time = pred.shape[:2]
    p = pred.reshape(n_items, n_time, -1)
    q = true.reshape(n_items, n_time, -1)
    p = p - p.mean(axis=-1, keepdims=True)
    q = q - q.mean(axis=-1, keepdims=True)
    denom = np.sqrt((p**2).sum(axis=-1) * (q**2).sum(axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        per_item = np.where(denom > 0, (p * q).sum(axis=-1) / denom, np.nan)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        curve = np.nanmean(per_item, axis=0)

    below = np.flatnonzero(curve < threshold)
    high_corr_step = int(below[0]) if below.size else n_time
    return CorrelationCurve(
        curve=curve, per_item=per_item, high_corr_step=high_corr_step, threshold=threshold
    )


def energy_spectrum(
    fields: np.ndarray, spatial_shape: Tuple[int, ...]
) -> Tuple[np.ndarray, np.ndarray]:
    """Power spectrum of fields on a full regular grid, averaged over leading axes.

    ``fields`` is ``[..., prod(spatial_shape)]``. For 2D grids the power is
    summed over shells of integer radius |k|.
    """
    fields = np.asarray(fields, dtype=np.float64)
    grid = fields.reshape(-1, *spatial_shape)
    if len(spatial_shape) == 1:
        power = np.abs(np.fft.rfft(grid, axis=-1)) ** 2 / spatial_shape[0] ** 2
        return np.arange(power.shape[-1]), power.mean(axis=0)

    n_x, n_y = spatial_shape
    power = np.abs(np.fft.fft2(grid)) ** 2 / (n_x * n_y) ** 2
    kx = np.fft.fftfreq(n_x, d=1.0 / n_x)[:, None]
    ky = np.fft.fftfreq(n_y, d=1.0 / n_y)[None, :]
    shells = np.rint(np.sqrt(kx**2 + ky**2)).astype(int)
    n_shells = min(n_x, n_y) // 2 + 1
    spectrum = np.zeros(n_shells)
    mean_power = power.mean(axis=0)
    for k in range(n_shells):
        spectrum[k] = mean_power[shells == k].sum()
    return np.arange(n_shells), spectrum
