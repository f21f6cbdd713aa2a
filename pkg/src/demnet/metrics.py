"""Reconstruction objective and evaluation metrics (all in metres)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _check_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    if gt.size == 0:
        raise ValueError("cannot compute an error over an empty tensor")
    return pred, gt


def rmse(pred, gt) -> float:
    """Pixel-wise root mean squared error over every element."""
    pred, gt = _check_pair(pred, gt)
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def mse(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    return float(np.mean(diff * diff))


def mse_grad(pred, gt) -> np.ndarray:
    """Gradient of ``mse`` w.r.t. ``pred``: ``2 (pred - gt) / T``."""
    pred, gt = _check_pair(pred, gt)
    return (2.0 / pred.size) * (pred - gt)


def per_image_rmse(preds, gts) -> np.ndarray:
    """RMSE of each image in a batch ``(N, ...)``."""
    preds, gts = _check_pair(preds, gts)
    diff = preds.astype(np.float64) - gts.astype(np.float64)
    return np.sqrt(np.mean(diff.reshape(len(diff), -1) ** 2, axis=1))


def per_image_mean_baseline(gts) -> np.ndarray:
    """Per-image RMSE of predicting every image by its own mean elevation.

    This equals the population standard deviation of each image.
    """
    gts = np.asarray(gts, dtype=np.float64)
    flat = gts.reshape(len(gts), -1)
    return np.sqrt(np.mean((flat - flat.mean(axis=1, keepdims=True)) ** 2, axis=1))


@dataclass
class EvalReport:
    per_image_rmse: np.ndarray
    mean_rmse: float
    bin_edges: np.ndarray
    bin_mean_abs_error: np.ndarray  # NaN where a bin is empty
    bin_counts: np.ndarray
    ids: list[int] | None = None


def binned_error(preds, gts, n_bins: int = 100) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean absolute error conditioned on ground-truth elevation.

    Bins split [min(gt), max(gt)] uniformly; a pixel with value g falls in
    bin i when edges[i] <= g < edges[i+1], and the last bin also takes
    g == max. When every ground-truth pixel has the same elevation a single
    bin is returned. Returns ``(edges, mean_abs_error, counts)``.
    """
    preds, gts = _check_pair(preds, gts)
    g = gts.astype(np.float64).ravel()
    err = np.abs(preds.astype(np.float64).ravel() - g)
    if not np.all(np.isfinite(g)):
        raise ValueError("ground truth contains non-finite elevations")
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.array([lo, hi]), np.array([err.mean()]), np.array([g.size])
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, g, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=err, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mae = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return edges, mae, counts


def evaluate_predictions(preds, gts, n_bins: int = 100, ids=None) -> EvalReport:
    per_img = per_image_rmse(preds, gts)
    edges, mae, counts = binned_error(preds, gts, n_bins)
    return EvalReport(per_img, float(per_img.mean()), edges, mae, counts, None if ids is None else list(ids))


def range_profile(dem, range_index: int) -> np.ndarray:
    """Elevations along azimuth (axis 1) at a fixed range row (axis 0)."""
    dem = np.asarray(dem)
    if dem.ndim == 3:
        dem = dem[..., 0]
    if dem.ndim != 2:
        raise ValueError(f"expected a (H, W) or (H, W, 1) DEM, got {dem.shape}")
    if not 0 <= range_index < dem.shape[0]:
        raise IndexError(f"range index {range_index} outside [0, {dem.shape[0]})")
    return dem[range_index].astype(np.float64)


def write_report_csv(report: EvalReport, out_dir) -> tuple[Path, Path]:
    """Write ``eval_images.csv`` (sample_id, rmse_m) and ``eval_bins.csv``
    (bin, lower_m, upper_m, count, mean_abs_error_m)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = out_dir / "eval_images.csv"
    bins = out_dir / "eval_bins.csv"
    ids = report.ids if report.ids is not None else range(len(report.per_image_rmse))
    with open(images, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "rmse_m"])
        for sid, v in zip(ids, report.per_image_rmse):
            w.writerow([sid, repr(float(v))])
    with open(bins, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "lower_m", "upper_m", "count", "mean_abs_error_m"])
        for i, (c, e) in enumerate(zip(report.bin_counts, report.bin_mean_abs_error)):
            w.writerow([i, repr(float(report.bin_edges[i])), repr(float(report.bin_edges[i + 1])), int(c),
                        "" if np.isnan(e) else repr(float(e))])
    return images, bins
