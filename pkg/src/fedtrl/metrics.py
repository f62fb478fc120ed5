"""Point and probabilistic forecast metrics on denormalized values."""

from __future__ import annotations

import numpy as np

DECILES = tuple(np.round(np.arange(1, 10) / 10, 10))


class DegenerateSeriesError(ValueError):
    pass


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def crps_from_samples(samples, y) -> float:
    """Empirical CRPS ``E|X - y| - 0.5 E|X - X'|`` averaged over the horizon.

    ``samples`` has shape ``(m, horizon)``; the pair term runs over all ``m^2``
    ordered pairs and is evaluated in ``O(m log m)`` through the sorted-sample
    identity ``sum_ij |x_i - x_j| = 2 sum_i (2i - m + 1) x_(i)``.
    """
    X = np.asarray(samples, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
        y = y.reshape(1)
    m = X.shape[0]
    if m < 2:
        raise ValueError("CRPS needs at least 2 samples")
    if X.shape[1:] != y.shape:
        raise ValueError(f"samples {X.shape} do not match target {y.shape}")
    term1 = np.abs(X - y[None]).mean(axis=0)
    Xs = np.sort(X, axis=0)
    coef = (2 * np.arange(m) - m + 1)[:, None]
    term2 = 2.0 * (coef * Xs).sum(axis=0) / (m * m)
    return float(np.mean(term1 - 0.5 * term2))


def mase(y, yhat, insample, season: int = 1) -> float:
    y, yhat = _pair(y, yhat)
    insample = np.asarray(insample, dtype=np.float64)
    if season < 1 or len(insample) <= season:
        raise ValueError(f"in-sample length {len(insample)} must exceed season {season}")
    scale = np.mean(np.abs(insample[season:] - insample[:-season]))
    if scale == 0:
        raise DegenerateSeriesError("seasonal-naive in-sample error is zero")
    return float(np.mean(np.abs(y - yhat)) / scale)


def weighted_quantile_loss(samples, y, quantiles=DECILES) -> float:
    """``sum_q sum_t 2 (q - 1{y < yq}) (y - yq) / sum_t |y|``.

    ``yq`` are empirical sample quantiles (linear interpolation). Divide by the
    number of quantiles for the per-quantile average some benchmarks report.
    """
    X = np.asarray(samples, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    qs = np.asarray(quantiles, dtype=np.float64)
    if np.any(qs <= 0) or np.any(qs >= 1):
        raise ValueError("quantiles must lie strictly inside (0, 1)")
    denom = np.abs(y).sum()
    if denom == 0:
        raise DegenerateSeriesError("sum of |y| is zero")
    yq = np.quantile(X, qs, axis=0)  # (Q, horizon)
    indicator = (y[None] < yq).astype(np.float64)
    losses = 2.0 * ((qs[:, None] - indicator) * (y[None] - yq)).sum(axis=1) / denom
    return float(losses.sum())
