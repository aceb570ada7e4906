"""Prediction surfaces and prediction-error summaries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid
from .inference import Chain


@dataclass
class PredictionSurface:
    grid: Grid
    point_estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    statistic: str = "median"
    scale: str = "field"


def prediction_surface(chain: Chain, grid: Grid, statistic: str = "median",
                       scale: str = "field") -> PredictionSurface:
    """Pointwise summary of posterior field draws.

    ``scale="field"`` summarises S; ``scale="response"`` summarises mu + S.
    Bounds are the 2.5% and 97.5% quantiles; the median always lies between
    them, the mean usually does.
    """
    S = chain.S
    if scale == "response":
        S = S + chain.params["mu"][:, None]
    elif scale != "field":
        raise ValueError(f"unknown scale {scale!r}")
    lo, med, hi = np.quantile(S, [0.025, 0.5, 0.975], axis=0)
    if statistic == "median":
        est = med
    elif statistic == "mean":
        est = S.mean(axis=0)
    else:
        raise ValueError(f"unknown statistic {statistic!r}")
    return PredictionSurface(grid, est, lo, hi, statistic, scale)


def local_prediction_error(s_hat, s_true) -> np.ndarray:
    s_hat = np.asarray(s_hat, dtype=float)
    s_true = np.asarray(s_true, dtype=float)
    if s_hat.shape != s_true.shape:
        raise ValueError(f"length mismatch: {s_hat.shape} vs {s_true.shape}")
    return (s_hat - s_true) ** 2


def global_prediction_error(s_hat, s_true, grid: Grid) -> float:
    """Volume-weighted average of the local squared errors over the grid."""
    lpe = local_prediction_error(s_hat, s_true)
    if lpe.size != grid.cell_count:
        raise ValueError("surface does not match grid")
    w = grid.volumes
    return float(np.sum(w * lpe) / np.sum(w))
