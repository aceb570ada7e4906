"""Exponential covariance, Gaussian field draws, kriging and variograms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .grid import Grid, pairwise_distances


class NumericalError(RuntimeError):
    """A factorization or evaluation failed in a way retrying will not fix."""


@dataclass(frozen=True)
class CovarianceSpec:
    sigma2: float
    tau2: float
    phi: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.tau2 >= 0:
            raise ValueError(f"tau2 must be nonnegative, got {self.tau2}")
        if not self.phi > 0:
            raise ValueError(f"phi must be positive, got {self.phi}")


@dataclass
class KrigingMoments:
    mean: np.ndarray
    covariance: np.ndarray


def exp_correlation(h, phi):
    if not phi > 0:
        raise ValueError(f"phi must be positive, got {phi}")
    return np.exp(-np.asarray(h, dtype=float) / phi)


def build_correlation(dist: np.ndarray, phi: float) -> np.ndarray:
    return exp_correlation(dist, phi)


def cholesky_jittered(cov: np.ndarray, scale: float = 1.0, attempts: int = 3) -> np.ndarray:
    """Lower Cholesky factor, adding ``1e-8 * scale`` to the diagonal on failure.

    The jitter grows tenfold per retry; after ``attempts`` retries a
    :class:`NumericalError` is raised.
    """
    try:
        return linalg.cholesky(cov, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    eye = np.eye(cov.shape[0])
    jitter = 1e-8 * scale
    for _ in range(attempts):
        try:
            return linalg.cholesky(cov + jitter * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter *= 10
    raise NumericalError(f"Cholesky failed after {attempts} jitter escalations")


def sample_gaussian_field(grid: Grid, sigma2: float, phi: float, seed=None, size=None) -> np.ndarray:
    """Draw S ~ N(0, sigma2 * R) on the grid centroids.

    ``seed`` may be an int or a ``numpy.random.Generator``. With ``size`` set,
    returns an array of shape ``(size, M)``.
    """
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    rng = np.random.default_rng(seed)
    cov = sigma2 * build_correlation(pairwise_distances(grid), phi)
    chol = cholesky_jittered(cov, scale=sigma2)
    m = grid.cell_count
    z = rng.standard_normal((m,) if size is None else (size, m))
    return z @ chol.T


def kriging_moments(
    dist: np.ndarray,
    obs_cells,
    y,
    mu: float,
    spec: CovarianceSpec,
    target_cells,
    obs_weights=None,
) -> KrigingMoments:
    """Conditional moments of S at ``target_cells`` given noisy observations.

    Observation j is y_j = mu + S(obs_cells[j]) + noise with variance
    ``tau2 / obs_weights[j]``; a weight of n lets a cell mean over n points
    stand in for the individual values. Returned mean is on the zero-mean S
    scale (add ``mu`` for the response scale).
    """
    obs = np.asarray(obs_cells, dtype=int)
    tgt = np.asarray(target_cells, dtype=int)
    y = np.asarray(y, dtype=float)
    if obs.size == 0:
        raise ValueError("need at least one observation")
    if y.shape != obs.shape:
        raise ValueError(f"y has shape {y.shape}, obs_cells {obs.shape}")
    w = np.ones(obs.size) if obs_weights is None else np.asarray(obs_weights, dtype=float)

    c_nn = spec.sigma2 * build_correlation(dist[np.ix_(obs, obs)], spec.phi)
    c_nn[np.diag_indices_from(c_nn)] += spec.tau2 / w
    c_tn = spec.sigma2 * build_correlation(dist[np.ix_(tgt, obs)], spec.phi)
    c_tt = spec.sigma2 * build_correlation(dist[np.ix_(tgt, tgt)], spec.phi)
    try:
        factor = linalg.cho_factor(c_nn, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NumericalError("observation covariance is singular") from None
    mean = c_tn @ linalg.cho_solve(factor, y - mu, check_finite=False)
    cov = c_tt - c_tn @ linalg.cho_solve(factor, c_tn.T, check_finite=False)
    return KrigingMoments(mean=mean, covariance=0.5 * (cov + cov.T))


def theoretical_variogram(h, spec: CovarianceSpec):
    h = np.asarray(h, dtype=float)
    gamma = spec.tau2 + spec.sigma2 * (1.0 - np.exp(-h / spec.phi))
    return np.where(h > 0, gamma, 0.0)


def default_bin_edges(coords, nbins: int = 15) -> np.ndarray:
    coords = np.asarray(coords, dtype=float).reshape(len(coords), -1)
    dmax = np.max(pairwise_from_coords(coords))
    return np.linspace(0.0, dmax / 2, nbins + 1)


def pairwise_from_coords(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=float).reshape(len(coords), -1)
    return np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))


def empirical_variogram(coords, y, bin_edges=None):
    """Binned semivariances as rows ``(bin midpoint, semivariance, pair count)``.

    Bins are half-open ``[lo, hi)`` except the last, which includes its
    upper edge. Empty bins are left out.
    """
    coords = np.asarray(coords, dtype=float).reshape(len(coords), -1)
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise ValueError("need at least two points")
    if bin_edges is None:
        bin_edges = default_bin_edges(coords)
    edges = np.asarray(bin_edges, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")

    iu = np.triu_indices(len(y), 1)
    d = pairwise_from_coords(coords)[iu]
    sq = (y[:, None] - y[None, :])[iu] ** 2
    which = np.searchsorted(edges, d, side="right") - 1
    which[d == edges[-1]] = len(edges) - 2
    keep = (which >= 0) & (which < len(edges) - 1)
    counts = np.bincount(which[keep], minlength=len(edges) - 1)
    sums = np.bincount(which[keep], weights=sq[keep], minlength=len(edges) - 1)
    rows = []
    for b in np.flatnonzero(counts):
        rows.append((0.5 * (edges[b] + edges[b + 1]), sums[b] / (2 * counts[b]), int(counts[b])))
    return rows
