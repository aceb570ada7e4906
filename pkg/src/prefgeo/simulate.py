"""Synthetic data from the preferential sampling model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gp import NumericalError, sample_gaussian_field
from .grid import Grid, Region, build_grid


@dataclass(frozen=True)
class PreferentialParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("alpha and beta must be finite")


@dataclass(frozen=True)
class CasePreset:
    name: str
    bounds: tuple[tuple[float, float], ...]
    cells: tuple[int, ...]
    alpha: float
    beta: float
    mu: float
    sigma2: float
    phi: float
    tau2: float
    reported_n: int

    @property
    def params(self) -> dict:
        return dict(alpha=self.alpha, beta=self.beta, mu=self.mu,
                    sigma2=self.sigma2, phi=self.phi, tau2=self.tau2)

    def grid(self) -> Grid:
        return build_grid(Region(self.bounds), self.cells)


PRESETS = {
    "I": CasePreset("I", ((0, 100),), (100,), -3.0, 2.0, 12.0, 2.0, 20.0, 0.1, 18),
    "II": CasePreset("II", ((0, 100),), (200,), -3.5, 3.0, 12.0, 1.0, 20.0, 0.01, 123),
    "III": CasePreset("III", ((0, 200),), (200,), -1.5, 0.5, 12.0, 1.0, 20.0, 0.01, 56),
    "IV": CasePreset("IV", ((0, 100), (0, 100)), (15, 15), -8.0, 2.0, 12.0, 2.0, 20.0, 0.1, 12),
    "V": CasePreset("V", ((0, 100), (0, 100)), (20, 20), -8.0, 2.0, 12.0, 2.0, 20.0, 0.1, 12),
}


@dataclass(eq=False)
class Dataset:
    """Cell counts and per-cell response totals on a grid.

    ``truth_S`` and ``params`` are only known for simulated data. ``y_sumsq``
    is the per-cell sum of squared responses, needed by the nugget update when
    a cell holds several points. ``extra`` holds unrecognised CSV columns so
    files round-trip unchanged.
    """

    grid: Grid
    counts: np.ndarray
    y_sum: np.ndarray
    truth_S: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    seed: int | None = None
    extra: dict = field(default_factory=dict)
    y_sumsq: np.ndarray | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.y_sum = np.asarray(self.y_sum, dtype=float)
        if self.y_sumsq is None:
            # no within-cell spread known: exact when every cell holds <= 1 point
            with np.errstate(invalid="ignore", divide="ignore"):
                self.y_sumsq = np.where(self.counts > 0, self.y_sum ** 2 / np.maximum(self.counts, 1), 0.0)
        self.y_sumsq = np.asarray(self.y_sumsq, dtype=float)
        m = self.grid.cell_count
        if self.counts.shape != (m,) or self.y_sum.shape != (m,):
            raise ValueError(f"counts/y_sum must have length {m}")
        if np.any(self.counts < 0):
            raise ValueError("negative counts")
        if np.any(self.y_sum[self.counts == 0] != 0):
            raise ValueError("y_sum must be 0 in empty cells")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def occupied(self) -> np.ndarray:
        return np.flatnonzero(self.counts)

    @property
    def y_mean(self) -> np.ndarray:
        """Mean response in each occupied cell, ordered as :attr:`occupied`."""
        occ = self.occupied
        return self.y_sum[occ] / self.counts[occ]


def simulate_cox_counts(S, pref: PreferentialParams, grid: Grid, seed=None) -> np.ndarray:
    """Poisson counts with mean Delta_i * exp(alpha + beta * S_i) per cell."""
    S = np.asarray(S, dtype=float)
    if S.shape != (grid.cell_count,):
        raise ValueError("S does not match the grid")
    eta = pref.alpha + pref.beta * S
    bad = np.flatnonzero(eta > 700)
    if bad.size:
        raise NumericalError(f"intensity overflow at cell {bad[0]}")
    rng = np.random.default_rng(seed)
    return rng.poisson(grid.volumes * np.exp(eta))


def simulate_observations(S, counts, mu: float, tau2: float, seed=None, return_sumsq=False):
    """Sum over each cell's points of independent N(mu + S_i, tau2) responses.

    With ``return_sumsq`` the per-cell sum of squared responses is returned too.
    """
    if tau2 < 0:
        raise ValueError(f"tau2 must be nonnegative, got {tau2}")
    S = np.asarray(S, dtype=float)
    counts = np.asarray(counts, dtype=np.int64)
    if S.shape != counts.shape:
        raise ValueError("S and counts differ in length")
    rng = np.random.default_rng(seed)
    cell = np.repeat(np.arange(S.size), counts)
    y = mu + S[cell] + np.sqrt(tau2) * rng.standard_normal(cell.size)
    y_sum = np.bincount(cell, weights=y, minlength=S.size)
    if return_sumsq:
        return y_sum, np.bincount(cell, weights=y * y, minlength=S.size)
    return y_sum


def simulate_dataset(grid: Grid, alpha, beta, mu, sigma2, phi, tau2, seed=None) -> Dataset:
    """Field, then point counts given the field, then responses."""
    ss = np.random.SeedSequence(seed)
    field_seed, count_seed, obs_seed = ss.spawn(3)
    S = sample_gaussian_field(grid, sigma2, phi, np.random.default_rng(field_seed))
    counts = simulate_cox_counts(S, PreferentialParams(alpha, beta), grid, np.random.default_rng(count_seed))
    y_sum, y_sumsq = simulate_observations(S, counts, mu, tau2, np.random.default_rng(obs_seed),
                                           return_sumsq=True)
    params = dict(alpha=alpha, beta=beta, mu=mu, sigma2=sigma2, phi=phi, tau2=tau2)
    return Dataset(grid, counts, y_sum, truth_S=S, params=params, seed=seed, y_sumsq=y_sumsq)


def simulate_case(preset: str, seed=None, **overrides) -> Dataset:
    """Simulate one of the presets I-V; keyword overrides replace parameters."""
    case = PRESETS[preset]
    params = {**case.params, **overrides}
    ds = simulate_dataset(case.grid(), seed=seed, **params)
    ds.params["preset"] = preset
    return ds
