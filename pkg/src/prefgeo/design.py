"""Expected-utility design search over grid cells.

The design sampler treats the new locations d as a parameter of an augmented
model whose d-marginal is proportional to the expected utility U(d), so the
mode of its draws is the optimal design.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg

from .gp import CovarianceSpec, NumericalError, build_correlation, kriging_moments
from .grid import Grid, pairwise_distances
from .inference import Chain, ChainState
from .simulate import Dataset

log = logging.getLogger(__name__)

UTILITIES = ("variance_reduction", "exceedance")


@dataclass(frozen=True)
class UtilitySpec:
    kind: str = "variance_reduction"
    m: int = 1
    threshold: float | None = None
    center_on_mu: bool = True
    aux_cells: tuple[int, ...] | None = None
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in UTILITIES:
            raise ValueError(f"kind must be one of {UTILITIES}, got {self.kind!r}")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.kind == "exceedance" and (self.threshold is None or not math.isfinite(self.threshold)):
            raise ValueError("exceedance utility needs a finite threshold")
        if self.power != 1.0:
            # annealing-style sharpening is not supported yet
            raise NotImplementedError("only power=1 is supported")


@dataclass
class ApproxMoments:
    theta_vec: np.ndarray
    sigma_mat: np.ndarray
    a_block: np.ndarray


@dataclass(frozen=True)
class DesignConfig:
    steps: int = 20_000
    burn_in: int = 1_000
    thin: int = 1
    global_jump: float = 0.1
    max_draws: int | None = 1_000
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.thin <= 0 or not 0 <= self.burn_in < self.steps:
            raise ValueError("need steps > 0, thin > 0 and 0 <= burn_in < steps")
        if not 0 < self.global_jump <= 1:
            raise ValueError("global_jump must be in (0, 1]")


@dataclass
class DesignSample:
    draws: np.ndarray
    weights: np.ndarray | None = None
    acceptance_rate: float = float("nan")


@dataclass
class OptimalDesign:
    design: tuple[int, ...]
    frequency: float
    tie: bool
    tuples: list = field(default_factory=list)
    cell_histogram: np.ndarray | None = None


# -- Gaussian approximation of [S | theta, y, x] -----------------------------------

def gaussian_approx_moments(state: ChainState, data: Dataset, dist: np.ndarray | None = None) -> ApproxMoments:
    """Gaussian approximation to S | theta, y, x from a second-order expansion
    of the point-process intensity around S = 0.

    The precision is assembled from blocks over occupied cells (n) and empty
    cells (N) using the Schur complement A of the prior covariance. Outputs
    are ordered by grid cell.
    """
    if dist is None:
        dist = pairwise_distances(data.grid)
    alpha, beta = state.alpha, state.beta
    if not (math.isfinite(alpha) and math.isfinite(beta)):
        raise ValueError("alpha and beta must be finite")
    counts = data.counts.astype(float)
    vol = data.grid.volumes
    obs = data.occupied
    emp = np.flatnonzero(data.counts == 0)
    R = build_correlation(dist, state.phi)
    s2 = state.sigma2
    curv = vol * beta ** 2 * math.exp(alpha)
    lin_pp = beta * counts - vol * beta * math.exp(alpha)

    if obs.size == 0 or emp.size == 0:
        # one block only: the precision is just prior plus diagonal terms
        prec = linalg.inv(s2 * R)
        prec[np.diag_indices_from(prec)] += curv + counts / state.tau2
        a_block = s2 * R if obs.size == 0 else np.zeros((0, 0))
        b = (data.y_sum - state.mu * counts) / state.tau2 + lin_pp
        cov = _inv_spd(prec)
        return ApproxMoments(cov @ b, cov, a_block)

    Rn = R[np.ix_(obs, obs)]
    RnN = R[np.ix_(obs, emp)]
    RN = R[np.ix_(emp, emp)]
    try:
        fn = linalg.cho_factor(Rn, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NumericalError("R_n is singular") from None
    Rn_inv = linalg.cho_solve(fn, np.eye(obs.size), check_finite=False)
    G = Rn_inv @ RnN
    A = s2 * (RN - RnN.T @ G)
    A = 0.5 * (A + A.T)
    try:
        A_inv = _inv_spd(A)
    except NumericalError:
        raise NumericalError("A block is singular") from None

    top = np.diag(counts[obs] / state.tau2 + curv[obs]) + G @ A_inv @ G.T + Rn_inv / s2
    off = -G @ A_inv
    bottom = np.diag(curv[emp]) + A_inv
    prec_blocks = np.block([[top, off], [off.T, bottom]])
    cov_blocks = _inv_spd(0.5 * (prec_blocks + prec_blocks.T))

    b_obs = (data.y_sum[obs] - state.mu * counts[obs]) / state.tau2 + lin_pp[obs]
    b_emp = lin_pp[emp]
    mean_blocks = cov_blocks @ np.concatenate([b_obs, b_emp])

    order = np.concatenate([obs, emp])
    cov = np.empty_like(cov_blocks)
    cov[np.ix_(order, order)] = cov_blocks
    mean = np.empty(order.size)
    mean[order] = mean_blocks
    return ApproxMoments(mean, cov, A)


def _inv_spd(mat: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(mat, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NumericalError("matrix not positive definite") from None
    inv = linalg.cho_solve(c, np.eye(mat.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T)


def standard_conditional_moments(state: ChainState, data: Dataset, dist: np.ndarray):
    """Mean and covariance of S over all cells given y (no point-process term)."""
    spec = CovarianceSpec(state.sigma2, state.tau2, state.phi)
    km = kriging_moments(dist, data.occupied, data.y_mean, state.mu, spec,
                         np.arange(data.grid.cell_count), obs_weights=data.counts[data.occupied])
    return km.mean, km.covariance


def conditional_covariance(state: ChainState, data: Dataset, dist: np.ndarray, model: str) -> np.ndarray:
    if model == "standard":
        return standard_conditional_moments(state, data, dist)[1]
    if model == "preferential":
        return gaussian_approx_moments(state, data, dist).sigma_mat
    raise ValueError(f"unknown model {model!r}")


# -- utilities --------------------------------------------------------------------

def _aux(cells, m: int) -> np.ndarray:
    return np.arange(m) if cells is None else np.asarray(cells, dtype=int)


def variance_reduction(cov: np.ndarray, d, tau2: float, aux_cells=None) -> float:
    """Mean drop in conditional variance over ``aux_cells`` after observing
    one extra noisy point at each cell of ``d``; clamped at zero."""
    d = np.asarray(d, dtype=int)
    aux = _aux(aux_cells, cov.shape[0])
    K = cov[np.ix_(d, d)] + tau2 * np.eye(d.size)
    C = cov[np.ix_(aux, d)]
    scale = max(float(np.max(np.abs(np.diag(cov)))), 1e-300)
    # a noiseless repeat of an already pinned cell makes K singular; pinv drops it
    K_inv = np.linalg.pinv(K, rcond=1e-10, hermitian=True) if np.min(np.linalg.eigvalsh(K)) <= 1e-12 * scale \
        else linalg.inv(K)
    drop = np.einsum("ij,jk,ik->i", C, K_inv, C)
    return max(float(drop.mean()), 0.0)


def variance_reduction_single(cov: np.ndarray, tau2: float, aux_cells=None) -> np.ndarray:
    """:func:`variance_reduction` for every single-cell design at once."""
    aux = _aux(aux_cells, cov.shape[0])
    denom = np.diag(cov) + tau2
    scale = max(float(np.max(np.abs(np.diag(cov)))), 1e-300)
    num = (cov[aux, :] ** 2).mean(axis=0)
    out = np.where(denom > 1e-12 * scale, num / np.where(denom > 0, denom, 1.0), 0.0)
    return np.maximum(out, 0.0)


def variance_reduction_pairs(cov: np.ndarray, tau2: float, aux_cells=None) -> np.ndarray:
    """:func:`variance_reduction` for every two-cell design, as an (M, M) array.

    Uses the closed-form inverse of the 2x2 matrix K; entries where K is
    (numerically) singular fall back to the exact routine.
    """
    aux = _aux(aux_cells, cov.shape[0])
    C = cov[aux, :]
    G = C.T @ C / aux.size
    v = np.diag(cov) + tau2
    det = np.outer(v, v) - cov ** 2
    g = np.diag(G)
    num = g[:, None] * v[None, :] - 2.0 * G * cov + g[None, :] * v[:, None]
    scale = max(float(np.max(np.abs(np.diag(cov)))), 1e-300)
    ok = det > 1e-10 * scale * scale
    out = np.where(ok, num / np.where(ok, det, 1.0), 0.0)
    for a, b in zip(*np.nonzero(~ok)):
        out[a, b] = variance_reduction(cov, (a, b), tau2, aux_cells)
    return np.maximum(out, 0.0)


def utility_variance_reduction(d, state: ChainState, data: Dataset, model: str,
                               dist: np.ndarray | None = None, aux_cells=None) -> float:
    if dist is None:
        dist = pairwise_distances(data.grid)
    cov = conditional_covariance(state, data, dist, model)
    return variance_reduction(cov, d, state.tau2, aux_cells)


def exceedance_indicator(d, S_draws, mu_draws, spec: UtilitySpec) -> np.ndarray:
    """Per-draw utility: fraction of the cells in ``d`` where the event occurs."""
    d = np.asarray(d, dtype=int)
    S = np.atleast_2d(np.asarray(S_draws, dtype=float))[:, d]
    if spec.center_on_mu:
        mu = np.asarray(mu_draws, dtype=float).reshape(-1, 1)
        hit = (mu + S) > spec.threshold
    else:
        hit = np.abs(S) > spec.threshold
    return hit.mean(axis=1)


def utility_exceedance(d, S_draws, mu_draws, spec: UtilitySpec) -> float:
    """Monte Carlo probability of exceeding the threshold at the cells of ``d``."""
    if len(S_draws) == 0:
        raise ValueError("no draws")
    return float(exceedance_indicator(d, S_draws, mu_draws, spec).mean())


class DrawUtility:
    """u(d, draw) for a fitted chain, with caching.

    For single-point variance-reduction designs the full table over cells is
    computed once per retained draw.
    """

    def __init__(self, chain: Chain, spec: UtilitySpec, data: Dataset, max_draws: int | None = None):
        self.chain = chain
        self.spec = spec
        self.data = data
        self.dist = pairwise_distances(data.grid)
        L = len(chain)
        if max_draws is not None and L > max_draws:
            self.index = np.unique(np.linspace(0, L - 1, max_draws).round().astype(int))
        else:
            self.index = np.arange(L)
        self._table = None
        # keep every draw's covariance when it fits in roughly 200 MB
        m = data.grid.cell_count
        size = max(16, min(self.index.size, int(2e8 // (8 * m * m))))
        self._cov = lru_cache(maxsize=size)(self._cov_uncached)

    @property
    def n_draws(self) -> int:
        return self.index.size

    @property
    def n_cells(self) -> int:
        return self.data.grid.cell_count

    def _cov_uncached(self, k: int) -> np.ndarray:
        state = self.chain.state(int(self.index[k]))
        return conditional_covariance(state, self.data, self.dist, self.chain.model)

    def table(self) -> np.ndarray:
        """Array ``(n_draws, M)`` of single-cell utilities."""
        if self._table is None:
            if self.spec.kind == "exceedance":
                S = self.chain.S[self.index]
                mu = self.chain.params["mu"][self.index]
                if self.spec.center_on_mu:
                    self._table = ((mu[:, None] + S) > self.spec.threshold).astype(float)
                else:
                    self._table = (np.abs(S) > self.spec.threshold).astype(float)
            else:
                tau2 = self.chain.params["tau2"][self.index]
                self._table = np.stack([
                    variance_reduction_single(self._cov(k), tau2[k], self.spec.aux_cells)
                    for k in range(self.n_draws)
                ])
        return self._table

    def __call__(self, d, k: int) -> float:
        d = tuple(int(c) for c in d)
        if len(d) == 1 or self.spec.kind == "exceedance":
            return float(self.table()[k, list(d)].mean())
        tau2 = float(self.chain.params["tau2"][self.index[k]])
        return variance_reduction(self._cov(k), d, tau2, self.spec.aux_cells)

    def expected(self, d, draws=None) -> float:
        ks = range(self.n_draws) if draws is None else draws
        d = tuple(int(c) for c in d)
        if len(d) == 1 or self.spec.kind == "exceedance":
            vals = self.table()[list(ks)][:, list(d)].mean(axis=1)
        else:
            vals = [self(d, k) for k in ks]
        # fsum makes the average independent of draw order
        return math.fsum(vals) / len(vals)


def expected_utility(d, chain: Chain, spec: UtilitySpec, data: Dataset, max_draws: int | None = None) -> float:
    """Posterior average of the utility of design ``d``."""
    if len(chain) == 0:
        raise ValueError("empty chain")
    return DrawUtility(chain, spec, data, max_draws).expected(d)


# -- augmented-model sampler ------------------------------------------------------

def _proposal_prob(grid: Grid, src: int, dst: int, eps: float) -> float:
    nb = grid.neighbours(src)
    p = eps / grid.cell_count
    if not nb:
        return 1.0 / grid.cell_count
    if dst in nb:
        p += (1.0 - eps) / len(nb)
    return p


def _propose_cell(grid: Grid, src: int, eps: float, rng) -> int:
    nb = grid.neighbours(src)
    if not nb or rng.uniform() < eps:
        return int(rng.integers(grid.cell_count))
    return nb[int(rng.integers(len(nb)))]


def run_design_chain(utility, n_draws: int, grid: Grid, m: int, config: DesignConfig | None = None,
                     start=None) -> DesignSample:
    """Metropolis sampler on (d, draw index) whose d-marginal is proportional to U(d).

    ``utility(d, k)`` returns the nonnegative utility of design tuple ``d``
    under posterior draw ``k``. Each step moves one component of d to a
    neighbouring cell (or, with probability ``global_jump``, to any cell) and
    redraws k uniformly; the pair is accepted with probability
    min(1, u(d', k') q(d | d') / (u(d, k) q(d' | d))).
    """
    config = config or DesignConfig()
    rng = np.random.default_rng(config.seed)
    M = grid.cell_count
    d = list(rng.integers(M, size=m)) if start is None else [int(c) for c in start]
    k = int(rng.integers(n_draws))
    u = float(utility(tuple(d), k))
    eps = config.global_jump
    zero_run = 0 if u > 0 else 1
    kept = []
    accepted = 0
    for step in range(config.steps):
        c = int(rng.integers(m))
        prop = list(d)
        prop[c] = _propose_cell(grid, d[c], eps, rng)
        k_prop = int(rng.integers(n_draws))
        u_prop = float(utility(tuple(prop), k_prop))
        if u_prop < 0:
            raise ValueError("utility must be nonnegative")
        if u <= 0:
            accept = True
        elif u_prop <= 0:
            accept = False
        else:
            ratio = (u_prop * _proposal_prob(grid, prop[c], d[c], eps)
                     / (u * _proposal_prob(grid, d[c], prop[c], eps)))
            accept = rng.uniform() < ratio
        if accept:
            d, k, u = prop, k_prop, u_prop
            accepted += step >= config.burn_in
        zero_run = zero_run + 1 if u <= 0 else 0
        if zero_run >= 1000:
            raise NumericalError("utility was zero for 1000 consecutive design steps")
        if step >= config.burn_in and (step - config.burn_in) % config.thin == 0:
            kept.append(tuple(d))
    rate = accepted / max(config.steps - config.burn_in, 1)
    return DesignSample(draws=np.array(kept, dtype=np.int64).reshape(-1, m), acceptance_rate=rate)


def design_from_chain(chain: Chain, spec: UtilitySpec, data: Dataset,
                      config: DesignConfig | None = None) -> tuple[DesignSample, DrawUtility]:
    config = config or DesignConfig()
    util = DrawUtility(chain, spec, data, config.max_draws)
    sample = run_design_chain(util, util.n_draws, data.grid, spec.m, config)
    return sample, util


def select_optimal(sample: DesignSample, grid: Grid) -> OptimalDesign:
    """Most visited design tuple; ties go to the lexicographically lowest tuple."""
    if len(sample.draws) == 0:
        raise ValueError("empty design sample")
    counts = Counter(tuple(int(c) for c in row) for row in sample.draws)
    total = len(sample.draws)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    best, top = ranked[0]
    tie = len(ranked) > 1 and ranked[1][1] == top
    cells = np.bincount(sample.draws.ravel(), minlength=grid.cell_count) / sample.draws.size
    return OptimalDesign(
        design=best,
        frequency=top / total,
        tie=tie,
        tuples=[(t, c / total) for t, c in ranked],
        cell_histogram=cells,
    )
