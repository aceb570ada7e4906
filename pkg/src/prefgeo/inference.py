"""Metropolis-within-Gibbs samplers for the standard and preferential models.

Both models share the conjugate updates for mu, 1/tau2 and 1/sigma2 and the
log-normal random-walk update for phi. The standard model draws S from its
Gaussian full conditional; the preferential model moves S as a whole vector
with a symmetric Gaussian random walk and adds random-walk updates for the
intensity parameters alpha and beta.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import linalg

from .gp import NumericalError, build_correlation
from .grid import pairwise_distances
from .simulate import Dataset

log = logging.getLogger(__name__)

MODELS = ("standard", "preferential")
SCALARS = ("mu", "tau2", "sigma2", "phi")
PREF_SCALARS = ("alpha", "beta")


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters. Gamma distributions are shape-rate (mean shape/rate)."""

    mu_var: float = 1e3
    tau_shape: float = 2.0
    tau_rate: float = 0.5
    sigma_shape: float = 2.0
    sigma_rate: float = 0.5
    phi_shape: float = 2.0
    phi_rate: float = 0.05
    alpha_var: float = 1e3
    beta_var: float = 1e3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class ChainConfig:
    iterations: int = 20_000
    burn_in: int = 5_000
    thin: int = 5
    delta_phi: float = 0.1
    step_S: float | None = None
    step_alpha: float = 0.1
    step_beta: float = 0.1
    S_moves: int = 4
    tune: bool = True
    standard_warmup: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin <= 0:
            raise ValueError("thin must be positive")
        if self.S_moves <= 0:
            raise ValueError("S_moves must be positive")
        if not 0 <= self.standard_warmup <= 1:
            raise ValueError("standard_warmup must be in [0, 1]")
        for name in ("delta_phi", "step_alpha", "step_beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.step_S is not None and not self.step_S > 0:
            raise ValueError("step_S must be positive")

    @property
    def kept(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class ChainState:
    mu: float
    tau2: float
    sigma2: float
    phi: float
    S: np.ndarray
    alpha: float = 0.0
    beta: float = 0.0
    chol: np.ndarray | None = field(default=None, repr=False)
    logdet: float = 0.0
    quad: float = 0.0
    _rinv: tuple | None = field(default=None, repr=False)
    _rinv1: tuple | None = field(default=None, repr=False)

    def inverse_row_sum(self) -> np.ndarray:
        """R(phi)^-1 1, cached until phi changes."""
        if self._rinv1 is None or self._rinv1[0] != self.phi:
            ones = np.ones(self.S.size)
            self._rinv1 = (self.phi, linalg.cho_solve((self.chol, True), ones, check_finite=False))
        return self._rinv1[1]

    def correlation_inverse(self) -> np.ndarray:
        """R(phi)^-1, cached until phi changes."""
        if self._rinv is None or self._rinv[0] != self.phi:
            m = self.S.size
            self._rinv = (self.phi, linalg.cho_solve((self.chol, True), np.eye(m), check_finite=False))
        return self._rinv[1]

    def refresh(self, dist: np.ndarray) -> "ChainState":
        """Recompute the cached factor of R(phi), log|R| and S'R^-1 S."""
        self.chol = correlation_cholesky(dist, self.phi)
        self.logdet = 2.0 * float(np.log(np.diag(self.chol)).sum())
        self.quad = quad_form(self.chol, self.S)
        return self

    def copy(self) -> "ChainState":
        return replace(self, S=self.S.copy())


@dataclass
class Chain:
    model: str
    params: dict
    S: np.ndarray
    acceptance_rates: dict
    numerical_rejects: dict
    config: ChainConfig
    prior: PriorSpec

    def __len__(self) -> int:
        return len(self.S)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def state(self, i: int) -> ChainState:
        p = {k: float(v[i]) for k, v in self.params.items()}
        return ChainState(S=self.S[i].copy(), **p)


class SuffStats:
    """Per-cell data summaries used by every update."""

    def __init__(self, data: Dataset):
        self.counts = data.counts.astype(float)
        self.y_sum = data.y_sum
        self.y_sumsq = data.y_sumsq
        self.volumes = data.grid.volumes
        self.n = float(self.counts.sum())
        self.occupied = data.occupied


def correlation_cholesky(dist: np.ndarray, phi: float) -> np.ndarray:
    try:
        return linalg.cholesky(build_correlation(dist, phi), lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NumericalError(f"correlation matrix not positive definite at phi={phi}") from None


def quad_form(chol: np.ndarray, v: np.ndarray) -> float:
    w = linalg.solve_triangular(chol, v, lower=True, check_finite=False)
    return float(w @ w)


# -- conjugate conditionals -------------------------------------------------

def mu_conditional(state: ChainState, st: SuffStats, prior: PriorSpec) -> tuple[float, float]:
    """Mean and variance of mu given everything else."""
    var = 1.0 / (st.n / state.tau2 + 1.0 / prior.mu_var)
    resid = float(np.sum(st.y_sum - st.counts * state.S))
    return var * resid / state.tau2, var


def residual_ss(state: ChainState, st: SuffStats) -> float:
    """Sum over all points of (y - mu - S(x))^2, from per-cell moments."""
    m = state.mu + state.S
    return float(np.sum(st.y_sumsq - 2.0 * m * st.y_sum + st.counts * m * m))


def tau_precision_conditional(state: ChainState, st: SuffStats, prior: PriorSpec) -> tuple[float, float]:
    """Shape and rate of the gamma conditional of 1/tau2."""
    ss = residual_ss(state, st)
    if not math.isfinite(ss):
        raise NumericalError("non-finite residual sum of squares")
    return prior.tau_shape + st.n / 2.0, prior.tau_rate + max(ss, 0.0) / 2.0


def sigma_precision_conditional(state: ChainState, prior: PriorSpec) -> tuple[float, float]:
    """Shape and rate of the gamma conditional of 1/sigma2."""
    if not math.isfinite(state.quad):
        raise NumericalError("non-finite quadratic form")
    return prior.sigma_shape + state.S.size / 2.0, prior.sigma_rate + state.quad / 2.0


def gibbs_update_conjugate(state: ChainState, st: SuffStats, prior: PriorSpec, rng) -> ChainState:
    m, v = mu_conditional(state, st, prior)
    state.mu = m + math.sqrt(v) * rng.standard_normal()
    a, b = tau_precision_conditional(state, st, prior)
    state.tau2 = 1.0 / rng.gamma(a, 1.0 / b)
    a, b = sigma_precision_conditional(state, prior)
    state.sigma2 = 1.0 / rng.gamma(a, 1.0 / b)
    return state


def level_shift_conditional(state: ChainState, prior: PriorSpec, model: str) -> tuple[float, float]:
    """Mean and variance of the shift c in (mu + c, S - c, alpha + beta c).

    The map leaves both likelihoods unchanged, so only the GP prior on S and
    the priors on mu (and alpha) depend on c, and the conditional is Gaussian.
    """
    r1 = state.inverse_row_sum()
    prec = float(r1.sum()) / state.sigma2 + 1.0 / prior.mu_var
    lin = float(state.S @ r1) / state.sigma2 - state.mu / prior.mu_var
    if model == "preferential":
        prec += state.beta ** 2 / prior.alpha_var
        lin -= state.alpha * state.beta / prior.alpha_var
    return lin / prec, 1.0 / prec


def gibbs_update_level(state: ChainState, prior: PriorSpec, model: str, rng) -> ChainState:
    mean, var = level_shift_conditional(state, prior, model)
    c = mean + math.sqrt(var) * rng.standard_normal()
    r1 = state.inverse_row_sum()
    state.quad = state.quad - 2.0 * c * float(state.S @ r1) + c * c * float(r1.sum())
    state.S = state.S - c
    state.mu += c
    if model == "preferential":
        state.alpha += state.beta * c
    return state


# -- phi ----------------------------------------------------------------------

def log_accept_phi(state: ChainState, phi_prop: float, logdet_prop: float, quad_prop: float,
                   prior: PriorSpec, delta: float) -> float:
    """Log of the phi acceptance ratio under the shifted log-normal proposal."""
    lp, lc = math.log(phi_prop), math.log(state.phi)
    return (
        -0.5 * (logdet_prop - state.logdet)
        + prior.phi_shape * (lp - lc)
        - (quad_prop - state.quad) / (2.0 * state.sigma2)
        + prior.phi_rate * (state.phi - phi_prop)
        - ((lc - lp + delta / 2) ** 2 - (lp - lc + delta / 2) ** 2) / (2.0 * delta)
    )


def propose_phi(phi: float, delta: float, rng) -> float:
    return math.exp(math.log(phi) - delta / 2 + math.sqrt(delta) * rng.standard_normal())


def metropolis_update_phi(state: ChainState, prior: PriorSpec, delta: float, dist: np.ndarray, rng):
    """One phi step. Returns ``(state, accepted, numerical_failure)``."""
    phi_prop = propose_phi(state.phi, delta, rng)
    try:
        chol = correlation_cholesky(dist, phi_prop)
    except NumericalError:
        return state, False, True
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    quad = quad_form(chol, state.S)
    log_p = log_accept_phi(state, phi_prop, logdet, quad, prior, delta)
    if math.log(rng.uniform()) < log_p:
        state.phi, state.chol, state.logdet, state.quad = phi_prop, chol, logdet, quad
        return state, True, False
    return state, False, False


# -- S, standard model ---------------------------------------------------------

def standard_S_conditional(state: ChainState, st: SuffStats) -> tuple[np.ndarray, np.ndarray]:
    """Mean and Cholesky factor of the precision of S | y, theta (standard model)."""
    m = state.S.size
    prec = state.correlation_inverse() / state.sigma2
    prec[np.diag_indices(m)] += st.counts / state.tau2
    try:
        chol_q = linalg.cholesky(prec, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NumericalError("conditional precision of S not positive definite") from None
    b = (st.y_sum - state.mu * st.counts) / state.tau2
    mean = linalg.cho_solve((chol_q, True), b, check_finite=False)
    return mean, chol_q


def gibbs_update_S_standard(state: ChainState, st: SuffStats, rng, dist: np.ndarray | None = None) -> ChainState:
    """Exact draw of S | y, theta by conditioning a prior draw on noisy cell means.

    With S0 ~ N(0, sigma2 R) and e ~ N(0, tau2 / n_i) on occupied cells,
    S0 + C_{.,o} (C_oo + D)^-1 (ybar - mu - S0_o - e) has the conditional
    law, and only an n x n system is solved.
    """
    occ = st.occupied
    m = state.S.size
    S0 = math.sqrt(state.sigma2) * (state.chol @ rng.standard_normal(m))
    noise = np.sqrt(state.tau2 / st.counts[occ]) * rng.standard_normal(occ.size)
    if dist is None:
        C_all_o = state.sigma2 * (state.chol @ state.chol[occ].T)
    else:
        C_all_o = state.sigma2 * build_correlation(dist[:, occ], state.phi)
    K = C_all_o[occ].copy()
    K[np.diag_indices_from(K)] += state.tau2 / st.counts[occ]
    resid = st.y_sum[occ] / st.counts[occ] - state.mu - S0[occ] - noise
    try:
        w = linalg.cho_solve(linalg.cho_factor(K, lower=True, check_finite=False), resid,
                             check_finite=False)
    except linalg.LinAlgError:
        raise NumericalError("observation covariance not positive definite") from None
    state.S = S0 + C_all_o @ w
    state.quad = quad_form(state.chol, state.S)
    return state


# -- S, alpha, beta, preferential model ------------------------------------------

def intensity_integral(alpha: float, beta: float, S: np.ndarray, volumes: np.ndarray) -> float:
    """sum_i Delta_i exp(alpha + beta S_i); inf on overflow."""
    with np.errstate(over="ignore"):
        return float(math.exp(alpha) * np.sum(volumes * np.exp(beta * S)))


def log_accept_S(state: ChainState, S_prop: np.ndarray, quad_prop: float, st: SuffStats) -> float:
    """Log acceptance ratio of a symmetric whole-vector move of S."""
    obs = -(
        np.sum(st.counts * (S_prop ** 2 - state.S ** 2))
        - 2.0 * np.sum((S_prop - state.S) * (st.y_sum - state.mu * st.counts))
    ) / (2.0 * state.tau2)
    pp = state.beta * float((S_prop - state.S) @ st.counts)
    integral = (intensity_integral(state.alpha, state.beta, state.S, st.volumes)
                - intensity_integral(state.alpha, state.beta, S_prop, st.volumes))
    gp = (state.quad - quad_prop) / (2.0 * state.sigma2)
    return float(obs + pp + integral + gp)


def log_accept_beta(state: ChainState, beta_prop: float, st: SuffStats, prior: PriorSpec) -> float:
    return (
        (beta_prop - state.beta) * float(state.S @ st.counts)
        + intensity_integral(state.alpha, state.beta, state.S, st.volumes)
        - intensity_integral(state.alpha, beta_prop, state.S, st.volumes)
        + (state.beta ** 2 - beta_prop ** 2) / (2.0 * prior.beta_var)
    )


def log_accept_alpha(state: ChainState, alpha_prop: float, st: SuffStats, prior: PriorSpec) -> float:
    with np.errstate(over="ignore"):
        base = float(np.sum(st.volumes * np.exp(state.beta * state.S)))
    return (
        (alpha_prop - state.alpha) * st.n
        + (math.exp(state.alpha) - math.exp(alpha_prop)) * base
        + (state.alpha ** 2 - alpha_prop ** 2) / (2.0 * prior.alpha_var)
    )


def metropolis_update_S_preferential(state: ChainState, st: SuffStats, step: float,
                                     proposal_chol: np.ndarray, rng):
    """Random-walk move S' = S + step * C z with C a fixed lower-triangular factor."""
    S_prop = state.S + step * (proposal_chol @ rng.standard_normal(state.S.size))
    quad_prop = quad_form(state.chol, S_prop)
    log_p = log_accept_S(state, S_prop, quad_prop, st)
    if not math.isfinite(log_p):
        return state, False, True
    if math.log(rng.uniform()) < log_p:
        state.S, state.quad = S_prop, quad_prop
        return state, True, False
    return state, False, False


def metropolis_update_alpha_beta(state: ChainState, st: SuffStats, prior: PriorSpec,
                                 steps: tuple[float, float], rng):
    """Sequential random-walk updates of beta then alpha.

    Returns ``(state, (beta_accepted, beta_failed), (alpha_accepted, alpha_failed))``.
    """
    out = []
    beta_prop = state.beta + steps[1] * rng.standard_normal()
    log_p = log_accept_beta(state, beta_prop, st, prior)
    if not math.isfinite(log_p):
        out.append((False, True))
    elif math.log(rng.uniform()) < log_p:
        state.beta = beta_prop
        out.append((True, False))
    else:
        out.append((False, False))
    alpha_prop = state.alpha + steps[0] * rng.standard_normal()
    log_p = log_accept_alpha(state, alpha_prop, st, prior)
    if not math.isfinite(log_p):
        out.append((False, True))
    elif math.log(rng.uniform()) < log_p:
        state.alpha = alpha_prop
        out.append((True, False))
    else:
        out.append((False, False))
    return state, out[0], out[1]


def local_precision(state: ChainState, st: SuffStats) -> np.ndarray:
    """Negative Hessian of the log full conditional of S at the current state."""
    m = state.S.size
    prec = state.correlation_inverse() / state.sigma2
    with np.errstate(over="ignore"):
        curv = st.volumes * state.beta ** 2 * np.exp(state.alpha + state.beta * state.S)
    prec[np.diag_indices(m)] += st.counts / state.tau2 + np.minimum(curv, 1e12)
    return prec


def proposal_factor(state: ChainState, st: SuffStats) -> np.ndarray:
    """Lower factor C with C C' equal to the inverse local precision."""
    prec = local_precision(state, st)
    try:
        chol_q = linalg.cholesky(prec, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return state.chol * math.sqrt(state.sigma2)
    # (L L')^-1 = L^-T L^-1, so C = L^-T works up to an orthogonal factor
    return linalg.solve_triangular(chol_q, np.eye(prec.shape[0]), lower=True, trans="T",
                                   check_finite=False)


# -- driver -------------------------------------------------------------------

def initial_state(data: Dataset, model: str, prior: PriorSpec, dist: np.ndarray) -> ChainState:
    ybar = data.y_mean
    n = data.n
    all_mean = float(data.y_sum.sum() / n)
    var = float(np.var(ybar, ddof=1)) if ybar.size > 1 else 1.0
    if not var > 0:
        var = 1.0
    state = ChainState(
        mu=all_mean, tau2=var / 2, sigma2=var / 2,
        phi=prior.phi_shape / prior.phi_rate,
        S=np.zeros(data.grid.cell_count),
    )
    state.refresh(dist)
    # start S at its conditional mean given y, so the sampler does not begin
    # inside the small-sigma2 funnel around S = 0
    st = SuffStats(data)
    state.S, _ = standard_S_conditional(state, st)
    state.quad = quad_form(state.chol, state.S)
    if model == "preferential":
        state.alpha = math.log(n / float(data.grid.volumes.sum()))
        state.beta = 0.0
    return state


class _Tuner:
    """Robbins-Monro adaptation of a log step size; used during burn-in only."""

    def __init__(self, step: float, target: float):
        self.log_step = math.log(step)
        self.target = target
        self.t = 0

    def update(self, accepted: bool):
        self.t += 1
        self.log_step += (float(accepted) - self.target) / (1.0 + self.t / 20.0) ** 0.6

    @property
    def step(self) -> float:
        return math.exp(self.log_step)


def run_mcmc(data: Dataset, model: str = "preferential", prior: PriorSpec | None = None,
             config: ChainConfig | None = None, init: ChainState | None = None) -> Chain:
    """Run one chain and return its thinned post-burn-in draws.

    ``init`` overrides the default moment-matched starting state.
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    prior = prior or PriorSpec()
    config = config or ChainConfig()
    if data.n == 0:
        raise ValueError("dataset has no observations")
    rng = np.random.default_rng(config.seed)
    dist = pairwise_distances(data.grid)
    st = SuffStats(data)
    state = initial_state(data, model, prior, dist) if init is None else init.copy().refresh(dist)
    pref = model == "preferential"
    m = data.grid.cell_count

    blocks = ["phi", "S"] + (["alpha", "beta"] if pref else [])
    tries = dict.fromkeys(blocks, 0)
    accepts = dict.fromkeys(blocks, 0)
    fails = dict.fromkeys(blocks, 0)

    tune_phi = _Tuner(config.delta_phi, 0.3)
    tune_S = _Tuner(config.step_S or 2.38 / math.sqrt(m), 0.25)
    tune_a = _Tuner(config.step_alpha, 0.35)
    tune_b = _Tuner(config.step_beta, 0.35)
    # the first part of burn-in draws S exactly as in the standard model, which
    # settles the nugget/field split before the random walk takes over
    warmup = int(config.standard_warmup * config.burn_in) if pref else 0
    prop_chol = None
    refresh_every = max(config.burn_in // 20, 50)

    kept = config.kept
    names = list(SCALARS) + (list(PREF_SCALARS) if pref else [])
    params = {k: np.empty(kept) for k in names}
    S_draws = np.empty((kept, m))
    j = 0

    for it in range(config.iterations):
        burning = it < config.burn_in
        tuning = burning and config.tune
        if it == config.burn_in:
            tries = dict.fromkeys(blocks, 0)
            accepts = dict.fromkeys(blocks, 0)

        state = gibbs_update_conjugate(state, st, prior, rng)
        state = gibbs_update_level(state, prior, model, rng)

        delta = tune_phi.step if config.tune else config.delta_phi
        state, ok, bad = metropolis_update_phi(state, prior, delta, dist, rng)
        tries["phi"] += 1
        accepts["phi"] += ok
        fails["phi"] += bad
        if tuning:
            tune_phi.update(ok)

        if not pref or it < warmup:
            state = gibbs_update_S_standard(state, st, rng, dist)
            if not pref:
                tries["S"] += 1
                accepts["S"] += 1
        else:
            if prop_chol is None or (tuning and it % refresh_every == 0):
                prop_chol = proposal_factor(state, st)
            step = tune_S.step if config.tune else (config.step_S or 2.38 / math.sqrt(m))
            for _ in range(config.S_moves):
                state, ok, bad = metropolis_update_S_preferential(state, st, step, prop_chol, rng)
                tries["S"] += 1
                accepts["S"] += ok
                fails["S"] += bad
                if tuning:
                    tune_S.update(ok)
        if pref:
            steps = ((tune_a.step, tune_b.step) if config.tune
                     else (config.step_alpha, config.step_beta))
            state, (okb, badb), (oka, bada) = metropolis_update_alpha_beta(state, st, prior, steps, rng)
            for name, ok, bad, tuner in (("beta", okb, badb, tune_b), ("alpha", oka, bada, tune_a)):
                tries[name] += 1
                accepts[name] += ok
                fails[name] += bad
                if tuning:
                    tuner.update(ok)

        if not burning and (it - config.burn_in + 1) % config.thin == 0 and j < kept:
            for k in names:
                params[k][j] = getattr(state, k)
            S_draws[j] = state.S
            j += 1

        if it + 1 in (config.burn_in, config.iterations) or (it + 1) % 1000 == 0:
            total = {b: tries[b] for b in blocks}
            for b in blocks:
                if it + 1 >= 200 and fails[b] > 0.5 * max(total[b], 1) and fails[b] > 100:
                    raise NumericalError(
                        f"block {b!r}: {fails[b]} numerical auto-rejects by iteration {it + 1}")

    rates = {b: accepts[b] / tries[b] if tries[b] else float("nan") for b in blocks}
    log.debug("acceptance rates %s", rates)
    return Chain(model=model, params=params, S=S_draws, acceptance_rates=rates,
                 numerical_rejects=fails, config=config, prior=prior)


def posterior_summaries(chain: Chain) -> list[tuple[str, float, float, float]]:
    """Rows of (parameter, mean, 2.5% quantile, 97.5% quantile)."""
    if len(chain) == 0:
        raise ValueError("empty chain")
    rows = []
    for name, x in chain.params.items():
        lo, hi = np.quantile(x, [0.025, 0.975])
        rows.append((name, float(np.mean(x)), float(lo), float(hi)))
    return rows


def split_rhat(x) -> float:
    """Split-chain potential scale reduction for a single chain."""
    x = np.asarray(x, dtype=float)
    half = len(x) // 2
    if half < 2:
        return float("nan")
    parts = np.stack([x[:half], x[half:2 * half]])
    w = parts.var(axis=1, ddof=1).mean()
    b = half * parts.mean(axis=1).var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (half - 1) / half * w + b / half
    return float(math.sqrt(var_plus / w))
