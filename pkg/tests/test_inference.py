import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from prefgeo.gp import build_correlation
from prefgeo.grid import Region, build_grid, pairwise_distances
from prefgeo.inference import (Chain, ChainConfig, ChainState, PriorSpec, SuffStats,
                               gibbs_update_S_standard, level_shift_conditional, log_accept_alpha,
                               log_accept_beta, log_accept_phi, log_accept_S, mu_conditional,
                               posterior_summaries, propose_phi, quad_form, run_mcmc,
                               sigma_precision_conditional, split_rhat, standard_S_conditional,
                               tau_precision_conditional)
from prefgeo.simulate import Dataset, simulate_case

PRIOR = PriorSpec()


def toy_data(points, m, width=10.0):
    """Dataset from an explicit list of (cell, y) points."""
    g = build_grid(Region([(0, width)]), m)
    counts = np.zeros(m, dtype=int)
    y_sum = np.zeros(m)
    y_sq = np.zeros(m)
    for c, y in points:
        counts[c] += 1
        y_sum[c] += y
        y_sq[c] += y * y
    return Dataset(g, counts, y_sum, y_sumsq=y_sq)


def make_state(data, mu=12.0, tau2=0.4, sigma2=1.5, phi=6.0, S=None, alpha=-1.0, beta=1.3):
    S = np.zeros(data.grid.cell_count) if S is None else np.asarray(S, dtype=float)
    st = ChainState(mu=mu, tau2=tau2, sigma2=sigma2, phi=phi, S=S, alpha=alpha, beta=beta)
    return st.refresh(pairwise_distances(data.grid))


def log_joint(points, data, s, prior=PRIOR, preferential=True):
    """Unnormalised log posterior written directly from the model with scipy densities.

    Variance parameters enter through their precisions, matching the gamma priors
    on 1/tau2 and 1/sigma2.
    """
    m = data.grid.cell_count
    R = build_correlation(pairwise_distances(data.grid), s.phi)
    out = sum(stats.norm.logpdf(y, s.mu + s.S[c], math.sqrt(s.tau2)) for c, y in points)
    out += stats.multivariate_normal.logpdf(s.S, np.zeros(m), s.sigma2 * R)
    out += stats.norm.logpdf(s.mu, 0, math.sqrt(prior.mu_var))
    out += stats.gamma.logpdf(1 / s.tau2, prior.tau_shape, scale=1 / prior.tau_rate)
    out += stats.gamma.logpdf(1 / s.sigma2, prior.sigma_shape, scale=1 / prior.sigma_rate)
    out += stats.gamma.logpdf(s.phi, prior.phi_shape, scale=1 / prior.phi_rate)
    if preferential:
        lam = data.grid.volumes * np.exp(s.alpha + s.beta * s.S)
        out += float(np.sum(stats.poisson.logpmf(data.counts, lam)))
        out += stats.norm.logpdf(s.alpha, 0, math.sqrt(prior.alpha_var))
        out += stats.norm.logpdf(s.beta, 0, math.sqrt(prior.beta_var))
    return float(out)


def with_(state, **kw):
    s = state.copy()
    for k, v in kw.items():
        setattr(s, k, v)
    return s


def tv_on_grid(log_dens, ref_dens):
    p = np.exp(log_dens - log_dens.max())
    p /= p.sum()
    q = ref_dens / ref_dens.sum()
    return 0.5 * np.abs(p - q).sum()


# -- configs and priors ---------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(iterations=0, burn_in=0)
    with pytest.raises(ValueError):
        ChainConfig(iterations=100, burn_in=100)
    with pytest.raises(ValueError):
        ChainConfig(thin=0)
    with pytest.raises(ValueError):
        ChainConfig(delta_phi=0)
    with pytest.raises(ValueError):
        PriorSpec(mu_var=-1)
    assert ChainConfig(iterations=20000, burn_in=5000, thin=5).kept == 3000


# -- conjugate updates ------------------------------------------------------------

POINTS = [(0, 11.2), (2, 12.9), (2, 13.4)]  # n = 3 points in M = 4 cells


def test_mu_flat_prior_limit():
    data = toy_data(POINTS, 4)
    s = make_state(data)
    m, _ = mu_conditional(s, SuffStats(data), PriorSpec(mu_var=1e15))
    assert m == pytest.approx(np.mean([y for _, y in POINTS]), rel=1e-10)


def test_mu_conditional_density_grid():
    data = toy_data(POINTS, 4)
    s = make_state(data, S=[0.3, -0.2, 0.5, 0.1])
    m, v = mu_conditional(s, SuffStats(data), PRIOR)
    grid = np.linspace(m - 8 * math.sqrt(v), m + 8 * math.sqrt(v), 2001)
    lj = np.array([log_joint(POINTS, data, with_(s, mu=x)) for x in grid])
    assert tv_on_grid(lj, stats.norm.pdf(grid, m, math.sqrt(v))) < 0.01


def test_tau_conditional_density_grid():
    data = toy_data(POINTS, 4)
    s = make_state(data, S=[0.3, -0.2, 0.5, 0.1])
    a, b = tau_precision_conditional(s, SuffStats(data), PRIOR)
    lam = np.linspace(1e-3, stats.gamma.ppf(0.9999, a, scale=1 / b), 3000)
    lj = np.array([log_joint(POINTS, data, with_(s, tau2=1 / x)) for x in lam])
    assert tv_on_grid(lj, stats.gamma.pdf(lam, a, scale=1 / b)) < 0.01


def test_sigma_conditional_density_grid():
    data = toy_data(POINTS, 4)
    s = make_state(data, S=[0.3, -0.2, 0.5, 0.1])
    a, b = sigma_precision_conditional(s, PRIOR)
    lam = np.linspace(1e-3, stats.gamma.ppf(0.9999, a, scale=1 / b), 3000)
    lj = np.array([log_joint(POINTS, data, with_(s, sigma2=1 / x)) for x in lam])
    assert tv_on_grid(lj, stats.gamma.pdf(lam, a, scale=1 / b)) < 0.01


def test_tau_conditional_zero_residuals():
    data = toy_data([(0, 12.0), (1, 12.0)], 3)
    s = make_state(data, mu=12.0)
    a, b = tau_precision_conditional(s, SuffStats(data), PRIOR)
    assert (a, b) == (PRIOR.tau_shape + 1.0, PRIOR.tau_rate)


def test_level_shift_density_grid():
    data = toy_data(POINTS, 4)
    s = make_state(data, S=[0.3, -0.2, 0.5, 0.1])
    for model in ("standard", "preferential"):
        mean, var = level_shift_conditional(s, PRIOR, model)
        sd = math.sqrt(var)
        cs = np.linspace(mean - 8 * sd, mean + 8 * sd, 2001)
        lj = np.array([
            log_joint(POINTS, data, with_(s, mu=s.mu + c, S=s.S - c, alpha=s.alpha + s.beta * c),
                      preferential=model == "preferential")
            for c in cs])
        assert tv_on_grid(lj, stats.norm.pdf(cs, mean, sd)) < 0.01


# -- phi -------------------------------------------------------------------------

def log_phi_target(data, s, phi):
    R = build_correlation(pairwise_distances(data.grid), phi)
    return (stats.multivariate_normal.logpdf(s.S, np.zeros(s.S.size), s.sigma2 * R)
            + stats.gamma.logpdf(phi, PRIOR.phi_shape, scale=1 / PRIOR.phi_rate))


def phi_ratio(s, data, phi_prop, delta):
    p = with_(s, phi=phi_prop).refresh(pairwise_distances(data.grid))
    return log_accept_phi(s, phi_prop, p.logdet, p.quad, PRIOR, delta)


def lognormal_logpdf(x, phi, delta):
    return stats.lognorm.logpdf(x, math.sqrt(delta), scale=math.exp(math.log(phi) - delta / 2))


def test_phi_identity_proposal():
    data = toy_data(POINTS, 4)
    s = make_state(data, S=[0.3, -0.2, 0.5, 0.1])
    assert phi_ratio(s, data, s.phi, 0.1) == pytest.approx(0.0, abs=1e-12)


def test_phi_two_cell_hand_computation():
    data = toy_data([(0, 12.5)], 2, width=10.0)  # centroids 2.5 and 7.5
    s = make_state(data, S=[0.4, -0.3], sigma2=1.2, phi=6.0)
    phi2, delta = 9.0, 0.2
    r, r2 = math.exp(-5 / 6.0), math.exp(-5 / 9.0)

    def quad(rho):
        a, b = s.S
        return (a * a - 2 * rho * a * b + b * b) / (1 - rho * rho)

    ratio = (math.sqrt((1 - r * r) / (1 - r2 * r2))
             * math.exp(-(quad(r2) - quad(r)) / (2 * s.sigma2))
             * (phi2 / 6.0) ** PRIOR.phi_shape * math.exp(-PRIOR.phi_rate * (phi2 - 6.0))
             * math.exp(-((math.log(6 / phi2) + delta / 2) ** 2
                          - (math.log(phi2 / 6) + delta / 2) ** 2) / (2 * delta)))
    assert math.exp(phi_ratio(s, data, phi2, delta)) == pytest.approx(ratio, rel=1e-12)


def test_phi_ratio_is_hastings_ratio():
    data = toy_data(POINTS, 3)
    s = make_state(data, S=[0.3, -0.2, 0.5])
    delta = 0.3
    for phi2 in (2.0, 5.5, 6.0, 14.0):
        expected = (log_phi_target(data, s, phi2) - log_phi_target(data, s, s.phi)
                    + lognormal_logpdf(s.phi, phi2, delta) - lognormal_logpdf(phi2, s.phi, delta))
        assert phi_ratio(s, data, phi2, delta) == pytest.approx(expected, abs=1e-12)


def test_phi_detailed_balance_discrete_chain():
    # three-point phi space; proposals renormalised over the support, with the
    # normalisers entering the acceptance so the chain targets the model exactly
    data = toy_data(POINTS, 3)
    s = make_state(data, S=[0.8, -0.4, 0.6])
    support = np.array([3.0, 6.0, 11.0])
    delta = 0.8
    target = np.array([log_phi_target(data, s, p) for p in support])
    pi = np.exp(target - target.max())
    pi /= pi.sum()
    f = np.array([[math.exp(lognormal_logpdf(b, a, delta)) for b in support] for a in support])
    Z = f.sum(1)
    P = np.zeros((3, 3))
    for i in range(3):
        si = with_(s, phi=support[i]).refresh(pairwise_distances(data.grid))
        for j in range(3):
            if i != j:
                acc = min(1.0, math.exp(phi_ratio(si, data, support[j], delta)) * Z[i] / Z[j])
                P[i, j] = f[i, j] / Z[i] * acc
        P[i, i] = 1 - P[i].sum()
    np.testing.assert_allclose(pi @ P, pi, atol=1e-12)

    rng = np.random.default_rng(0)
    u = rng.uniform(size=1_000_000)
    cum = np.cumsum(P, axis=1)
    state, visits = 0, np.zeros(3)
    for t in range(1_000_000):
        state = int(np.searchsorted(cum[state], u[t]))
        if t % 20 == 0:
            visits[state] += 1
    assert stats.chisquare(visits, pi * visits.sum()).pvalue > 0.001


def test_phi_proposal_distribution():
    rng = np.random.default_rng(1)
    draws = np.log([propose_phi(10.0, 0.2, rng) for _ in range(20_000)])
    assert abs(draws.mean() - (math.log(10) - 0.1)) < 4 * math.sqrt(0.2 / 20_000)
    assert abs(draws.var() - 0.2) < 0.01


# -- S, standard model -------------------------------------------------------------

def dense_posterior(data, s):
    """Moments of S | y by conditioning the explicit joint of (S, all points)."""
    m = data.grid.cell_count
    cells = np.repeat(np.arange(m), data.counts)
    ys = []
    for c in range(m):
        ys += [data.y_sum[c] / max(data.counts[c], 1)] * int(data.counts[c])
    C = s.sigma2 * build_correlation(pairwise_distances(data.grid), s.phi)
    A = C[:, cells]
    B = C[np.ix_(cells, cells)] + s.tau2 * np.eye(cells.size)
    gain = A @ np.linalg.inv(B)
    return gain @ (np.array(ys) - s.mu), C - gain @ A.T


def test_standard_S_matches_dense_conditioning():
    data = toy_data([(0, 11.0), (2, 13.0), (2, 13.0)], 3)
    s = make_state(data)
    mean, chol_q = standard_S_conditional(s, SuffStats(data))
    dm, dc = dense_posterior(data, s)
    np.testing.assert_allclose(mean, dm, atol=1e-12)
    np.testing.assert_allclose(np.linalg.inv(chol_q @ chol_q.T), dc, atol=1e-12)


def test_standard_S_sample_moments():
    data = toy_data([(0, 11.0), (2, 13.5)], 3)
    s = make_state(data)
    st_ = SuffStats(data)
    rng = np.random.default_rng(4)
    L = 100_000
    draws = np.empty((L, 3))
    for i in range(L):
        draws[i] = gibbs_update_S_standard(s, st_, rng).S
    dm, dc = dense_posterior(data, s)
    se = np.sqrt(np.diag(dc) / L)
    assert np.all(np.abs(draws.mean(0) - dm) < 3 * se)
    # variance of a sample variance is about 2 var^2 / L for Gaussian draws
    assert np.all(np.abs(draws.var(0) - np.diag(dc)) < 3 * np.diag(dc) * math.sqrt(2 / L))


def test_standard_S_uninformative_and_pinned():
    data = toy_data([(1, 14.0)], 3)
    loose = make_state(data, tau2=1e12)
    mean, chol_q = standard_S_conditional(loose, SuffStats(data))
    prior_cov = loose.sigma2 * build_correlation(pairwise_distances(data.grid), loose.phi)
    np.testing.assert_allclose(mean, 0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.inv(chol_q @ chol_q.T), prior_cov, atol=1e-9)

    pinned = make_state(data, tau2=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(20):
        S = gibbs_update_S_standard(pinned, SuffStats(data), rng).S
        assert abs(S[1] - (14.0 - 12.0)) < 1e-4


# -- preferential model --------------------------------------------------------------

def pref_ratio_oracle(points, data, s, s2):
    return log_joint(points, data, s2) - log_joint(points, data, s)


def test_S_ratio_identity():
    data = toy_data(POINTS, 3)
    s = make_state(data, S=[0.2, 0.1, -0.4])
    assert log_accept_S(s, s.S.copy(), s.quad, SuffStats(data)) == 0.0


def test_S_ratio_gp_only_when_uninformative():
    data = toy_data(POINTS, 3)
    s = make_state(data, S=[0.2, 0.1, -0.4], beta=0.0, tau2=1e300)
    S2 = np.array([0.5, -0.3, 0.0])
    q2 = quad_form(s.chol, S2)
    R = s.sigma2 * build_correlation(pairwise_distances(data.grid), s.phi)
    gp = (stats.multivariate_normal.logpdf(S2, np.zeros(3), R)
          - stats.multivariate_normal.logpdf(s.S, np.zeros(3), R))
    assert log_accept_S(s, S2, q2, SuffStats(data)) == pytest.approx(gp, abs=1e-12)


def test_S_ratio_two_cells_one_point():
    pts = [(1, 12.7)]
    data = toy_data(pts, 2)
    s = make_state(data, S=[0.2, 0.6])
    S2 = np.array([-0.1, 0.9])
    got = log_accept_S(s, S2, quad_form(s.chol, S2), SuffStats(data))
    assert got == pytest.approx(pref_ratio_oracle(pts, data, s, with_(s, S=S2)), abs=1e-12)


def test_alpha_beta_single_cell_two_points():
    pts = [(0, 11.8), (0, 12.6)]
    data = toy_data(pts, 1)
    s = make_state(data, S=[0.35], alpha=-0.4, beta=1.7)
    st_ = SuffStats(data)
    for b2 in (1.7, 0.9, 2.4):
        got = log_accept_beta(s, b2, st_, PRIOR)
        assert got == pytest.approx(pref_ratio_oracle(pts, data, s, with_(s, beta=b2)), abs=1e-12)
    for a2 in (-0.4, -1.1, 0.3):
        got = log_accept_alpha(s, a2, st_, PRIOR)
        assert got == pytest.approx(pref_ratio_oracle(pts, data, s, with_(s, alpha=a2)), abs=1e-12)
    assert log_accept_beta(s, s.beta, st_, PRIOR) == 0.0
    assert log_accept_alpha(s, s.alpha, st_, PRIOR) == 0.0


def test_overflow_gives_non_finite_ratio():
    data = toy_data([(0, 12.0)], 2)
    s = make_state(data, S=[0.0, 0.0], beta=2.0)
    S2 = np.array([0.0, 500.0])
    assert not math.isfinite(log_accept_S(s, S2, quad_form(s.chol, S2), SuffStats(data)))


coords = st.floats(-2, 2, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.lists(st.tuples(st.integers(0, 2), st.floats(8, 16)), min_size=1, max_size=4),
       st.lists(coords, min_size=6, max_size=6), st.floats(-3, 1), st.floats(-2, 3),
       st.floats(0.05, 2), st.floats(0.2, 3), st.floats(1, 20))
def test_acceptance_ratios_equal_posterior_ratios(m, pts, svals, alpha, beta, tau2, sigma2, phi):
    pts = [(c % m, y) for c, y in pts]
    data = toy_data(pts, m)
    s = make_state(data, S=svals[:m], alpha=alpha, beta=beta, tau2=tau2, sigma2=sigma2, phi=phi)
    st_ = SuffStats(data)
    S2 = np.array(svals[3:3 + m])
    got = log_accept_S(s, S2, quad_form(s.chol, S2), st_)
    ref = pref_ratio_oracle(pts, data, s, with_(s, S=S2))
    assert got == pytest.approx(ref, abs=1e-12 * max(1.0, abs(ref)) * 10)
    b2, a2 = beta + svals[0], alpha + svals[1]
    ref = pref_ratio_oracle(pts, data, s, with_(s, beta=b2))
    assert log_accept_beta(s, b2, st_, PRIOR) == pytest.approx(ref, abs=1e-11 * max(1.0, abs(ref)))
    ref = pref_ratio_oracle(pts, data, s, with_(s, alpha=a2))
    assert log_accept_alpha(s, a2, st_, PRIOR) == pytest.approx(ref, abs=1e-11 * max(1.0, abs(ref)))


# -- driver ----------------------------------------------------------------------------

SHORT = dict(iterations=3000, burn_in=1000, thin=2)


def test_chain_shape_and_reproducibility():
    data = simulate_case("I", seed=0)
    a = run_mcmc(data, "preferential", config=ChainConfig(seed=3, **SHORT))
    b = run_mcmc(data, "preferential", config=ChainConfig(seed=3, **SHORT))
    assert len(a) == (3000 - 1000) // 2
    assert a.S.shape == (1000, 100)
    assert a.names == ["mu", "tau2", "sigma2", "phi", "alpha", "beta"]
    for k in a.names:
        assert np.array_equal(a.params[k], b.params[k])
    assert np.array_equal(a.S, b.S)
    st_ = a.state(5)
    assert st_.mu == a.params["mu"][5]
    assert all(np.all(a.params[k] > 0) for k in ("tau2", "sigma2", "phi"))


def test_standard_chain_names():
    data = simulate_case("III", seed=0)
    ch = run_mcmc(data, "standard", config=ChainConfig(seed=1, **SHORT))
    assert ch.names == ["mu", "tau2", "sigma2", "phi"]
    assert ch.acceptance_rates["S"] == 1.0


def test_case_one_acceptance_rates_in_band():
    data = simulate_case("I", seed=0)
    ch = run_mcmc(data, "preferential", config=ChainConfig(iterations=8000, burn_in=3000, seed=0))
    for block, rate in ch.acceptance_rates.items():
        assert 0.1 <= rate <= 0.7, (block, rate)


def test_run_rejects_bad_input():
    data = simulate_case("I", seed=0)
    with pytest.raises(ValueError):
        run_mcmc(data, "cox")
    empty = Dataset(data.grid, np.zeros(100, dtype=int), np.zeros(100))
    with pytest.raises(ValueError):
        run_mcmc(empty, "standard")


def fake_chain(values):
    values = np.asarray(values, dtype=float)
    L = values.size
    params = {k: values.copy() for k in ("mu", "tau2", "sigma2", "phi")}
    return Chain("standard", params, np.zeros((L, 2)), {}, {}, ChainConfig(), PRIOR)


def test_summaries():
    rows = posterior_summaries(fake_chain(np.full(50, 3.25)))
    assert rows[0] == ("mu", 3.25, 3.25, 3.25)
    z = np.random.default_rng(0).standard_normal(10_000)
    name, mean, lo, hi = posterior_summaries(fake_chain(z))[0]
    assert abs(mean) < 3 / math.sqrt(10_000)
    assert lo == pytest.approx(-1.96, abs=0.1) and hi == pytest.approx(1.96, abs=0.1)
    with pytest.raises(ValueError):
        posterior_summaries(fake_chain([]))


def test_split_rhat():
    rng = np.random.default_rng(0)
    assert split_rhat(rng.standard_normal(4000)) == pytest.approx(1.0, abs=0.02)
    assert split_rhat(np.concatenate([np.zeros(500), np.ones(500) * 5]) + rng.normal(0, .1, 1000)) > 2
