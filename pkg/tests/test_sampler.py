from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.stats as sps
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aebayes.data import loads_dataset
from aebayes.model import HyperParams, HyperPriorSpec
from aebayes.sampler import (
    ChainState,
    McmcConfig,
    adapt_step_sizes,
    alpha_log_conditional,
    beta_log_conditional,
    compute_rhat,
    export_draws,
    gibbs_update_lambdas,
    mh_update_hyperparams,
    point_mass_draws,
    run_mcmc,
)

ONE_SITE = loads_dataset("site_id,patient_id,ae_count\nA,p1,3\nA,p2,2\nA,p3,2\n")
TWO_SITES = loads_dataset(
    "site_id,patient_id,ae_count\nA,p1,3\nA,p2,2\nA,p3,2\nB,p4,0\nB,p5,1\n")


def test_config_validation():
    with pytest.raises(ValueError):
        McmcConfig(n_chains=0)
    with pytest.raises(ValueError):
        McmcConfig(adapt_target_accept=1.5)
    with pytest.raises(ValueError):
        McmcConfig(rhat_threshold=0.9)
    with pytest.raises(ValueError):
        McmcConfig(freeze_hyperparams=(0.0, 1.0))


def test_config_defaults():
    cfg = McmcConfig()
    assert (cfg.n_chains, cfg.n_warmup, cfg.n_draws) == (4, 1000, 1000)
    assert cfg.adapt_target_accept == 0.44
    assert cfg.rhat_threshold == 1.1


def test_freeze_mode_conjugate_moments():
    cfg = McmcConfig(n_warmup=10, seed=3, freeze_hyperparams=(2.0, 0.5))
    draws = run_mcmc(ONE_SITE, HyperPriorSpec(0.1, 0.1), cfg)
    lam = draws.lambdas[:, :, 0].ravel()
    assert lam.size == 4000
    assert lam.mean() == pytest.approx(9 / 3.5, rel=0.02)
    assert lam.var(ddof=1) == pytest.approx(9 / 3.5**2, rel=0.10)
    # hyperparameters pinned exactly
    assert (draws.alpha == 2.0).all()
    assert (draws.beta == 0.5).all()
    assert "alpha" not in draws.diagnostics


def test_freeze_mode_conjugate_distribution():
    cfg = McmcConfig(n_chains=2, n_warmup=5, n_draws=2000, seed=5,
                     freeze_hyperparams=(2.0, 0.5))
    draws = run_mcmc(TWO_SITES, HyperPriorSpec(0.1, 0.1), cfg)
    # per site: Gamma(2 + total, 0.5 + n), checked distribution-wise
    for j, (total, n) in enumerate([(7, 3), (1, 2)]):
        lam = draws.lambdas[:, :, j].ravel()[::5]
        stat = sps.kstest(lam, sps.gamma(a=2.0 + total, scale=1 / (0.5 + n)).cdf)
        assert stat.pvalue > 0.005, f"site {j}: KS p={stat.pvalue}"


def test_no_data_frozen_samples_rate_prior():
    cfg = McmcConfig(n_chains=2, n_warmup=5, n_draws=2000, seed=8,
                     freeze_hyperparams=(2.0, 0.5), no_data=True)
    draws = run_mcmc(ONE_SITE, HyperPriorSpec(0.1, 0.1), cfg)
    lam = draws.lambdas[:, :, 0].ravel()[::5]
    stat = sps.kstest(lam, sps.gamma(a=2.0, scale=1 / 0.5).cdf)
    assert stat.pvalue > 0.005


def test_no_data_recovers_hyperprior_marginals():
    """Without data the chain must sample the prior joint, so the alpha
    and beta marginals are the exponential hyperpriors."""
    spec = HyperPriorSpec(1.0, 1.0)
    cfg = McmcConfig(n_chains=4, n_warmup=1000, n_draws=2000, seed=2, no_data=True)
    draws = run_mcmc(ONE_SITE, spec, cfg)
    alpha = draws.alpha.ravel()[::20]
    beta = draws.beta.ravel()[::20]
    assert sps.kstest(alpha, sps.expon(scale=1.0).cdf).pvalue > 0.005
    assert sps.kstest(beta, sps.expon(scale=1.0).cdf).pvalue > 0.005


def test_determinism_same_seed():
    spec = HyperPriorSpec(0.1, 0.1)
    cfg = McmcConfig(n_chains=2, n_warmup=100, n_draws=100, seed=11)
    a = run_mcmc(TWO_SITES, spec, cfg)
    b = run_mcmc(TWO_SITES, spec, cfg)
    assert np.array_equal(a.alpha, b.alpha)
    assert np.array_equal(a.beta, b.beta)
    assert np.array_equal(a.lambdas, b.lambdas)
    c = run_mcmc(TWO_SITES, spec, McmcConfig(n_chains=2, n_warmup=100,
                                             n_draws=100, seed=12))
    assert not np.array_equal(a.alpha, c.alpha)


def test_draws_are_read_only_and_shaped():
    cfg = McmcConfig(n_chains=3, n_warmup=50, n_draws=40, seed=0)
    draws = run_mcmc(TWO_SITES, HyperPriorSpec(0.1, 0.1), cfg)
    assert draws.alpha.shape == (3, 40)
    assert draws.lambdas.shape == (3, 40, 2)
    assert draws.site_ids == ("A", "B")
    assert draws.n_samples == 120
    assert (draws.lambdas > 0).all() and (draws.alpha > 0).all()
    with pytest.raises(ValueError):
        draws.alpha[0, 0] = 1.0
    assert set(draws.diagnostics) == {"alpha", "beta", "lambda[A]", "lambda[B]"}


def test_gibbs_update_replaces_all_rates():
    state = ChainState(alpha=2.0, beta=1.0, lambdas=np.array([1.0, 1.0]))
    rng = np.random.default_rng(0)
    new = gibbs_update_lambdas(state, TWO_SITES, rng)
    assert new.lambdas.shape == (2,)
    assert (new.lambdas > 0).all()
    assert not np.array_equal(new.lambdas, state.lambdas)
    # empirical check of the conjugate parameters
    means = np.mean([gibbs_update_lambdas(state, TWO_SITES, rng).lambdas
                     for _ in range(4000)], axis=0)
    assert means[0] == pytest.approx((2 + 7) / (1 + 3), rel=0.05)
    assert means[1] == pytest.approx((2 + 1) / (1 + 2), rel=0.05)


def test_hyperparam_conditionals_match_independent_densities():
    """Up to an additive constant, the conditionals must equal the scipy
    density sums they summarize."""
    spec = HyperPriorSpec(0.7, 1.3)
    lam = np.array([0.4, 2.2, 1.1])

    def full_alpha(a, b):
        return (sps.gamma.logpdf(lam, a=a, scale=1 / b).sum()
                + sps.expon.logpdf(a, scale=1 / spec.alpha_rate))

    def full_beta(b, a):
        return (sps.gamma.logpdf(lam, a=a, scale=1 / b).sum()
                + sps.expon.logpdf(b, scale=1 / spec.beta_rate))

    b0 = 1.5
    diffs = [alpha_log_conditional(a, b0, lam, spec) - full_alpha(a, b0)
             for a in (0.5, 1.0, 3.0)]
    assert max(diffs) - min(diffs) < 1e-9  # constant in alpha
    a0 = 2.0
    diffs = [beta_log_conditional(b, a0, lam, spec) - full_beta(b, a0)
             for b in (0.5, 1.0, 3.0)]
    assert max(diffs) - min(diffs) < 1e-9


def test_conditionals_support_zero_sites():
    spec = HyperPriorSpec(0.5, 0.5)
    empty = np.array([])
    # reduces to the hyperprior alone (up to a constant)
    d1 = alpha_log_conditional(2.0, 1.0, empty, spec) - \
        alpha_log_conditional(1.0, 1.0, empty, spec)
    assert d1 == pytest.approx(-spec.alpha_rate * 1.0)


def test_metropolis_ratio_identity():
    """Forward and backward log acceptance ratios must be antisymmetric
    and equal the independent density computation including the log-scale
    proposal Jacobian."""
    spec = HyperPriorSpec(0.7, 1.3)
    lam = np.array([0.4, 2.2, 1.1])
    b0 = 1.5
    a, a_new = 1.2, 2.6

    def target(x):
        return (sps.gamma.logpdf(lam, a=x, scale=1 / b0).sum()
                + sps.expon.logpdf(x, scale=1 / spec.alpha_rate))

    fwd = (alpha_log_conditional(a_new, b0, lam, spec)
           - alpha_log_conditional(a, b0, lam, spec)
           + math.log(a_new) - math.log(a))
    bwd = (alpha_log_conditional(a, b0, lam, spec)
           - alpha_log_conditional(a_new, b0, lam, spec)
           + math.log(a) - math.log(a_new))
    assert fwd == pytest.approx(-bwd, abs=1e-12)
    expected = target(a_new) - target(a) + math.log(a_new) - math.log(a)
    assert fwd == pytest.approx(expected, abs=1e-9)


def test_mh_update_zero_step_accepts_in_place():
    state = ChainState(alpha=2.0, beta=1.0, lambdas=np.array([1.0, 2.0]),
                       step_alpha=0.0, step_beta=0.0)
    new = mh_update_hyperparams(state, HyperPriorSpec(1.0, 1.0),
                                np.random.default_rng(0))
    assert new.alpha == state.alpha and new.beta == state.beta
    assert new.alpha_accepts == 1 and new.beta_accepts == 1
    assert new.alpha_proposals == 1 and new.beta_proposals == 1


def test_mh_update_invariance_of_conditional():
    """Long MH runs on the alpha conditional alone must reproduce the
    density that a fine-grid normalization gives."""
    spec = HyperPriorSpec(1.0, 1.0)
    lam = np.array([1.5, 2.5, 0.8, 1.2])
    rng = np.random.default_rng(4)
    state = ChainState(alpha=1.0, beta=1.0, lambdas=lam)
    samples = []
    for i in range(40_000):
        state = mh_update_hyperparams(state, spec, rng)
        state = ChainState(alpha=state.alpha, beta=1.0, lambdas=lam,
                           step_alpha=state.step_alpha)  # hold beta fixed
        if i % 20 == 0:
            samples.append(state.alpha)
    samples = np.array(samples[100:])
    grid = np.linspace(1e-6, 30, 200_001)
    log_dens = np.array([alpha_log_conditional(a, 1.0, lam, spec) for a in grid])
    dens = np.exp(log_dens - log_dens.max())
    dens /= np.trapezoid(dens, grid)
    mean = np.trapezoid(grid * dens, grid)
    sd = math.sqrt(np.trapezoid((grid - mean) ** 2 * dens, grid))
    assert samples.mean() == pytest.approx(mean, abs=0.15 * sd)


def test_adapt_step_sizes_contract():
    state = ChainState(alpha=1.0, beta=1.0, lambdas=np.array([1.0]),
                       step_alpha=0.5, step_beta=0.5,
                       alpha_accepts=22, alpha_proposals=50,
                       beta_accepts=10, beta_proposals=50)
    # exactly at target: unchanged
    at = adapt_step_sizes(state, 0.44, 0.44)
    assert at.step_alpha == pytest.approx(0.5)
    assert at.step_beta == pytest.approx(0.5)
    assert at.alpha_accepts == at.alpha_proposals == 0
    assert at.beta_accepts == at.beta_proposals == 0
    # above target: grow; below: shrink — by exp(rate - target)
    up = adapt_step_sizes(state, 0.9, 0.1)
    assert up.step_alpha == pytest.approx(0.5 * math.exp(0.9 - 0.44))
    assert up.step_beta == pytest.approx(0.5 * math.exp(0.1 - 0.44))
    assert up.step_alpha > 0.5 > up.step_beta


def test_rhat_iid_chains_near_one():
    rng = np.random.default_rng(0)
    chains = rng.normal(size=(4, 1000))
    r = compute_rhat(chains)
    assert 0.99 <= r <= 1.01


def test_rhat_detects_divergent_chains():
    rng = np.random.default_rng(1)
    chains = rng.normal(size=(4, 1000)) + 3.0 * np.arange(4)[:, None]
    assert compute_rhat(chains) > 1.5


def test_rhat_within_chain_trend_detected():
    # split halves: a strong trend inside each chain also inflates rhat
    t = np.linspace(0, 4, 500)
    chains = np.vstack([t, t, t, t]) + np.random.default_rng(2).normal(
        size=(4, 500)) * 0.1
    assert compute_rhat(chains) > 1.5


def test_rhat_degenerate_is_inf():
    assert compute_rhat(np.ones((4, 100))) == math.inf


def test_rhat_validation():
    with pytest.raises(ValueError):
        compute_rhat(np.ones(10))
    with pytest.raises(ValueError):
        compute_rhat(np.ones((1, 100)))
    with pytest.raises(ValueError):
        compute_rhat(np.ones((4, 3)))


@settings(max_examples=40, deadline=None)
@given(
    # dyadic lattice values keep the affine transform exact in floats
    chains=arrays(np.float64, (4, 50),
                  elements=st.integers(min_value=-400, max_value=400).map(
                      lambda i: i / 8.0)),
    scale=st.sampled_from([0.25, 0.5, 1.0, 2.0, 4.0]),
    shift=st.integers(min_value=-800, max_value=800).map(lambda i: i / 8.0),
)
def test_rhat_affine_invariance(chains, scale, shift):
    r0 = compute_rhat(chains)
    r1 = compute_rhat(chains * scale + shift)
    if math.isinf(r0):
        assert math.isinf(r1)
    else:
        assert r1 == pytest.approx(r0, rel=1e-9)


def test_rhat_flags_threshold():
    cfg = McmcConfig(n_chains=2, n_warmup=30, n_draws=30, seed=1)
    draws = run_mcmc(TWO_SITES, HyperPriorSpec(0.1, 0.1), cfg)
    flagged = draws.rhat_flags(threshold=0.5)  # everything
    assert set(flagged) == set(draws.diagnostics)
    assert draws.rhat_flags(threshold=math.inf) == {}


def test_point_mass_draws():
    draws = point_mass_draws(2.0, 1.0, 100)
    assert (draws.alpha == 2.0).all() and (draws.beta == 1.0).all()
    assert draws.n_samples == 100
    with pytest.raises(ValueError):
        point_mass_draws(-1.0, 1.0, 10)


def test_export_draws(tmp_path):
    cfg = McmcConfig(n_chains=2, n_warmup=10, n_draws=5, seed=0)
    draws = run_mcmc(TWO_SITES, HyperPriorSpec(0.1, 0.1), cfg)
    path = tmp_path / "draws.csv"
    export_draws(draws, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "chain,draw,parameter,value"
    assert len(lines) == 1 + 2 * 5 * (2 + 2)  # chains x draws x (hyper + sites)
    first = lines[1].split(",")
    assert first[:3] == ["0", "0", "alpha"]
    assert float(first[3]) == draws.alpha[0, 0]

    path2 = tmp_path / "frozen.csv"
    export_draws(draws, path2, include_hyperparams=False)
    body = path2.read_text()
    assert "alpha" not in body.split("\n", 1)[1]
    assert len(body.splitlines()) == 1 + 2 * 5 * 2
