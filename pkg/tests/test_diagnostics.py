import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import subject, trial
from das28joint import datagen
from das28joint.diagnostics import (DiagnosticsError, deviance, dic, dic_from_deviance, ess,
                                    ess_and_acf, population_curves, rhat, summarize)
from das28joint.model import (Hyperparams, JointModel, ModelVariant, Priors, SubjectEffects,
                              loglik_dropout, loglik_longitudinal)
from das28joint.sampler import ChainOutput, McmcConfig, run_analysis


def make_chain(hypers, effects, data, variant, index=0):
    variant = ModelVariant.parse(variant)
    model = JointModel(data, variant)
    keys = ("gamma", "sigma2_resid", "sigma2_effects", "phi", "omega", "varsigma2")
    draws = {k: np.array([getattr(h, k) for h in hypers]) for k in keys}
    dev = np.array([model.deviance(SubjectEffects.from_matrix(e), h) for h, e in zip(hypers, effects)])
    return ChainOutput(draws, np.array(effects), dev, {}, {}, {}, 0, index, variant, {})


def base_hyper(q=0):
    return Hyperparams([[1.8, 0.1, -0.1], [-0.03, 0, 0], [0.0, 0, 0], [12.0, 0, 0]], 0.04,
                       [0.04, 1e-4, 1e-5, 4.0], [[4.0, 0, 0], [4.2, 0, 0]], np.zeros((2, q)),
                       np.full((2, 3), 0.8))


def fixture_data():
    return trial([subject("a", (0, 0), [(0.0, 1.8), (12.0, 1.5)], ae=(30.0, True), effy=(30.0, False)),
                  subject("b", (1, 0), [(0.0, 2.0)], ae=(156.0, False), effy=(156.0, False)),
                  subject("c", (0, 1), [(0.0, 1.7), (4.0, 1.6), (40.0, 1.2)],
                          ae=(50.0, False), effy=(50.0, True))])


# ---------------------------------------------------------------- deviance

def test_deviance_empty_trial():
    assert deviance(SubjectEffects.from_matrix(np.zeros((0, 4))), base_hyper(), trial([]), 1) == 0.0


def test_deviance_single_visit_at_mean():
    data = trial([subject("a", visits=[(0.0, 1.0)])])
    h = base_hyper()
    h.sigma2_resid = 1.0
    h.phi[:, 0] = 60.0  # survival probability 1 to machine precision: no dropout term
    h.varsigma2[:] = 0.01
    eff = SubjectEffects.from_matrix([[1.0, 0.0, 0.0, 12.0]])
    assert deviance(eff, h, data, 1) == pytest.approx(math.log(2 * math.pi), rel=1e-12)


@pytest.mark.parametrize("variant", [1, 2, 6])
def test_deviance_is_sum_of_subject_terms(variant):
    data = fixture_data()
    q = ModelVariant(variant).nu_dim
    h = base_hyper(q)
    if q:
        h.omega[:] = 0.3
    eff = np.array([[1.8, -0.02, 0.0, 10.0], [2.0, -0.01, 0.0, 12.0], [1.7, -0.03, 0.001, 8.0]])
    expected = 0.0
    for i, s in enumerate(data.subjects):
        e = SubjectEffects(*eff[i])
        expected += loglik_longitudinal(s, e, h.sigma2_resid)
        expected += loglik_dropout(s, e, h, variant, "marginal", horizon=156.0)
    got = deviance(SubjectEffects.from_matrix(eff), h, data, variant)
    assert got == pytest.approx(-2 * expected, rel=1e-12)


def test_deviance_ignores_priors():
    data = fixture_data()
    eff = SubjectEffects.from_matrix(np.tile([1.8, -0.02, 0.0, 10.0], (3, 1)))
    h = base_hyper(3)
    shifted = Priors(gamma_mean=(5.0, 5.0, 5.0, 30.0), phi_mean=3.0, omega_mean=-2.0)
    a, b = JointModel(data, 6), JointModel(data, 6, shifted)
    assert a.log_prior(eff, h) != b.log_prior(eff, h)
    assert a.deviance(eff, h) == b.deviance(eff, h)


# ---------------------------------------------------------------- DIC

def test_degenerate_chain_has_no_effective_parameters():
    data = fixture_data()
    h = base_hyper(3)
    e = np.tile([1.8, -0.02, 0.0, 10.0], (3, 1))
    chain = make_chain([h] * 20, [e] * 20, data, 6)
    r = dic([chain], data)
    assert r.p_d == pytest.approx(0.0, abs=1e-9)
    assert r.dic == pytest.approx(r.dbar, rel=1e-12)


def test_dic_identity_exact():
    r = dic_from_deviance([10.0, 12.5, 11.25], 9.0)
    assert r.dic == 2 * r.dbar - r.d_at_mean
    assert r.p_d == r.dbar - r.d_at_mean


def test_dic_empty_chains_rejected():
    with pytest.raises(DiagnosticsError):
        dic_from_deviance([], 0.0)
    with pytest.raises(DiagnosticsError):
        dic([], fixture_data())


def test_conjugate_normal_mean_effective_parameters():
    # y_i ~ N(mu, 1), mu ~ N(0, 1/tau): p_d = n / (n + tau)
    rng = np.random.default_rng(5)
    n, tau = 20, 5.0
    y = rng.normal(1.0, 1.0, n)
    post_var = 1.0 / (n + tau)
    post_mean = y.sum() * post_var
    mu = rng.normal(post_mean, math.sqrt(post_var), 200_000)

    def dev(m):
        return n * math.log(2 * math.pi) + ((y[None, :] - np.atleast_1d(m)[:, None]) ** 2).sum(axis=1)

    r = dic_from_deviance(dev(mu), float(dev(mu.mean())[0]))
    # p_d = n * Var(mu) estimated from the draws; MC error of a variance ~ sqrt(2/N)
    tol = 3 * n * post_var * math.sqrt(2 / len(mu))
    assert r.p_d == pytest.approx(n / (n + tau), abs=tol)


def test_joint_model_beats_separate_on_coupled_data():
    gen = datagen.tempo_like_config(n_per_arm=100)
    data, _ = datagen.simulate_trial(gen, 7)
    cfg = McmcConfig(iterations=3000, burn_in=1500, thin=3, n_chains=2, seed=1)
    d6 = dic(run_analysis(cfg, data), data)
    d1 = dic(run_analysis(replace(cfg, variant=1), data), data)
    assert d6.dic < d1.dic


# ---------------------------------------------------------------- R-hat

def test_rhat_equal_means_formula():
    half = 50
    pattern = np.tile([1.0, -1.0], half)     # every half-chain has mean 0
    chains = np.stack([pattern, -pattern])
    assert rhat(chains) == pytest.approx(math.sqrt((half - 1) / half), rel=1e-12)


def test_rhat_iid_chains(rng):
    assert rhat(rng.normal(size=(2, 10_000))) < 1.01


def test_rhat_offset_chains(rng):
    x = rng.normal(size=(2, 1000))
    x[1] += 10.0
    assert rhat(x) > 2


def test_rhat_guards():
    assert math.isnan(rhat(np.ones((2, 20))))
    with pytest.raises(DiagnosticsError):
        rhat(np.zeros((2, 7)))


# ---------------------------------------------------------------- ESS / ACF

def test_ess_iid(rng):
    n = 10_000
    assert ess(rng.normal(size=n)) == pytest.approx(n, rel=0.15)


def test_ess_ar1(rng):
    n, rho = 100_000, 0.9
    e = rng.normal(size=n)
    x = np.empty(n)
    x[0] = e[0] / math.sqrt(1 - rho ** 2)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    val, acf = ess_and_acf(x, max_lag=3)
    assert val == pytest.approx(n * (1 - rho) / (1 + rho), rel=0.25)
    assert acf[0] == pytest.approx(rho, abs=0.02)
    assert acf[1] == pytest.approx(rho ** 2, abs=0.03)


def test_acf_constant_series_is_flagged():
    val, acf = ess_and_acf(np.full(50, 3.0))
    assert math.isnan(val) and np.all(np.isnan(acf))


def test_ess_needs_ten_draws():
    with pytest.raises(DiagnosticsError):
        ess(np.arange(9.0))


def test_ess_capped_at_draw_count():
    x = np.tile([1.0, -1.0], 500)  # negatively correlated
    assert ess(x) <= 1000


# ---------------------------------------------------------------- summaries

def _iid_chains(rng, n=20_000, m=2):
    data = fixture_data()
    chains = []
    for c in range(m):
        hs = []
        for _ in range(n):
            h = base_hyper()
            h.gamma[0, 0] = rng.standard_normal()
            hs.append(h)
        draws = {k: np.array([getattr(h, k) for h in hs]) for k in
                 ("gamma", "sigma2_resid", "sigma2_effects", "phi", "omega", "varsigma2")}
        chains.append(ChainOutput(draws, np.zeros((n, 3, 4)), np.zeros(n), {}, {}, {}, 0, c,
                                  ModelVariant.SEPARATE, {}))
    return data, chains


def test_summary_of_iid_normal(rng):
    _, chains = _iid_chains(rng)
    s = summarize(chains)
    row = s.loc["gamma_alpha[0]"]
    se = 1 / math.sqrt(40_000)
    assert abs(row["mean"]) < 3 * se
    assert row["q97.5"] == pytest.approx(1.96, abs=0.04)
    assert row["q2.5"] <= row["q50"] <= row["q97.5"]
    assert row["ess"] <= 40_000


def test_summary_single_draw():
    data = fixture_data()
    h = base_hyper()
    chain = make_chain([h], [np.zeros((3, 4))], data, 1)
    s = summarize([chain])
    assert s.loc["gamma_alpha[0]", "mean"] == 1.8
    assert math.isnan(s.loc["gamma_alpha[0]", "sd"])


def test_summary_invariant_to_chain_order(rng):
    _, chains = _iid_chains(rng, n=500)
    a = summarize(chains)
    b = summarize(chains[::-1])
    cols = ["mean", "sd", "q2.5", "q50", "q97.5", "rhat"]
    assert np.allclose(a[cols].to_numpy(), b[cols].to_numpy(), rtol=1e-12, equal_nan=True)


def test_summary_contains_every_hyperparameter_and_optional_effects():
    data, _ = datagen.simulate_trial(datagen.tempo_like_config(n_per_arm=5), 0)
    chains = run_analysis(McmcConfig(iterations=100, burn_in=50, thin=1, seed=0), data)
    s = summarize(chains)
    assert set(s.index) == set(chains[0].hyper(0).flat())
    s2 = summarize(chains, include_effects=True)
    assert "kappa[14]" in s2.index and 0 <= s2.loc["kappa[0]", "acceptance"] <= 1


# ---------------------------------------------------------------- population curves

def test_curves_degenerate_posterior():
    data = fixture_data()
    h = base_hyper()
    h.gamma[:, 1] = [0.05, 0.01, 0.0, 2.0]
    chain = make_chain([h] * 10, [np.zeros((3, 4))] * 10, data, 1)
    grid = np.array([0.0, 10.0, 20.0, 156.0])
    df = population_curves([chain], data, 1, grid)
    a, b1, b2, k = h.gamma[:, 0] + h.gamma[:, 1]
    expected = np.exp(a + b1 * np.minimum(grid, k) + b2 * np.maximum(grid - k, 0))
    assert np.allclose(df["mean"], expected, rtol=1e-12)
    assert np.allclose(df["upper"] - df["lower"], 0.0, atol=1e-12)


def test_curves_baseline_identity(rng):
    data = fixture_data()
    hs = []
    for _ in range(30):
        h = base_hyper()
        h.gamma[0, 0] = rng.normal(1.8, 0.1)
        hs.append(h)
    chain = make_chain(hs, [np.zeros((3, 4))] * 30, data, 1)
    df = population_curves([chain], data, 0, [0.0])
    assert df["mean"].iloc[0] == pytest.approx(np.exp([h.gamma[0, 0] for h in hs]).mean(), rel=1e-12)


def test_curves_argument_checks():
    data = fixture_data()
    chain = make_chain([base_hyper()], [np.zeros((3, 4))], data, 1)
    with pytest.raises(DiagnosticsError):
        population_curves([chain], data, 3, [0.0])
    with pytest.raises(DiagnosticsError):
        population_curves([chain], data, 0, [-1.0])
    with pytest.raises(DiagnosticsError):
        population_curves([chain], data, 0, [200.0])
