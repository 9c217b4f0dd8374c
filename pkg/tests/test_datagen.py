import math

import numpy as np
import pytest

from conftest import subject, trial
from das28joint import datagen
from das28joint.datagen import (GenConfig, disposition_table, expected_disposition, simulate_trial,
                                tempo_like_config)
from das28joint.model import RISKS, Hyperparams


def truth(phi0=4.0, omega=None, q=3):
    return Hyperparams([[1.8, 0.0, 0.0], [-0.03, 0.01, 0.0], [0.0, 0.0, 0.0], [12.0, 0.0, 0.0]],
                       0.02, [0.04, 1e-4, 1e-5, 4.0], [[phi0, 0, 0], [phi0 + 0.3, 0, 0]],
                       np.zeros((2, q)) if omega is None else omega, np.ones((2, 3)))


def test_uncoupled_dropout_independent_of_baseline():
    gen = GenConfig(truth(phi0=4.0), n_per_arm=3000)
    data, gt = simulate_trial(gen, 1)
    end = np.array([min(s.dropout["AE"][0], s.dropout["EFFY"][0]) for s in data.subjects])
    r = np.corrcoef(gt.effects.alpha_baseline, end)[0, 1]
    assert abs(r) < 3 / math.sqrt(len(end))


def test_far_dropout_means_all_complete():
    gen = GenConfig(truth(phi0=30.0), n_per_arm=300)
    data, _ = simulate_trial(gen, 2)
    assert all(s.exit_cause == "COMPLETED" for s in data.subjects)
    assert all(s.dropout[r] == (156.0, False) for s in data.subjects for r in RISKS)
    assert all(len(s.visits) == len(datagen.DEFAULT_VISIT_WEEKS) for s in data.subjects)


def test_disposition_all_completers():
    data = trial([subject(f"s{i}", x=(0, 0)) for i in range(5)])
    df = disposition_table(data).set_index(["arm", "cause"])
    assert df.loc[("Total", "COMPLETED"), "percent"] == 100.0
    assert df.loc[("Total", "AE"), "percent"] == df.loc[("Total", "EFFY"), "percent"] == 0.0
    assert df.loc[("Total", "OTHER"), "percent"] == 0.0


def test_disposition_one_of_each():
    data = trial([subject("a"), subject("b", ae=(10.0, True), effy=(10.0, False)),
                  subject("c", ae=(12.0, False), effy=(12.0, True)),
                  subject("d", ae=(40.0, False), effy=(40.0, False), exit_week=40.0)])
    df = disposition_table(data)
    tot = df[df.arm == "Total"].set_index("cause")["percent"]
    assert tot.to_dict() == {"COMPLETED": 25.0, "AE": 25.0, "EFFY": 25.0, "OTHER": 25.0}
    sums = df[df.n_arm > 0].groupby("arm")["percent"].sum()
    assert np.allclose(sums, 100.0)


def test_shipped_config_single_trial_near_table():
    data, _ = simulate_trial(tempo_like_config(), 0)
    assert data.n_subjects == 682
    tot = disposition_table(data).query("arm == 'Total'").set_index("cause")["percent"]
    ref = datagen.TARGET_DISPOSITION["Total"]
    for cause in ("COMPLETED", "AE", "EFFY"):
        assert abs(tot[cause] - ref[cause]) <= 5.0, cause


def test_expected_disposition_matches_config_arms():
    df = expected_disposition(tempo_like_config(), n_per_arm=20_000, seed=3)
    effy = df[df.cause == "EFFY"].set_index("arm")["percent"]
    assert effy["MTX"] > effy["ETAN"] > effy["MTX+ETAN"]


@pytest.mark.parametrize("variant", [1, 2, 6])
def test_structural_invariants(variant):
    q = {1: 0, 2: 1, 6: 3}[variant]
    om = np.full((2, q), -0.5 if variant == 2 else 0.0)
    if variant == 6:
        om[:, 1] = -20.0
    gen = GenConfig(truth(phi0=4.3, omega=om, q=q), variant=variant, n_per_arm=200,
                    noninformative_hazard=0.002)
    data, gt = simulate_trial(gen, 5)
    latent = np.exp(gt.latent_log_dropout)
    for i, s in enumerate(data.subjects):
        events = [r for r in RISKS if s.dropout[r][1]]
        assert len(events) <= 1
        cause = s.exit_cause
        assert cause == gt.cause[i]
        if cause in RISKS:
            t = s.dropout[cause][0]
            assert t == pytest.approx(latent[i].min())
            assert RISKS[int(latent[i].argmin())] == cause
            assert all(w < t for w, _ in s.visits)
            other = [r for r in RISKS if r != cause][0]
            assert s.dropout[other] == (t, False)
        elif cause == "OTHER":
            assert all(s.dropout[r] == (s.noninformative_exit_week, False) for r in RISKS)
            assert all(w < s.noninformative_exit_week for w, _ in s.visits)
            assert latent[i].min() >= s.noninformative_exit_week
        else:
            assert all(s.dropout[r] == (156.0, False) for r in RISKS)
            assert latent[i].min() >= 156.0
    if variant == 2:
        assert gt.fixed_point_converged.all()


def test_simulation_is_deterministic():
    a, ta = simulate_trial(tempo_like_config(n_per_arm=30), 11)
    b, tb = simulate_trial(tempo_like_config(n_per_arm=30), 11)
    assert a == b
    assert np.array_equal(ta.latent_log_dropout, tb.latent_log_dropout)
    c, _ = simulate_trial(tempo_like_config(n_per_arm=30), 12)
    assert a != c


def test_effect_moments_converge_to_prior():
    n = 10_000
    gen = GenConfig(truth(), n_per_arm=n)
    _, gt = simulate_trial(gen, 9)
    e = gt.effects.as_matrix()
    h = gen.truth
    for g in range(3):
        sl = slice(g * n, (g + 1) * n)
        mean = h.gamma[:, 0] + (h.gamma[:, g] if g else 0.0)
        for l in range(4):
            sd = math.sqrt(h.sigma2_effects[l])
            assert abs(e[sl, l].mean() - mean[l]) < 3 * sd / math.sqrt(n)
            # variance of a sample variance for normal data: 2 s^4 / (n - 1)
            assert abs(e[sl, l].var(ddof=1) - sd ** 2) < 3 * sd ** 2 * math.sqrt(2 / (n - 1))


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(truth(), visit_weeks=(1, 2, 3))
    with pytest.raises(ValueError):
        GenConfig(truth(), visit_weeks=(0, 5, 5))
    with pytest.raises(ValueError):
        GenConfig(truth(q=1))  # omega width does not match the default variant
    bad = truth()
    bad.sigma2_resid = 0.0
    with pytest.raises(ValueError):
        GenConfig(bad)
