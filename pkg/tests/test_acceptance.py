"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary lines
also appear at the end of any run that includes this module.  The
replicate-based criteria share one module-scoped cache of fits and take
roughly half an hour on one core.
"""
import math

import numpy as np
import pytest
from scipy import stats

from conftest import state_for, subject, trial
from das28joint import cli
from das28joint.datagen import (TARGET_DISPOSITION, disposition_table, expected_disposition,
                                null_coupling_config, simulate_trial, tempo_like_config)
from das28joint.diagnostics import dic, ess, population_curves, rhat
from das28joint.geweke import GewekeSetup, compare_moments, marginal_conditional, successive_conditional
from das28joint.io import read_trial, write_trial
from das28joint.model import Hyperparams, JointModel, das28_score, eval_trajectory, SubjectEffects
from das28joint.sampler import (McmcConfig, run_analysis, update_dropout_regression,
                                update_dropout_variances, update_gamma,
                                update_subject_linear_effects, update_variances)

pytestmark = pytest.mark.slow

N_REPS = 20
N_PER_ARM = 100              # three arms, 300 subjects
LATE_WEEKS = np.arange(104.0, 157.0, 13.0)
MTX = 1                      # arm with the most inefficacy exits


# ---------------------------------------------------------------- helpers

def moment_z(draws, mean, var):
    """z-scores of the sample mean and of the mean squared deviation about ``mean``."""
    x = np.asarray(draws, dtype=float)
    n = len(x)
    z1 = (x.mean() - mean) / (x.std(ddof=1) / math.sqrt(n))
    sq = (x - mean) ** 2
    z2 = (sq.mean() - var) / (sq.std(ddof=1) / math.sqrt(n))
    return abs(z1), abs(z2)


def iterate(update, state, model, n, take):
    out = []
    for _ in range(n):
        update(state, model)
        out.append(np.array(take(state), dtype=float).ravel())
    return np.array(out)


def gaussian_moments(X, y, noise_var, prior_mean, prior_var):
    prec = X.T @ X / noise_var + np.diag(1.0 / prior_var)
    cov = np.linalg.inv(prec)
    return cov @ (X.T @ y / noise_var + prior_mean / prior_var), cov


def hyper(q=3):
    return Hyperparams([[1.8, 0.1, -0.1], [-0.03, 0.01, 0.0], [0.0, 0.001, 0.0], [12.0, 2.0, 1.0]],
                       0.04, [0.09, 4e-4, 1e-5, 9.0],
                       [[5.0, 0.2, -0.1], [5.5, -0.3, 0.1]],
                       [[-1.0, -10.0, -250.0], [-2.0, -20.0, -500.0]] if q == 3 else np.zeros((2, q)),
                       [[1.2, 1.5, 0.9], [0.8, 1.1, 1.3]])


def curve_at(gamma, arm, weeks):
    z = np.zeros(gamma.shape[1])
    z[0] = 1.0
    if arm:
        z[arm] = 1.0
    return np.exp(eval_trajectory(SubjectEffects(*(gamma @ z)), weeks))


# ---------------------------------------------------------------- fit cache

def _fit_replicates(gen_factory, seed0):
    fits = []
    for r in range(N_REPS):
        gen = gen_factory(n_per_arm=N_PER_ARM)
        data, _ = simulate_trial(gen, seed0 + r)
        rep = {"data": data, "truth": gen.truth}
        for variant in (1, 6):
            chains = run_analysis(McmcConfig(variant=variant, seed=seed0 + r), data)
            rep[variant] = chains
            rep[f"dic{variant}"] = dic(chains, data).dic
        fits.append(rep)
    return fits


@pytest.fixture(scope="module")
def coupled_fits():
    return _fit_replicates(tempo_like_config, 1000)


@pytest.fixture(scope="module")
def null_fits():
    return _fit_replicates(null_coupling_config, 2000)


# ---------------------------------------------------------------- 1

def test_criterion_1_das28_endpoints(acceptance):
    low = das28_score(0, 0, 2, 0)
    high = das28_score(28, 28, 100, 100)
    ok = abs(low - 0.49) <= 0.01 and abs(high - 9.07) <= 0.01
    acceptance(1, ok, f"das28 range [{low:.4f}, {high:.4f}] vs [0.49, 9.07] +-0.01")
    assert ok


# ---------------------------------------------------------------- 2

N_CONJ = 50_000


def _effects_oracle():
    weeks = np.array([0.0, 8.0, 24.0, 52.0])
    y = np.array([1.9, 1.6, 1.4, 1.5])
    kappa = 12.0
    data = trial([subject("a", x=(1, 0), visits=list(zip(weeks, y)))])
    model = JointModel(data, 6)
    h = hyper()
    st = state_for(model, [1.8, -0.03, 0.0, kappa], h, seed=21)
    u = np.array([np.log(200.0), np.log(300.0)])
    st.effects.log_dropout = u[None, :].copy()
    draws = iterate(update_subject_linear_effects, st, model, N_CONJ,
                    lambda s: s.effects.as_matrix()[0, :3])
    # longitudinal rows plus one pseudo-row per risk from the dropout regression
    X = np.column_stack([np.ones(4), np.minimum(weeks, kappa), np.maximum(weeks - kappa, 0.0)])
    z = np.array([1.0, 1.0, 0.0])
    prior_mean = (h.gamma @ z)[:3]
    prec = X.T @ X / h.sigma2_resid + np.diag(1.0 / h.sigma2_effects[:3])
    lin = X.T @ y / h.sigma2_resid + prior_mean / h.sigma2_effects[:3]
    for k in range(2):
        v = h.varsigma2[k, 1]
        prec += np.outer(h.omega[k], h.omega[k]) / v
        lin += h.omega[k] * (u[k] - h.phi[k] @ z) / v
    cov = np.linalg.inv(prec)
    return draws, cov @ lin, np.diag(cov)


def _gamma_oracle():
    rng = np.random.default_rng(22)
    subs = [subject(f"s{i}", x=[(0, 0), (1, 0), (0, 1)][i % 3]) for i in range(12)]
    model = JointModel(trial(subs), 1)
    eff = rng.normal([1.8, -0.03, 0.0, 12.0], [0.3, 0.02, 0.01, 3.0], size=(12, 4))
    h = hyper(0)
    st = state_for(model, eff, h, seed=23)
    draws = iterate(update_gamma, st, model, N_CONJ, lambda s: s.hyper.gamma)
    Z = np.column_stack([np.ones(12), [(i % 3) == 1 for i in range(12)], [(i % 3) == 2 for i in range(12)]])
    means, variances = [], []
    for level in range(4):
        pm, pv = (12.0, 100.0) if level == 3 else (0.0, 1000.0)
        m, c = gaussian_moments(Z, eff[:, level], h.sigma2_effects[level], np.full(3, pm), np.full(3, pv))
        means.append(m)
        variances.append(np.diag(c))
    return draws, np.concatenate(means), np.concatenate(variances)


def _invgamma_moments(shape, rate):
    return rate / (shape - 1), rate ** 2 / ((shape - 1) ** 2 * (shape - 2))


def _variance_oracle():
    rng = np.random.default_rng(24)
    n = 30
    weeks = [0.0, 12.0, 24.0]
    eff = rng.normal([1.8, -0.03, 0.0, 12.0], [0.3, 0.02, 0.01, 3.0], size=(n, 4))
    subs = []
    for i in range(n):
        mu = eval_trajectory(SubjectEffects(*eff[i]), np.array(weeks))
        t_ae = float(rng.uniform(30, 150))
        subs.append(subject(f"s{i}", x=[(0, 0), (1, 0), (0, 1)][i % 3],
                            visits=list(zip(weeks, mu + rng.normal(0, 0.2, 3))),
                            ae=(t_ae, True), effy=(t_ae, False)))
    model = JointModel(trial(subs), 6)
    h = hyper()
    st = state_for(model, eff, h, seed=25)
    st.effects.log_dropout = model.packed.log_time + rng.uniform(0.1, 1.0, (n, 2))

    def both(s, m):
        update_variances(s, m)
        update_dropout_variances(s, m)

    draws = iterate(both, st, model, N_CONJ,
                    lambda s: np.concatenate([[s.hyper.sigma2_resid], s.hyper.sigma2_effects,
                                              s.hyper.varsigma2.ravel()]))
    # residual sum of squares on the visit grid
    ss = 0.0
    for i, s in enumerate(subs):
        w, yv = np.array([v[0] for v in s.visits]), np.array([v[1] for v in s.visits])
        ss += ((yv - eval_trajectory(SubjectEffects(*eff[i]), w)) ** 2).sum()
    shapes = [0.01 + 1.5 * n]
    rates = [0.01 + 0.5 * ss]
    Z = np.column_stack([np.ones(n), [(i % 3) == 1 for i in range(n)], [(i % 3) == 2 for i in range(n)]])
    resid = eff - Z @ h.gamma.T
    shapes += [0.01 + 0.5 * n] * 4
    rates += list(0.01 + 0.5 * (resid ** 2).sum(axis=0))
    # complete log times: observed AE event, imputed EFFY
    u = np.column_stack([model.packed.log_time[:, 0], st.effects.log_dropout[:, 1]])
    theta = Z @ h.phi.T + eff[:, :3] @ h.omega.T
    group = np.arange(n) % 3
    for k in range(2):
        for g in range(3):
            r = u[group == g, k] - theta[group == g, k]
            shapes.append(0.01 + 0.5 * len(r))
            rates.append(0.01 + 0.5 * (r ** 2).sum())
    mom = [_invgamma_moments(a, b) for a, b in zip(shapes, rates)]
    return draws, np.array([m[0] for m in mom]), np.array([m[1] for m in mom])


def _dropout_oracle():
    rng = np.random.default_rng(26)
    n = 24
    x = [(0, 0), (1, 0), (0, 1)]
    eff = rng.normal([1.8, -0.03, 0.0, 12.0], [0.3, 0.02, 0.004, 3.0], size=(n, 4))
    logt = 4.0 + rng.normal(0, 0.5, n)
    subs = [subject(f"s{i}", x=x[i % 3], ae=(float(np.exp(logt[i])), True),
                    effy=(float(np.exp(logt[i])), False)) for i in range(n)]
    model = JointModel(trial(subs, end=1e9), 6)
    h = hyper()
    st = state_for(model, eff, h, seed=27)
    st.effects.log_dropout = np.column_stack([logt, logt + rng.uniform(0.1, 1.0, n)])
    draws = iterate(update_dropout_regression, st, model, N_CONJ,
                    lambda s: np.concatenate([s.hyper.phi, s.hyper.omega], axis=1))
    Z = np.column_stack([np.ones(n), [(i % 3) == 1 for i in range(n)], [(i % 3) == 2 for i in range(n)]])
    X = np.column_stack([Z, eff[:, :3]])
    group = np.arange(n) % 3
    u = np.column_stack([logt, st.effects.log_dropout[:, 1]])
    means, variances = [], []
    for k in range(2):
        w = 1.0 / h.varsigma2[k, group]
        prec = (X.T * w) @ X + np.eye(6) / 1000.0
        cov = np.linalg.inv(prec)
        means.append(cov @ (X.T @ (w * u[:, k])))
        variances.append(np.diag(cov))
    return draws, np.concatenate(means), np.concatenate(variances)


def test_criterion_2_conjugate_updates(acceptance):
    worst = {}
    for name, oracle in (("effects", _effects_oracle), ("gamma", _gamma_oracle),
                         ("variances", _variance_oracle), ("dropout regression", _dropout_oracle)):
        draws, mean, var = oracle()
        z = [moment_z(draws[:, j], mean[j], var[j]) for j in range(draws.shape[1])]
        worst[name] = max(max(p) for p in z)
    ok = max(worst.values()) < 3.0
    acceptance(2, ok, "max |z| (mean, 2nd moment) per update: "
               + ", ".join(f"{k} {v:.2f}" for k, v in worst.items()) + " < 3")
    assert ok


# ---------------------------------------------------------------- 3

N_GEWEKE = 100_000


def test_criterion_3_geweke(acceptance):
    worst = {}
    for variant in (6, 2):
        setup = GewekeSetup(variant)
        _, prior = marginal_conditional(setup, N_GEWEKE, seed=31)
        _, chain = successive_conditional(setup, N_GEWEKE, seed=32)
        z = compare_moments(prior, chain)
        worst[variant] = float(max(np.nanmax(np.abs(z["mean"])), np.nanmax(np.abs(z["second"]))))
    ok = max(worst.values()) < 4.0
    acceptance(3, ok, "max |z| over hyperparameter means/second moments: "
               + ", ".join(f"model {v} {w:.2f}" for v, w in worst.items()) + " < 4")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_parameter_recovery(coupled_fits, acceptance):
    hits = np.zeros((4, 3), dtype=int)
    worst_rhat, worst_ess = 0.0, np.inf
    for rep in coupled_fits:
        chains = rep[6]
        g = np.stack([c.hyper_draws["gamma"] for c in chains])        # (chains, draws, 4, p)
        lo, hi = np.quantile(g.reshape(-1, 4, 3), [0.025, 0.975], axis=0)
        hits += (lo <= rep["truth"].gamma) & (rep["truth"].gamma <= hi)
        for l in range(4):
            for j in range(3):
                worst_rhat = max(worst_rhat, rhat(g[:, :, l, j]))
                worst_ess = min(worst_ess, ess(g[:, :, l, j]))
    ok = hits.min() >= 16 and worst_rhat < 1.1 and worst_ess > 200
    acceptance(4, ok, f"min coverage {hits.min()}/{N_REPS} (>=16), max R-hat {worst_rhat:.3f} (<1.1), "
               f"min ESS {worst_ess:.0f} (>200)")
    print("coverage by gamma coefficient (rows alpha, beta1, beta2, kappa):\n", hits)
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_dic_ordering(coupled_fits, null_fits, acceptance):
    strong = [rep["dic6"] - rep["dic1"] for rep in coupled_fits]
    null = [rep["dic6"] - rep["dic1"] for rep in null_fits]
    wins = sum(d < 0 for d in strong)
    null_wins = sum(d < 0 for d in null)
    p = stats.binomtest(null_wins, len(null), 0.5).pvalue
    ok = wins >= 18 and p >= 0.05
    acceptance(5, ok, f"coupled: DIC6 < DIC1 in {wins}/{N_REPS} (>=18); "
               f"uncoupled: DIC6 < DIC1 in {null_wins}/{N_REPS}, binomial p = {p:.3g} (>=0.05)")
    print("coupled DIC6 - DIC1:", np.round(strong, 1))
    print("uncoupled DIC6 - DIC1:", np.round(null, 1))
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_bias_direction(coupled_fits, acceptance):
    ok_reps = 0
    for rep in coupled_fits:
        truth = curve_at(rep["truth"].gamma, MTX, LATE_WEEKS)
        c1 = population_curves(rep[1], rep["data"], MTX, LATE_WEEKS)["mean"].to_numpy()
        c6 = population_curves(rep[6], rep["data"], MTX, LATE_WEEKS)["mean"].to_numpy()
        ok_reps += bool(np.all(c1 < truth) and np.all(c1 < c6))
    ok = ok_reps >= 18
    acceptance(6, ok, f"MTX arm, weeks {LATE_WEEKS[0]:.0f}-{LATE_WEEKS[-1]:.0f}: separate-model curve "
               f"below truth and all-shared curve in {ok_reps}/{N_REPS} (>=18)")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_disposition_calibration(acceptance):
    gen = tempo_like_config()
    expected = expected_disposition(gen, n_per_arm=100_000, seed=71)
    single, _ = simulate_trial(gen, 0)
    observed = disposition_table(single)
    ref = TARGET_DISPOSITION["Total"]
    gaps = {}
    for label, df in (("expected", expected), ("single trial", observed)):
        tot = df[df.arm == "Total"].set_index("cause")["percent"]
        gaps[label] = max(abs(tot[c] - ref[c]) for c in ("COMPLETED", "AE", "EFFY"))
    effy = expected[expected.cause == "EFFY"].set_index("arm")["percent"]
    ordered = effy["MTX"] > effy["ETAN"] > effy["MTX+ETAN"]
    ok = max(gaps.values()) <= 5.0 and ordered
    acceptance(7, ok, "max |total - reference| over completed/AE/inefficacy: "
               + ", ".join(f"{k} {v:.1f} pp" for k, v in gaps.items())
               + f" (<=5); inefficacy MTX {effy['MTX']:.1f} > ETAN {effy['ETAN']:.1f} > "
               f"MTX+ETAN {effy['MTX+ETAN']:.1f}: {ordered}")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism_and_round_trip(tmp_path, acceptance):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("iterations = 400\nburn_in = 200\nthin = 2\nn_per_arm = 15\n")
    dirs = [tmp_path / "sim_a", tmp_path / "sim_b"]
    for d in dirs:
        assert cli.run(["simulate", "--config", str(cfg), "--seed", "8", "--out", str(d)]) == 0
    fits = [tmp_path / "fit_a", tmp_path / "fit_b"]
    for d, f in zip(dirs, fits):
        assert cli.run(["fit", "--config", str(cfg), "--data", str(d), "--variant", "1,6",
                        "--out", str(f)]) == 0
    names = ["longitudinal.csv", "subjects.csv", "disposition.csv", "truth.json", "true_effects.csv"]
    same_sim = all((dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes() for n in names)
    fit_names = ["dic.csv", "summary.csv", "convergence.csv", "curves.csv", "curves.svg",
                 "disposition.csv", "draws.npz"]
    same_fit = all((fits[0] / n).read_bytes() == (fits[1] / n).read_bytes() for n in fit_names)

    data, _ = simulate_trial(tempo_like_config(), 81)
    write_trial(data, tmp_path / "rt")
    lossless = read_trial(tmp_path / "rt") == data
    ok = same_sim and same_fit and lossless
    acceptance(8, ok, f"byte-identical simulate {same_sim}, fit {same_fit}; "
               f"682-subject write/read round trip lossless {lossless}")
    assert ok
