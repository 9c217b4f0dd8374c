"""Joint-distribution ("getting it right") checks of the sampler.

Two simulators of the joint law of (parameters, data) must agree on the
marginals of the hyperparameters:

* marginal-conditional: hyperparameters straight from the prior;
* successive-conditional: alternate one simulated data set given the current
  subject effects with one sampler sweep given that data.

Any error in a full conditional shows up as a mismatch of moments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import design_for_arms, packed_from_arrays, simulate_given_effects
from .diagnostics import ess
from .model import Hyperparams, JointModel, ModelVariant, Priors, SubjectEffects
from .sampler import SamplerState, make_rngs, sweep


def geweke_priors(variant) -> Priors:
    """Proper, informative priors that keep simulated trials in a sane range."""
    variant = ModelVariant.parse(variant)
    if variant is ModelVariant.TRAJECTORY_AT_DROPOUT:
        omega_var = [[0.01], [0.01]]
    else:
        scale = np.array([0.05, 100.0, 2500.0])[list(variant.shared_index)]
        omega_var = np.tile(scale, (2, 1)) if len(scale) else 1.0
    return Priors(
        gamma_mean=(1.8, -0.05, 0.0, 10.0),
        gamma_var=(0.04, 1e-4, 1e-5, 4.0),
        phi_mean=[3.6, 3.8],
        phi_var=0.25,
        omega_mean=0.0,
        omega_var=omega_var,
        resid_ig=(6.0, 0.25),
        effects_ig=((6.0, 0.2), (6.0, 5e-4), (6.0, 5e-5), (6.0, 20.0)),
        dropout_ig=(6.0, 2.5),
    )


def draw_prior_hyper(priors: Priors, variant, p: int, n_groups: int, rng) -> Hyperparams:
    variant = ModelVariant.parse(variant)
    q = variant.nu_dim
    gm, gv = priors.gamma_moments(p)
    pm, pv = priors.phi_moments(p)
    gamma = gm + np.sqrt(gv) * rng.standard_normal(gm.shape)
    phi = pm + np.sqrt(pv) * rng.standard_normal(pm.shape)
    if q:
        om, ov = priors.omega_moments(q)
        omega = om + np.sqrt(ov) * rng.standard_normal(om.shape)
    else:
        omega = np.zeros((2, 0))

    def ig(shape, rate, size=None):
        return rate / rng.gamma(shape, size=size)

    s2 = ig(*priors.resid_ig)
    s2e = np.array([ig(a, b) for a, b in priors.effects_ig])
    vs = ig(*priors.dropout_ig, size=(2, n_groups))
    return Hyperparams(gamma, s2, s2e, phi, omega, vs)


@dataclass
class GewekeSetup:
    variant: ModelVariant
    arm_sizes: tuple = (3, 2)
    visit_weeks: tuple = (0.0, 6.0, 16.0)
    study_end_week: float = 26.0
    kappa_step: float = 3.0
    effects_step: float = 1.0

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)
        self.priors = geweke_priors(self.variant)
        self.x = design_for_arms(self.arm_sizes)
        self.p = self.x.shape[1] + 1
        self.n_groups = len(self.arm_sizes)


def marginal_conditional(setup: GewekeSetup, n: int, seed: int):
    """(names, (n, P)) hyperparameter draws from the prior."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    rows = [draw_prior_hyper(setup.priors, setup.variant, setup.p, setup.n_groups, rng).flat()
            for _ in range(n)]
    names = list(rows[0])
    return names, np.array([[r[k] for k in names] for r in rows])


def _effects_from_prior(hyper: Hyperparams, x, rng):
    Z = np.column_stack([np.ones(len(x)), x])
    return Z @ hyper.gamma.T + np.sqrt(hyper.sigma2_effects) * rng.standard_normal((len(x), 4))


def successive_conditional(setup: GewekeSetup, n: int, seed: int):
    """(names, (n, P)) hyperparameter draws from the data/sweep alternation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    hyper = draw_prior_hyper(setup.priors, setup.variant, setup.p, setup.n_groups, rng)
    eff = _effects_from_prior(hyper, setup.x, rng)
    N = len(setup.x)
    state = SamplerState(SubjectEffects.from_matrix(eff), hyper,
                         np.full(N, setup.kappa_step), np.full(N, setup.effects_step),
                         make_rngs(seed, 2))
    names = list(hyper.flat())
    out = np.empty((n, len(names)))
    for it in range(n):
        sim = simulate_given_effects(state.hyper, setup.variant, setup.x, state.effects.as_matrix(),
                                     setup.visit_weeks, setup.study_end_week, 0.0, rng)
        packed = packed_from_arrays(sim, setup.study_end_week, setup.p)
        model = JointModel(packed, setup.variant, setup.priors)
        # the latent complete-data times are part of the joint state
        state.effects.log_dropout = sim["latent_log_dropout"].copy()
        sweep(state, model)
        out[it] = list(state.hyper.flat().values())
    return names, out


def compare_moments(a, b, b_ess=None):
    """z-scores of the differences of means and of second moments, per column.

    ``a`` holds independent draws; MC standard errors of ``b`` use ``b_ess``
    (defaults to an ESS estimate per column).
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    z = {}
    for label, fa, fb in (("mean", a, b), ("second", a ** 2, b ** 2)):
        n_eff = b_ess if b_ess is not None else np.array([ess(fb[:, j]) for j in range(fb.shape[1])])
        se = np.sqrt(fa.var(axis=0, ddof=1) / len(fa) + fb.var(axis=0, ddof=1) / n_eff)
        with np.errstate(invalid="ignore", divide="ignore"):
            z[label] = (fa.mean(axis=0) - fb.mean(axis=0)) / se
    return z
