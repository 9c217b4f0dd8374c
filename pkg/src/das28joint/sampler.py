"""Metropolis-within-Gibbs sampler for the joint model.

Update cycle (one iteration):

1. impute censored log dropout times (exact truncated normal; MH-corrected
   for the trajectory-at-dropout link),
2. subject effects (alpha_baseline, beta1, beta2): exact trivariate Gaussian
   draw, or joint random-walk MH for the trajectory-at-dropout link,
3. change points: per-subject adaptive random-walk MH; for the conjugate
   links the move also redraws the linear effects from their conditional at
   the proposed change point (collapsed acceptance ratio),
4. population regressions gamma,
5. residual and subject-level variances,
6. dropout regressions (phi, omega),
7. dropout variances,
8. collapsed random-walk moves on each risk's (phi, omega, log variances)
   with the censored times integrated out, then a fresh imputation
   (conjugate links only; adapted during burn-in).

All subject-level updates are vectorized: subjects are conditionally
independent given the population parameters, so updating them together is
the same in law as visiting them one at a time.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize
from scipy.special import log_ndtr, ndtr, ndtri

from . import _kernels
from .model import (
    Hyperparams,
    JointModel,
    ModelVariant,
    Priors,
    SubjectEffects,
    TrialData,
    LOG_2PI,
    invgamma_logpdf,
    normal_logpdf,
)

SITES = ("init", "impute", "effects", "kappa", "gamma", "variances", "dropout", "dropout_var",
         "dropout_block")


class SamplerError(RuntimeError):
    """Numerical failure inside the sampler (non-finite posterior etc.)."""


@dataclass
class McmcConfig:
    iterations: int = 10_000
    burn_in: int = 5_000
    thin: int = 5
    n_chains: int = 2
    seed: int = 0
    variant: ModelVariant = ModelVariant.ALL_SHARED
    adapt_target: float = 0.44
    adapt_window: int = 50
    priors: Priors = field(default_factory=Priors)
    group_dropout_variance: bool = True
    # pins omega at zero; used to check nesting of the linked models in the separate one
    pin_omega_zero: bool = False
    kappa_step: float = 2.0
    effects_step: float = 1.0
    kappa_moves: int = 2
    dropout_block_moves: int = 3

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1 or self.n_chains < 1 or self.kappa_moves < 1:
            raise ValueError("thin, n_chains and kappa_moves must be >= 1")
        if self.dropout_block_moves < 0:
            raise ValueError("dropout_block_moves must be >= 0")
        if self.adapt_window < 1 or not 0 < self.adapt_target < 1:
            raise ValueError("bad adaptation settings")

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "priors"}
        out["variant"] = int(self.variant)
        out["priors"] = self.priors.as_dict()
        return out


@dataclass
class SamplerState:
    effects: SubjectEffects
    hyper: Hyperparams
    kappa_step: np.ndarray
    effects_step: np.ndarray
    rngs: dict = field(default_factory=dict)
    # per-risk random-walk proposals of the collapsed dropout move (created lazily)
    dropout_proposal: Optional[list] = None


def make_rngs(seed: int, chain_index: int) -> dict:
    """Independent generator per update site, keyed on (seed, chain, site)."""
    return {name: np.random.default_rng(np.random.SeedSequence([int(seed), int(chain_index), j]))
            for j, name in enumerate(SITES)}


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def sample_truncated_normal(mu, sd, lower, rng, size=None):
    """Draw from N(mu, sd^2) conditioned on being > lower.

    Inverse CDF on the upper tail for standardized bounds up to 30; beyond
    that, Marsaglia's tail method (acceptance > 0.99 there).
    """
    mu, sd, lower = (np.asarray(v, dtype=float) for v in (mu, sd, lower))
    shape = size if size is not None else np.broadcast_shapes(mu.shape, sd.shape, lower.shape)
    mu, sd, lower = (np.broadcast_to(v, shape) for v in (mu, sd, lower))
    alpha = (lower - mu) / sd
    u = 1.0 - rng.random(shape)
    z = np.empty(shape)
    mid = alpha <= 30.0
    z[mid] = -ndtri(u[mid] * ndtr(-alpha[mid]))
    far = np.flatnonzero(~mid)
    a_far = alpha.reshape(-1)[far]
    zf = np.empty(len(far))
    todo = np.arange(len(far))
    while len(todo):
        u1 = 1.0 - rng.random(len(todo))
        u2 = rng.random(len(todo))
        cand = np.sqrt(a_far[todo] ** 2 - 2.0 * np.log(u1))
        ok = u2 * cand <= a_far[todo]
        zf[todo[ok]] = cand[ok]
        todo = todo[~ok]
    z.reshape(-1)[far] = zf
    draw = mu + sd * z
    return np.maximum(draw, np.nextafter(lower, np.inf))


def _draw_from_precision(prec, lin, rng):
    """Batched N(prec^-1 lin, prec^-1) draws; prec (..., d, d), lin (..., d)."""
    lin = np.asarray(lin, dtype=float)
    z = rng.standard_normal(lin.shape)
    d = lin.shape[-1]
    out, ok = _kernels.precision_draw(np.ascontiguousarray(prec, dtype=float).reshape(-1, d, d),
                                      np.ascontiguousarray(lin).reshape(-1, d), z.reshape(-1, d))
    if not ok:
        raise SamplerError("precision matrix is not positive definite")
    return out.reshape(lin.shape)


def _draw_invgamma(shape, rate, rng):
    # tiny shapes can underflow the gamma draw to 0; floor it to stay finite
    return np.asarray(rate, dtype=float) / np.maximum(rng.gamma(shape), np.finfo(float).tiny)


def _design_sums(model: JointModel, kappa):
    """Per-subject X'X (N,3,3) and X'y (N,3) for design rows (1, min(t,k), (t-k)+)."""
    pk = model.packed
    return _kernels.design_sums(pk.starts, pk.obs_week, pk.obs_y,
                                np.ascontiguousarray(kappa, dtype=float))


def _with(effects: SubjectEffects, **kw) -> SubjectEffects:
    vals = dict(alpha_baseline=effects.alpha_baseline, beta1=effects.beta1, beta2=effects.beta2,
                kappa=effects.kappa, log_dropout=effects.log_dropout)
    vals.update(kw)
    return SubjectEffects(**vals)


def _complete_log_times(model: JointModel, effects: SubjectEffects) -> np.ndarray:
    pk = model.packed
    return np.where(pk.event, pk.log_time, effects.log_dropout)


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------

def impute_censored_dropout_times(state: SamplerState, model: JointModel, rng=None):
    """Redraw log dropout times of censored risks above their censoring bound.

    Returns the MH acceptance mask over censored entries for the
    trajectory-at-dropout link, else None.
    """
    rng = rng if rng is not None else state.rngs["impute"]
    pk = model.packed
    cens = pk.censored
    eff, hyper = state.effects, state.hyper
    var = model.dropout_var(hyper)
    sd = np.sqrt(var)
    lower = pk.log_time
    u = _complete_log_times(model, eff)
    if model.variant is not ModelVariant.TRAJECTORY_AT_DROPOUT:
        th = model.theta(eff, hyper, u)
        draw = sample_truncated_normal(th, sd, lower, rng)
        eff.log_dropout = np.where(cens, draw, u)
        return None
    # the link depends on the time itself: truncated-normal proposal at the
    # current linear predictor, corrected by MH
    th_cur = model.theta(eff, hyper, u)
    prop = np.where(cens, sample_truncated_normal(th_cur, sd, lower, rng), u)
    th_prop = model.theta(eff, hyper, prop)
    lj_cur = model.log_jacobian(eff, hyper, u)
    lj_prop = model.log_jacobian(eff, hyper, prop)
    log_pi_cur = normal_logpdf(u, th_cur, var) + lj_cur
    log_pi_prop = normal_logpdf(prop, th_prop, var) + lj_prop
    q_fwd = normal_logpdf(prop, th_cur, var) - log_ndtr((th_cur - lower) / sd)
    q_bwd = normal_logpdf(u, th_prop, var) - log_ndtr((th_prop - lower) / sd)
    with np.errstate(invalid="ignore"):
        log_a = log_pi_prop - log_pi_cur + q_bwd - q_fwd
    log_a = np.where(np.isnan(log_a), -np.inf, log_a)
    accept = cens & (np.log(rng.random(u.shape)) < log_a)
    eff.log_dropout = np.where(accept, prop, u)
    return accept[cens]


def _linear_system(model: JointModel, eff: SubjectEffects, hyper: Hyperparams, kappa):
    """Precision (N,3,3) and linear term (N,3) of (alpha_baseline, beta1, beta2) given kappa."""
    pk = model.packed
    xtx, xty = _design_sums(model, kappa)
    s2 = hyper.sigma2_resid
    mu = model.effect_means(hyper)[:, :3]
    pvar = hyper.sigma2_effects[:3]
    prec = xtx / s2 + np.diag(1.0 / pvar)[None]
    lin = xty / s2 + mu / pvar
    if model.variant.nu_dim and np.any(hyper.omega):
        h = hyper.omega @ model._sel.T                      # (2, 3)
        w = 1.0 / model.dropout_var(hyper)                  # (N, 2)
        r = _complete_log_times(model, eff) - pk.Z @ hyper.phi.T
        prec = prec + np.einsum("nk,ka,kb->nab", w, h, h)
        lin = lin + (w * r) @ h
    return prec, lin


def update_subject_linear_effects(state: SamplerState, model: JointModel, rng=None):
    """Exact joint Gaussian draw of (alpha_baseline, beta1, beta2) given kappa."""
    if model.variant is ModelVariant.TRAJECTORY_AT_DROPOUT:
        raise ValueError("trajectory-at-dropout link is not conditionally Gaussian; "
                         "use update_effects_mh")
    rng = rng if rng is not None else state.rngs["effects"]
    eff = state.effects
    prec, lin = _linear_system(model, eff, state.hyper, eff.kappa)
    draw = _draw_from_precision(prec, lin, rng)
    eff.alpha_baseline, eff.beta1, eff.beta2 = draw[:, 0], draw[:, 1], draw[:, 2]
    return state


def _collapsed(prec, lin, z):
    draw, quad, logdet, ok = _kernels.precision_block(np.ascontiguousarray(prec), np.ascontiguousarray(lin), z)
    if not ok:
        raise SamplerError("precision matrix is not positive definite")
    return draw, 0.5 * quad - 0.5 * logdet


def update_changepoint_joint(state: SamplerState, model: JointModel, rng=None):
    """Joint MH move on (kappa, alpha_baseline, beta1, beta2) per subject.

    kappa takes a random-walk step and the linear effects are redrawn from
    their exact conditional at the proposed kappa, so the acceptance ratio only
    involves kappa's density with the linear effects integrated out.  Needs a
    link that is linear in the effects (not the trajectory-at-dropout link).
    """
    if model.variant is ModelVariant.TRAJECTORY_AT_DROPOUT:
        raise ValueError("joint change-point move needs a conditionally Gaussian link")
    rng = rng if rng is not None else state.rngs["kappa"]
    eff, hyper = state.effects, state.hyper
    n = model.packed.n_subjects
    mu_k = model.effect_means(hyper)[:, 3]
    prop = eff.kappa + state.kappa_step * rng.standard_normal(n)
    z = rng.standard_normal((n, 3))
    new, lm_prop = _collapsed(*_linear_system(model, eff, hyper, prop), z)
    _, lm_cur = _collapsed(*_linear_system(model, eff, hyper, eff.kappa), np.zeros((n, 3)))
    log_a = lm_prop - lm_cur - 0.5 * ((prop - mu_k) ** 2 - (eff.kappa - mu_k) ** 2) / hyper.sigma2_kappa
    accept = np.log(rng.random(n)) < np.where(np.isnan(log_a), -np.inf, log_a)
    eff.kappa = np.where(accept, prop, eff.kappa)
    eff.alpha_baseline = np.where(accept, new[:, 0], eff.alpha_baseline)
    eff.beta1 = np.where(accept, new[:, 1], eff.beta1)
    eff.beta2 = np.where(accept, new[:, 2], eff.beta2)
    return accept


def _kappa_log_target(model, eff, hyper, kappa, mu_k):
    trial = _with(eff, kappa=kappa)
    out = -0.5 * model.long_ss(trial) / hyper.sigma2_resid
    out -= 0.5 * (kappa - mu_k) ** 2 / hyper.sigma2_kappa
    if model.variant is ModelVariant.TRAJECTORY_AT_DROPOUT:
        out += model.dropout_loglik(trial, hyper, "augmented").sum(axis=1)
    return out


def update_changepoint(state: SamplerState, model: JointModel, rng=None):
    """One random-walk MH step per subject on kappa; returns acceptance mask."""
    rng = rng if rng is not None else state.rngs["kappa"]
    eff, hyper = state.effects, state.hyper
    n = model.packed.n_subjects
    mu_k = model.effect_means(hyper)[:, 3]
    prop = eff.kappa + state.kappa_step * rng.standard_normal(n)
    log_a = _kappa_log_target(model, eff, hyper, prop, mu_k) - \
        _kappa_log_target(model, eff, hyper, eff.kappa, mu_k)
    accept = np.log(rng.random(n)) < np.where(np.isnan(log_a), -np.inf, log_a)
    eff.kappa = np.where(accept, prop, eff.kappa)
    return accept


def _effects_log_target(model, eff, hyper, mat, mu):
    trial = _with(eff, alpha_baseline=mat[:, 0], beta1=mat[:, 1], beta2=mat[:, 2])
    out = model.long_loglik(trial, hyper.sigma2_resid)
    out += normal_logpdf(mat, mu, hyper.sigma2_effects[None, :3]).sum(axis=1)
    out += model.dropout_loglik(trial, hyper, "augmented").sum(axis=1)
    return out


def update_effects_mh(state: SamplerState, model: JointModel, rng=None):
    """Joint random-walk MH on (alpha_baseline, beta1, beta2), any link.

    The proposal covariance is the longitudinal-plus-prior conditional
    covariance (depends on kappa and variances only, so the walk stays
    symmetric), scaled per subject by ``effects_step``.
    """
    rng = rng if rng is not None else state.rngs["effects"]
    eff, hyper = state.effects, state.hyper
    n = model.packed.n_subjects
    xtx, _ = _design_sums(model, eff.kappa)
    prec = xtx / hyper.sigma2_resid + np.diag(1.0 / hyper.sigma2_effects[:3])[None]
    z = rng.standard_normal((n, 3))
    delta, ok = _kernels.precision_whiten(prec, z)
    if not ok:
        raise SamplerError("precision matrix is not positive definite")
    cur = np.column_stack([eff.alpha_baseline, eff.beta1, eff.beta2])
    prop = cur + state.effects_step[:, None] * delta
    mu = model.effect_means(hyper)[:, :3]
    log_a = _effects_log_target(model, eff, hyper, prop, mu) - \
        _effects_log_target(model, eff, hyper, cur, mu)
    accept = np.log(rng.random(n)) < np.where(np.isnan(log_a), -np.inf, log_a)
    new = np.where(accept[:, None], prop, cur)
    eff.alpha_baseline, eff.beta1, eff.beta2 = new[:, 0], new[:, 1], new[:, 2]
    return accept


def update_gamma(state: SamplerState, model: JointModel, rng=None):
    """Conjugate Gaussian regression of each effect level on [1, x]."""
    rng = rng if rng is not None else state.rngs["gamma"]
    Z = model.packed.Z
    hyper = state.hyper
    e = state.effects.as_matrix().reshape(-1, 4)
    gm, gv = model.priors.gamma_moments(model.packed.p)
    ztz = Z.T @ Z
    prec = ztz[None] / hyper.sigma2_effects[:, None, None] + np.stack([np.diag(1.0 / v) for v in gv])
    lin = (e.T @ Z) / hyper.sigma2_effects[:, None] + gm / gv
    hyper.gamma = _draw_from_precision(prec, lin, rng)
    return state


def update_variances(state: SamplerState, model: JointModel, rng=None):
    """Inverse-gamma draws for the residual and the four subject-level variances."""
    rng = rng if rng is not None else state.rngs["variances"]
    pr = model.priors
    eff, hyper = state.effects, state.hyper
    pk = model.packed
    ss = model.long_ss(eff).sum()
    a, b = pr.resid_ig
    hyper.sigma2_resid = float(_draw_invgamma(a + 0.5 * pk.n_obs, b + 0.5 * ss, rng))
    resid = eff.as_matrix().reshape(-1, 4) - model.effect_means(hyper)
    shape = np.array([s[0] for s in pr.effects_ig]) + 0.5 * pk.n_subjects
    rate = np.array([s[1] for s in pr.effects_ig]) + 0.5 * (resid ** 2).sum(axis=0)
    hyper.sigma2_effects = _draw_invgamma(shape, rate, rng)
    return state


def update_dropout_regression(state: SamplerState, model: JointModel, rng=None, pin_omega_zero=False):
    """Per risk, joint Gaussian draw of (phi_k, omega_k).

    Regresses complete-data log dropout times on [1, x, link].  For the
    trajectory-at-dropout link the Gaussian draw is used as an independence
    proposal and corrected by the log-Jacobian ratio.  Returns acceptance per
    risk (all True for the conjugate links).
    """
    rng = rng if rng is not None else state.rngs["dropout"]
    pk = model.packed
    eff, hyper = state.effects, state.hyper
    u = _complete_log_times(model, eff)
    w = 1.0 / model.dropout_var(hyper)
    q = model.variant.nu_dim
    nu = model.latent(eff, u)
    pm, pv = model.priors.phi_moments(pk.p)
    om, ov = model.priors.omega_moments(max(q, 1))
    accepted = np.ones(2, dtype=bool)
    u_draw = rng.random(2)
    for k in range(2):
        if q and not pin_omega_zero:
            X = np.column_stack([pk.Z, nu[:, k, :]])
            mean0 = np.concatenate([pm[k], om[k, :q]])
            var0 = np.concatenate([pv[k], ov[k, :q]])
            target = u[:, k]
        else:
            X = pk.Z
            mean0, var0 = pm[k], pv[k]
            target = u[:, k] - (nu[:, k, :] @ hyper.omega[k] if q else 0.0)
        prec = (X.T * w[:, k]) @ X + np.diag(1.0 / var0)
        lin = X.T @ (w[:, k] * target) + mean0 / var0
        draw = _draw_from_precision(prec, lin, rng)
        if X.shape[1] == pk.p:
            new_phi, new_omega = draw, hyper.omega[k]
        else:
            new_phi, new_omega = draw[:pk.p], draw[pk.p:]
        if model.variant is ModelVariant.TRAJECTORY_AT_DROPOUT and not pin_omega_zero:
            trial = hyper.copy()
            trial.omega[k] = new_omega
            lj_new = model.log_jacobian(eff, trial, u)[:, k].sum()
            lj_old = model.log_jacobian(eff, hyper, u)[:, k].sum()
            if not np.log(u_draw[k]) < lj_new - lj_old:
                accepted[k] = False
                continue
        hyper.phi[k] = new_phi
        hyper.omega[k] = new_omega
    return accepted


def update_dropout_variances(state: SamplerState, model: JointModel, rng=None):
    """Inverse-gamma draws for the dropout variances (per risk, per group)."""
    rng = rng if rng is not None else state.rngs["dropout_var"]
    pk = model.packed
    eff, hyper = state.effects, state.hyper
    u = _complete_log_times(model, eff)
    r2 = (u - model.theta(eff, hyper, u)) ** 2
    idx = model.var_index(hyper)
    G = hyper.varsigma2.shape[1]
    a, b = model.priors.dropout_ig
    counts = np.bincount(idx, minlength=G)
    ss = np.stack([np.bincount(idx, weights=r2[:, k], minlength=G) for k in range(2)])
    hyper.varsigma2 = _draw_invgamma(a + 0.5 * counts[None, :] + np.zeros((2, 1)), b + 0.5 * ss, rng)
    return state


# ---------------------------------------------------------------------------
# Collapsed dropout move
# ---------------------------------------------------------------------------

@dataclass
class BlockProposal:
    """Random-walk proposal over one risk's (phi, omega, log varsigma2).

    During burn-in the covariance follows the empirical covariance of the
    chain and a global scale is tuned toward ``TARGET``; both are frozen after.
    """

    chol: np.ndarray
    log_scale: float = 0.0
    n: int = 0
    mean: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None
    accepted: float = 0.0
    tried: int = 0

    TARGET = 0.234

    def record(self, v):
        self.n += 1
        if self.mean is None:
            self.mean, self.m2 = v.copy(), np.zeros((len(v), len(v)))
            return
        delta = v - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, v - self.mean)

    def adapt(self, n_adapt: int):
        d = len(self.chol)
        if self.tried:
            rate = self.accepted / self.tried
            self.log_scale += (rate - self.TARGET) / math.sqrt(n_adapt)
        self.accepted, self.tried = 0.0, 0
        if self.n > 2 * d:
            cov = self.m2 / (self.n - 1) * 2.38 ** 2 / d
            cov += 1e-10 * np.diag(np.diag(cov)) + 1e-12 * np.eye(d)
            try:
                self.chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                pass


def _block_free_omega(model: JointModel, pin_omega_zero: bool) -> bool:
    return bool(model.variant.nu_dim) and not pin_omega_zero


def _block_vector(model: JointModel, hyper: Hyperparams, k: int, free_omega: bool) -> np.ndarray:
    parts = [hyper.phi[k]]
    if free_omega:
        parts.append(hyper.omega[k])
    parts.append(np.log(hyper.varsigma2[k]))
    return np.concatenate(parts)


class _BlockTarget:
    """One risk's collapsed log density, with the data-dependent pieces cached."""

    def __init__(self, model: JointModel, eff: SubjectEffects, hyper: Hyperparams, k: int,
                 free_omega: bool):
        pk = model.packed
        self.p, self.q = pk.p, model.variant.nu_dim
        self.free = free_omega
        X = pk.Z
        if self.q:
            nu = model.latent(eff, pk.log_time)[:, k, :]
            X = np.column_stack([pk.Z, nu])
        self.X = X if free_omega else pk.Z
        self.offset = 0.0 if free_omega or not self.q else nu @ hyper.omega[k]
        self.idx = model.var_index(hyper)
        lt = pk.log_time[:, k]
        ev = pk.event[:, k]
        self.lt_ev, self.lt_cens = lt[ev], lt[~ev]
        self.ev = ev
        pr = model.priors
        pm, pv = pr.phi_moments(self.p)
        m0, v0 = [pm[k]], [pv[k]]
        if free_omega and self.q:
            om, ov = pr.omega_moments(self.q)
            m0.append(om[k])
            v0.append(ov[k])
        self.m0, self.v0 = np.concatenate(m0), np.concatenate(v0)
        self.n_coef = len(self.m0)
        self.ig = pr.dropout_ig

    def __call__(self, v) -> float:
        coef, log_var = v[:self.n_coef], v[self.n_coef:]
        theta = self.X @ coef + self.offset
        var = np.exp(log_var)[self.idx]
        sd = np.sqrt(var)
        ev = self.ev
        r = (self.lt_ev - theta[ev]) / sd[ev]
        ll = (-0.5 * r * r - np.log(sd[ev])).sum() - 0.5 * LOG_2PI * len(r)
        ll += log_ndtr((theta[~ev] - self.lt_cens) / sd[~ev]).sum()
        lp = normal_logpdf(coef, self.m0, self.v0).sum()
        lp += (invgamma_logpdf(np.exp(log_var), *self.ig) + log_var).sum()
        return float(ll + lp)


def dropout_marginal_log_density(model: JointModel, eff: SubjectEffects, hyper: Hyperparams,
                                 k: int, v, free_omega: bool = True) -> float:
    """Log posterior of one risk's block with the censored log times integrated out.

    ``v`` stacks (phi_k, omega_k if free, log varsigma2_k); the density is
    with respect to the log variances, hence the ``+ log varsigma2`` terms.
    """
    return _BlockTarget(model, eff, hyper, k, free_omega)(np.asarray(v, dtype=float))


def _initial_block_proposals(model: JointModel, hyper: Hyperparams, free_omega: bool) -> list:
    props = []
    for k in range(2):
        d = len(_block_vector(model, hyper, k, free_omega))
        props.append(BlockProposal(chol=0.05 * np.eye(d) / math.sqrt(d)))
    return props


def update_dropout_block(state: SamplerState, model: JointModel, n_moves: int = 3, rng=None,
                         pin_omega_zero: bool = False):
    """Collapsed random-walk MH on each risk's (phi, omega, log varsigma2).

    The target integrates the censored log times out (survival terms), so the
    move crosses the ridge between the regression, its variance and the
    imputed times that slows plain data augmentation when most times are
    censored.  The censored times are then redrawn from their exact
    conditional, which makes the pair a valid joint update.  Not used for the
    trajectory-at-dropout link.  Returns the acceptance rate per risk.
    """
    if model.variant is ModelVariant.TRAJECTORY_AT_DROPOUT or n_moves < 1:
        return None
    rng = rng if rng is not None else state.rngs["dropout_block"]
    free = _block_free_omega(model, pin_omega_zero)
    if state.dropout_proposal is None:
        state.dropout_proposal = _initial_block_proposals(model, state.hyper, free)
    hyper, eff = state.hyper, state.effects
    p, q = model.packed.p, model.variant.nu_dim
    rates = np.zeros(2)
    for k in range(2):
        prop = state.dropout_proposal[k]
        v = _block_vector(model, hyper, k, free)
        target = _BlockTarget(model, eff, hyper, k, free)
        cur = target(v)
        steps = rng.standard_normal((n_moves, len(v))) @ (np.exp(prop.log_scale) * prop.chol).T
        log_u = np.log(rng.random(n_moves))
        for m in range(n_moves):
            cand = v + steps[m]
            new = target(cand)
            if log_u[m] < new - cur:
                v, cur = cand, new
                rates[k] += 1.0
        prop.accepted += rates[k]
        prop.tried += n_moves
        hyper.phi[k] = v[:p]
        if free:
            hyper.omega[k] = v[p:p + q]
            hyper.varsigma2[k] = np.exp(v[p + q:])
        else:
            hyper.varsigma2[k] = np.exp(v[p:])
    impute_censored_dropout_times(state, model, rng)
    return rates / n_moves


def sweep(state: SamplerState, model: JointModel, pin_omega_zero: bool = False,
          kappa_moves: int = 2, dropout_block_moves: int = 3) -> dict:
    """One full update cycle; returns acceptance indicators of the MH steps.

    ``kappa_moves`` joint change-point moves are made per cycle (conjugate
    links); their acceptance is averaged.  ``dropout_block_moves`` collapsed
    moves per risk end the cycle (0 disables them).
    """
    acc = {}
    a = impute_censored_dropout_times(state, model)
    if a is not None:
        acc["impute"] = a
    if model.variant is ModelVariant.TRAJECTORY_AT_DROPOUT:
        acc["effects"] = update_effects_mh(state, model)
        acc["kappa"] = update_changepoint(state, model)
    else:
        update_subject_linear_effects(state, model)
        acc["kappa"] = np.mean([update_changepoint_joint(state, model)
                                for _ in range(kappa_moves)], axis=0)
    update_gamma(state, model)
    update_variances(state, model)
    a = update_dropout_regression(state, model, pin_omega_zero=pin_omega_zero)
    if model.variant is ModelVariant.TRAJECTORY_AT_DROPOUT:
        acc["dropout_regression"] = a
    update_dropout_variances(state, model)
    a = update_dropout_block(state, model, dropout_block_moves, pin_omega_zero=pin_omega_zero)
    if a is not None:
        acc["dropout_block"] = a
    return acc


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _fit_subject(weeks, y):
    best = None
    for kappa in weeks[1:-1]:
        X = np.column_stack([np.ones_like(weeks), np.minimum(weeks, kappa),
                             np.maximum(weeks - kappa, 0.0)])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        sse = float(((y - X @ coef) ** 2).sum())
        if best is None or sse < best[0]:
            best = (sse, coef, kappa)
    return best


def _norm_logpdf(z):
    return -0.5 * z * z - 0.5 * math.log(2.0 * math.pi)


def _censored_lognormal_fit(Z, log_t, event):
    """Maximum-likelihood (coef, sd) of a right-censored normal regression on log times.

    Falls back to least squares on the bounds when the fit is degenerate
    (e.g. no events).
    """
    p = Z.shape[1]
    ridge = 1e-6 * np.eye(p)
    start = np.linalg.solve(Z.T @ Z + ridge, Z.T @ (log_t + np.where(event, 0.0, 1.0)))
    fallback = start, 1.0
    if len(log_t) == 0 or not event.any():
        return fallback

    def nll(par):
        coef, log_sd = par[:p], par[p]
        sd = math.exp(log_sd)
        z = (log_t - Z @ coef) / sd
        ll = np.where(event, _norm_logpdf(z) - log_sd, log_ndtr(-z))
        # weak ridge keeps unidentified arms finite
        return -ll.sum() + 1e-3 * ((coef - start) ** 2).sum()

    res = optimize.minimize(nll, np.append(start, 0.0), method="L-BFGS-B",
                            bounds=[(None, None)] * p + [(math.log(0.2), math.log(5.0))])
    if not res.success and not np.isfinite(res.fun):
        return fallback
    return res.x[:p], math.exp(res.x[p])


def initial_state(model: JointModel, config: McmcConfig, chain_index: int = 0,
                  rngs: Optional[dict] = None) -> SamplerState:
    """Least-squares start, jittered by up to +-2 subject-level SDs for chains >= 1."""
    pk = model.packed
    N, p = pk.n_subjects, pk.p
    rngs = rngs if rngs is not None else make_rngs(config.seed, chain_index)
    rng = rngs["init"]
    gm, _ = model.priors.gamma_moments(p)
    eff = np.full((N, 4), np.nan)
    sse_total, df_total = 0.0, 0
    starts = np.searchsorted(pk.obs_subject, np.arange(N))
    for i in range(N):
        n_i = pk.n_visits[i]
        if n_i < 3:
            continue
        sl = slice(starts[i], starts[i] + n_i)
        sse, coef, kappa = _fit_subject(pk.obs_week[sl], pk.obs_y[sl])
        eff[i] = (*coef, kappa)
        sse_total += sse
        df_total += max(n_i - 3, 0)
    fitted = ~np.isnan(eff[:, 0])
    if fitted.any():
        overall = np.nanmean(eff, axis=0)
    else:
        overall = np.array([pk.obs_y.mean() if pk.n_obs else 0.0, 0.0, 0.0, gm[3, 0]])
    for g in range(pk.n_groups):
        in_g = pk.group == g
        ok = in_g & fitted
        fill = eff[ok].mean(axis=0) if ok.any() else overall
        eff[in_g & ~fitted] = fill
    e_scale = np.maximum(eff.std(axis=0), [0.05, 0.005, 0.002, 1.0]) if N > 1 else \
        np.array([0.1, 0.01, 0.005, 2.0])
    if chain_index > 0:
        eff = eff + rng.uniform(-2.0, 2.0, size=4) * e_scale
    ridge = 1e-6 * np.eye(p)
    ztz = pk.Z.T @ pk.Z + ridge
    gamma = np.linalg.solve(ztz, pk.Z.T @ eff).T if N else gm.copy()
    resid = eff - pk.Z @ gamma.T
    sigma2_eff = np.maximum((resid ** 2).mean(axis=0), 1e-8) if N else np.ones(4)
    sigma2_resid = max(sse_total / df_total, 1e-4) if df_total else 0.05
    G = pk.n_groups if config.group_dropout_variance else 1
    phi = np.zeros((2, p))
    varsigma2 = np.ones((2, G))
    u = pk.log_time.copy()
    for k in range(2):
        phi[k], sd = _censored_lognormal_fit(pk.Z, pk.log_time[:, k], pk.event[:, k])
        varsigma2[k] = sd ** 2
        # start censored times at their conditional mean above the bound
        th = pk.Z @ phi[k]
        alpha = (pk.log_time[:, k] - th) / sd
        tail = np.exp(_norm_logpdf(alpha) - log_ndtr(-alpha))
        u[:, k] = np.where(pk.event[:, k], pk.log_time[:, k],
                           np.maximum(th + sd * tail, pk.log_time[:, k] + 1e-3))
    if chain_index > 0:
        phi[:, 0] += rng.uniform(-2.0, 2.0, size=2) * np.sqrt(varsigma2.mean(axis=1))
    hyper = Hyperparams(gamma, sigma2_resid, sigma2_eff, phi,
                        np.zeros((2, model.variant.nu_dim)), varsigma2)
    effects = SubjectEffects.from_matrix(eff, log_dropout=u)
    state = SamplerState(effects, hyper, np.full(N, float(config.kappa_step)),
                         np.full(N, float(config.effects_step)), rngs)
    check_finite(state, model)
    return state


def check_finite(state: SamplerState, model: JointModel) -> None:
    """Raise SamplerError naming the first subject/term with non-finite density."""
    eff, hyper = state.effects, state.hyper
    parts = {
        "longitudinal": model.long_loglik(eff, hyper.sigma2_resid),
        "dropout": model.dropout_loglik(eff, hyper, "augmented").sum(axis=1),
        "subject prior": model.subject_log_prior(eff, hyper),
    }
    for name, vals in parts.items():
        bad = np.flatnonzero(~np.isfinite(vals))
        if len(bad):
            i = int(bad[0])
            label = model.data.subjects[i].id if isinstance(model.data, TrialData) else i
            raise SamplerError(f"non-finite {name} log-density for subject {label}")
    if not np.isfinite(model.hyper_log_prior(hyper)):
        raise SamplerError("non-finite hyper-prior log-density")


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------

@dataclass
class ChainOutput:
    """Thinned draws of one chain.

    Hyperparameter draws are stacked along axis 0 in ``hyper_draws`` (keys
    gamma, sigma2_resid, sigma2_effects, phi, omega, varsigma2); subject
    effects in ``effects`` with shape (n_draws, N, 4).
    """

    hyper_draws: dict
    effects: np.ndarray
    deviance: np.ndarray
    mh_acceptance: dict
    step_sizes: dict
    burn_in_step_sizes: dict
    seed: int
    chain_index: int
    variant: ModelVariant
    config_echo: dict

    @property
    def n_draws(self) -> int:
        return len(self.deviance)

    def hyper(self, i: int) -> Hyperparams:
        d = self.hyper_draws
        return Hyperparams(d["gamma"][i], d["sigma2_resid"][i], d["sigma2_effects"][i],
                           d["phi"][i], d["omega"][i], d["varsigma2"][i])

    def subject_effects(self, i: int) -> SubjectEffects:
        return SubjectEffects.from_matrix(self.effects[i])

    @property
    def draws(self) -> list:
        return [(self.hyper(i), self.subject_effects(i)) for i in range(self.n_draws)]

    def scalar_draws(self):
        """(names, (n_draws, P) array) of every scalar hyperparameter."""
        if not self.n_draws:
            return [], np.zeros((0, 0))
        names = list(self.hyper(0).flat())
        d = self.hyper_draws
        cols = [d["gamma"].reshape(self.n_draws, -1), d["sigma2_resid"][:, None],
                d["sigma2_effects"], d["phi"].reshape(self.n_draws, -1),
                d["omega"].reshape(self.n_draws, -1), d["varsigma2"].reshape(self.n_draws, -1)]
        return names, np.column_stack(cols)


def _adapt(step, accepted_count, window, target, n_adapt):
    rate = accepted_count / window
    return step * np.exp((rate - target) / math.sqrt(n_adapt))


def _step_snapshot(state: SamplerState) -> dict:
    out = {"kappa": state.kappa_step.copy(), "effects": state.effects_step.copy()}
    if state.dropout_proposal is not None:
        out["dropout_block"] = np.concatenate([(np.exp(pr.log_scale) * pr.chol).ravel()
                                               for pr in state.dropout_proposal])
    return out


def run_chain(config: McmcConfig, data: TrialData, chain_index: int = 0) -> ChainOutput:
    """Run one chain; adapts MH steps during burn-in only."""
    model = JointModel(data, config.variant, config.priors)
    rngs = make_rngs(config.seed, chain_index)
    state = initial_state(model, config, chain_index, rngs)
    N = model.packed.n_subjects
    n_keep = config.n_retained
    p, q = model.packed.p, config.variant.nu_dim
    G = state.hyper.varsigma2.shape[1]
    draws = {
        "gamma": np.empty((n_keep, 4, p)),
        "sigma2_resid": np.empty(n_keep),
        "sigma2_effects": np.empty((n_keep, 4)),
        "phi": np.empty((n_keep, 2, p)),
        "omega": np.empty((n_keep, 2, q)),
        "varsigma2": np.empty((n_keep, 2, G)),
    }
    effects = np.empty((n_keep, N, 4))
    deviance = np.empty(n_keep)
    window = {"kappa": np.zeros(N), "effects": np.zeros(N)}
    post = {}
    n_post = 0
    n_adapt = 0
    burn_steps = None
    j = 0
    for it in range(config.iterations):
        acc = sweep(state, model, config.pin_omega_zero, config.kappa_moves,
                    config.dropout_block_moves)
        if it < config.burn_in:
            if state.dropout_proposal is not None:
                free = _block_free_omega(model, config.pin_omega_zero)
                for k, prop in enumerate(state.dropout_proposal):
                    prop.record(_block_vector(model, state.hyper, k, free))
            window["kappa"] += acc["kappa"]
            if "effects" in acc:
                window["effects"] += acc["effects"]
            if (it + 1) % config.adapt_window == 0:
                n_adapt += 1
                state.kappa_step = _adapt(state.kappa_step, window["kappa"], config.adapt_window,
                                          config.adapt_target, n_adapt)
                for prop in state.dropout_proposal or ():
                    prop.adapt(n_adapt)
                if "effects" in acc:
                    state.effects_step = _adapt(state.effects_step, window["effects"],
                                                config.adapt_window, config.adapt_target, n_adapt)
                window = {"kappa": np.zeros(N), "effects": np.zeros(N)}
            continue
        if burn_steps is None:
            burn_steps = _step_snapshot(state)
        n_post += 1
        for key, val in acc.items():
            post[key] = post.get(key, 0.0) + np.asarray(val, dtype=float)
        if (it - config.burn_in + 1) % config.thin:
            continue
        h = state.hyper
        draws["gamma"][j] = h.gamma
        draws["sigma2_resid"][j] = h.sigma2_resid
        draws["sigma2_effects"][j] = h.sigma2_effects
        draws["phi"][j] = h.phi
        draws["omega"][j] = h.omega
        draws["varsigma2"][j] = h.varsigma2
        effects[j] = state.effects.as_matrix()
        deviance[j] = model.deviance(state.effects, h)
        if not np.isfinite(deviance[j]):
            raise SamplerError(f"non-finite deviance at iteration {it}")
        j += 1
    acceptance = {key: val / max(n_post, 1) for key, val in post.items()}
    return ChainOutput(
        hyper_draws=draws,
        effects=effects,
        deviance=deviance,
        mh_acceptance=acceptance,
        step_sizes=_step_snapshot(state),
        burn_in_step_sizes=burn_steps or {},
        seed=config.seed,
        chain_index=chain_index,
        variant=config.variant,
        config_echo=config.as_dict(),
    )


def _run_chain_args(args):
    return run_chain(*args)


def run_analysis(config: McmcConfig, data: TrialData, n_jobs: int = 1) -> list:
    """Run ``config.n_chains`` independent chains (optionally in processes)."""
    jobs = [(config, data, c) for c in range(config.n_chains)]
    if n_jobs <= 1 or config.n_chains == 1:
        return [run_chain(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_chain_args, jobs))
