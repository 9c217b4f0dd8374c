"""Domain types, trajectory function and log-densities of the joint model.

The longitudinal part is a random change-point model on log DAS28 scores,
the dropout part is a pair of cause-specific lognormal regressions (adverse
event, inefficacy) linked to the trajectory through shared subject latents.

Everything here is a pure function of its arguments.  The per-subject
functions (``loglik_longitudinal``, ``loglik_dropout``...) are thin wrappers
around the vectorized :class:`JointModel`, which is what the sampler uses.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, log_ndtr

from . import _kernels

RISKS = ("AE", "EFFY")
LEVELS = ("alpha", "beta1", "beta2", "kappa")
LOG_2PI = math.log(2.0 * math.pi)


class DataError(ValueError):
    """Trial data violates a structural invariant."""


class ModelVariant(enum.IntEnum):
    """Latent link between the trajectory and the dropout regressions."""

    SEPARATE = 1
    TRAJECTORY_AT_DROPOUT = 2
    BASELINE = 3
    PRE_SLOPE = 4
    POST_SLOPE = 5
    ALL_SHARED = 6

    @property
    def nu_dim(self) -> int:
        return _NU_DIM[self]

    @property
    def shared_index(self) -> tuple:
        """Positions in (alpha_baseline, beta1, beta2) entering the link linearly."""
        return _SHARED_INDEX[self]

    @property
    def tag(self) -> str:
        return _TAGS[self]

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, value) -> "ModelVariant":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip()
            if key.isdigit():
                return cls(int(key))
            for member in cls:
                if key.lower() in (member.tag.lower(), member.name.lower()):
                    return member
            raise ValueError(f"unknown model variant {value!r}")
        return cls(int(value))


_NU_DIM = {1: 0, 2: 1, 3: 1, 4: 1, 5: 1, 6: 3}
_SHARED_INDEX = {1: (), 2: (), 3: (0,), 4: (1,), 5: (2,), 6: (0, 1, 2)}
_TAGS = {
    1: "Separate",
    2: "TrajectoryAtDropout",
    3: "Baseline",
    4: "PreSlope",
    5: "PostSlope",
    6: "AllShared",
}
_LABELS = {
    1: "Separate analysis",
    2: "Disease activity at time of dropout",
    3: "Baseline disease activity",
    4: "Initial change in disease activity after treatment",
    5: "Long-term change in disease activity",
    6: "Sharing all parameters from the trajectory",
}


# ---------------------------------------------------------------------------
# Scores and trajectories
# ---------------------------------------------------------------------------

def das28_score(tender28, swollen28, esr, gh_vas):
    """DAS28-ESR composite score.

    ``0.56*sqrt(T) + 0.28*sqrt(S) + 0.70*ln(ESR) + 0.014*GH`` with joint counts
    in 0..28, ESR in mm/hr (> 0) and patient global health on a 0..100 VAS.
    Accepts scalars or arrays; raises ``ValueError`` on out-of-range input.
    """
    t = np.asarray(tender28, dtype=float)
    s = np.asarray(swollen28, dtype=float)
    e = np.asarray(esr, dtype=float)
    g = np.asarray(gh_vas, dtype=float)
    for name, arr in (("tender28", t), ("swollen28", s), ("esr", e), ("gh_vas", g)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} must be finite")
    if np.any((t < 0) | (t > 28)) or np.any((s < 0) | (s > 28)):
        raise ValueError("joint counts must lie in 0..28")
    if np.any(e <= 0):
        raise ValueError("esr must be > 0")
    if np.any((g < 0) | (g > 100)):
        raise ValueError("gh_vas must lie in 0..100")
    score = 0.56 * np.sqrt(t) + 0.28 * np.sqrt(s) + 0.70 * np.log(e) + 0.014 * g
    return float(score) if score.ndim == 0 else score


def _trajectory(a, b1, b2, k, t):
    return a + b1 * np.minimum(t, k) + b2 * np.maximum(t - k, 0.0)


def _slope(b1, b2, k, t):
    return np.where(t < k, b1, b2)


@dataclass
class SubjectEffects:
    """Subject-level latents; fields are scalars for one subject or (N,) arrays.

    ``log_dropout`` holds complete-data log dropout times, shape (N, 2) in risk
    order (AE, EFFY): the observed value for an observed event, the current
    imputation (strictly above the log censoring time) for a censored risk.
    """

    alpha_baseline: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    kappa: np.ndarray
    log_dropout: Optional[np.ndarray] = None

    @classmethod
    def from_matrix(cls, mat, log_dropout=None) -> "SubjectEffects":
        mat = np.asarray(mat, dtype=float)
        return cls(mat[..., 0], mat[..., 1], mat[..., 2], mat[..., 3], log_dropout)

    def as_matrix(self) -> np.ndarray:
        return np.stack(
            np.broadcast_arrays(self.alpha_baseline, self.beta1, self.beta2, self.kappa),
            axis=-1,
        ).astype(float)

    def copy(self) -> "SubjectEffects":
        ld = None if self.log_dropout is None else np.array(self.log_dropout, dtype=float)
        return SubjectEffects(
            np.array(self.alpha_baseline, dtype=float),
            np.array(self.beta1, dtype=float),
            np.array(self.beta2, dtype=float),
            np.array(self.kappa, dtype=float),
            ld,
        )

    def subset(self, idx) -> "SubjectEffects":
        ld = None if self.log_dropout is None else np.asarray(self.log_dropout)[idx]
        return SubjectEffects(
            np.asarray(self.alpha_baseline)[idx],
            np.asarray(self.beta1)[idx],
            np.asarray(self.beta2)[idx],
            np.asarray(self.kappa)[idx],
            ld,
        )


def eval_trajectory(effects: SubjectEffects, t):
    """Log-scale mean score at week ``t``: two lines meeting at ``kappa``.

    ``alpha_baseline + beta1*t`` before the change point and
    ``alpha_baseline + beta1*kappa + beta2*(t - kappa)`` after it.
    """
    return _trajectory(effects.alpha_baseline, effects.beta1, effects.beta2,
                       effects.kappa, np.asarray(t, dtype=float))


def latent_link(variant, effects: SubjectEffects, dropout_time=None, horizon=np.inf):
    """Shared latent vector entering the dropout linear predictor.

    For the trajectory-at-dropout link the trajectory is evaluated at
    ``min(dropout_time, horizon)``; beyond the study horizon the score process
    is never observed, so the link is frozen there.
    """
    variant = ModelVariant.parse(variant)
    if variant is ModelVariant.TRAJECTORY_AT_DROPOUT:
        if dropout_time is None:
            raise ValueError("trajectory-at-dropout link needs a dropout time")
        t = np.minimum(np.asarray(dropout_time, dtype=float), horizon)
        return np.asarray(eval_trajectory(effects, t), dtype=float)[..., None]
    cols = (effects.alpha_baseline, effects.beta1, effects.beta2)
    if not variant.shared_index:
        shape = np.shape(effects.alpha_baseline)
        return np.zeros(shape + (0,))
    return np.stack([np.asarray(cols[j], dtype=float) for j in variant.shared_index], axis=-1)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def treatment_group(x) -> int:
    """0 for the reference arm, j for dummy x_j = 1 (1-based j)."""
    x = tuple(int(v) for v in x)
    return 0 if not any(x) else x.index(1) + 1


@dataclass
class SubjectRecord:
    id: str
    x: tuple
    visits: tuple = ()
    dropout: dict = field(default_factory=dict)
    noninformative_exit_week: Optional[float] = None

    @property
    def weeks(self) -> np.ndarray:
        return np.array([v[0] for v in self.visits], dtype=float)

    @property
    def log_das28(self) -> np.ndarray:
        return np.array([v[1] for v in self.visits], dtype=float)

    @property
    def group(self) -> int:
        return treatment_group(self.x)

    @property
    def exit_cause(self) -> str:
        for risk in RISKS:
            if self.dropout[risk][1]:
                return risk
        return "OTHER" if self.noninformative_exit_week is not None else "COMPLETED"

    def validate(self, study_end_week: float = np.inf, m: Optional[int] = None) -> None:
        if m is not None and len(self.x) != m:
            raise DataError(f"subject {self.id}: expected {m} treatment dummies")
        if any(v not in (0, 1) for v in self.x) or sum(self.x) > 1:
            raise DataError(f"subject {self.id}: dummies must be 0/1 with at most one 1")
        weeks = self.weeks
        y = self.log_das28
        if len(weeks):
            if np.any(np.diff(weeks) <= 0):
                raise DataError(f"subject {self.id}: visit weeks not strictly increasing")
            if weeks[0] < 0 or weeks[-1] > study_end_week:
                raise DataError(f"subject {self.id}: visit outside [0, study_end_week]")
            if not np.all(np.isfinite(y)):
                raise DataError(f"subject {self.id}: non-finite log score")
        if set(self.dropout) != set(RISKS):
            raise DataError(f"subject {self.id}: dropout must give both risks {RISKS}")
        for risk in RISKS:
            time, event = self.dropout[risk]
            if not (np.isfinite(time) and time > 0):
                raise DataError(f"subject {self.id}: {risk} time must be finite and > 0")
            if event and len(weeks) and weeks[-1] > time:
                raise DataError(f"subject {self.id}: visit after {risk} dropout")
        if sum(bool(self.dropout[r][1]) for r in RISKS) > 1:
            raise DataError(f"subject {self.id}: more than one observed dropout cause")


@dataclass
class TrialData:
    subjects: list
    study_end_week: float = 156.0
    n_treatments: int = 3

    def __post_init__(self):
        m = self.n_treatments - 1
        for s in self.subjects:
            s.validate(self.study_end_week, m)

    def __eq__(self, other):
        if not isinstance(other, TrialData):
            return NotImplemented
        return (self.study_end_week == other.study_end_week
                and self.n_treatments == other.n_treatments
                and self.subjects == other.subjects)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @cached_property
    def packed(self) -> "PackedData":
        return PackedData.from_trial(self)


@dataclass
class PackedData:
    """Flat array view of a trial, the sampler's working representation."""

    x: np.ndarray            # (N, m) dummies
    obs_subject: np.ndarray  # (n_obs,) subject index per visit
    obs_week: np.ndarray
    obs_y: np.ndarray        # log scores
    event: np.ndarray        # (N, 2) bool, risk observed
    log_time: np.ndarray     # (N, 2) log event time, or log censoring time
    horizon: float
    n_groups: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(len(self.event), self.n_groups - 1)
        self.n_subjects = len(self.event)
        self.m = self.x.shape[1]
        self.p = self.m + 1
        self.Z = np.column_stack([np.ones(self.n_subjects), self.x])
        self.group = np.where(self.x.any(axis=1), self.x.argmax(axis=1) + 1, 0) \
            if self.m else np.zeros(self.n_subjects, dtype=int)
        self.obs_subject = np.asarray(self.obs_subject, dtype=np.int64)
        order = np.argsort(self.obs_subject, kind="stable")
        self.obs_subject = self.obs_subject[order]
        self.obs_week = np.ascontiguousarray(self.obs_week, dtype=float)[order]
        self.obs_y = np.ascontiguousarray(self.obs_y, dtype=float)[order]
        self.n_visits = np.bincount(self.obs_subject, minlength=self.n_subjects)
        self.starts = np.concatenate([[0], np.cumsum(self.n_visits)]).astype(np.int64)
        self.n_obs = len(self.obs_y)
        self.censored = ~self.event
        self.sum_y = self.sum_by_subject(self.obs_y)

    @classmethod
    def from_trial(cls, data: TrialData) -> "PackedData":
        N = data.n_subjects
        m = data.n_treatments - 1
        x = np.array([s.x for s in data.subjects], dtype=float).reshape(N, m)
        subj, week, y = [], [], []
        event = np.zeros((N, 2), dtype=bool)
        log_time = np.zeros((N, 2))
        for i, s in enumerate(data.subjects):
            for w, v in s.visits:
                subj.append(i)
                week.append(w)
                y.append(v)
            for k, risk in enumerate(RISKS):
                time, ev = s.dropout[risk]
                event[i, k] = bool(ev)
                log_time[i, k] = math.log(time)
        return cls(x, np.array(subj, dtype=int), np.array(week, dtype=float),
                   np.array(y, dtype=float), event, log_time,
                   float(data.study_end_week), data.n_treatments)

    def sum_by_subject(self, values) -> np.ndarray:
        return np.bincount(self.obs_subject, weights=values, minlength=self.n_subjects)



# ---------------------------------------------------------------------------
# Parameters and priors
# ---------------------------------------------------------------------------

@dataclass
class Hyperparams:
    """Population-level parameters.

    gamma: (4, m+1) regression of (alpha, beta1, beta2, kappa) on [1, x];
    sigma2_effects: (4,) subject-level variances in the same order;
    phi: (2, m+1), omega: (2, q), varsigma2: (2, G) for risks (AE, EFFY), with
    G = number of treatment groups, or 1 when dropout variances are pooled.
    """

    gamma: np.ndarray
    sigma2_resid: float
    sigma2_effects: np.ndarray
    phi: np.ndarray
    omega: np.ndarray
    varsigma2: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.sigma2_effects = np.asarray(self.sigma2_effects, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float).reshape(2, -1)
        self.varsigma2 = np.asarray(self.varsigma2, dtype=float).reshape(2, -1)
        self.sigma2_resid = float(self.sigma2_resid)

    gamma_alpha = property(lambda self: self.gamma[0])
    gamma_beta1 = property(lambda self: self.gamma[1])
    gamma_beta2 = property(lambda self: self.gamma[2])
    gamma_kappa = property(lambda self: self.gamma[3])
    sigma2_alpha = property(lambda self: self.sigma2_effects[0])
    sigma2_beta1 = property(lambda self: self.sigma2_effects[1])
    sigma2_beta2 = property(lambda self: self.sigma2_effects[2])
    sigma2_kappa = property(lambda self: self.sigma2_effects[3])

    @classmethod
    def default(cls, n_treatments=3, nu_dim=3, n_var_groups=3) -> "Hyperparams":
        p = n_treatments
        return cls(np.zeros((4, p)), 1.0, np.ones(4), np.zeros((2, p)),
                   np.zeros((2, nu_dim)), np.ones((2, n_var_groups)))

    def copy(self) -> "Hyperparams":
        return Hyperparams(self.gamma.copy(), self.sigma2_resid, self.sigma2_effects.copy(),
                           self.phi.copy(), self.omega.copy(), self.varsigma2.copy())

    def check(self, variant=None) -> None:
        if self.sigma2_resid <= 0 or np.any(self.sigma2_effects <= 0) or np.any(self.varsigma2 <= 0):
            raise ValueError("all variances must be > 0")
        if variant is not None and self.omega.shape[1] != ModelVariant.parse(variant).nu_dim:
            raise ValueError(
                f"omega has {self.omega.shape[1]} columns, variant needs "
                f"{ModelVariant.parse(variant).nu_dim}")

    def flat(self) -> dict:
        """Named scalar view, e.g. ``gamma_kappa[1]`` or ``varsigma2_EFFY[2]``."""
        out = {}
        for l, level in enumerate(LEVELS):
            for j, v in enumerate(self.gamma[l]):
                out[f"gamma_{level}[{j}]"] = float(v)
        out["sigma2_resid"] = self.sigma2_resid
        for l, level in enumerate(LEVELS):
            out[f"sigma2_{level}"] = float(self.sigma2_effects[l])
        for name, arr in (("phi", self.phi), ("omega", self.omega), ("varsigma2", self.varsigma2)):
            for k, risk in enumerate(RISKS):
                for j, v in enumerate(arr[k]):
                    out[f"{name}_{risk}[{j}]"] = float(v)
        return out


@dataclass
class Priors:
    """Prior hyperparameters.

    Normal priors: gamma rows (alpha, beta1, beta2, kappa) use ``gamma_mean`` /
    ``gamma_var`` (per level, or per coefficient when given as (4, m+1));
    phi and omega likewise with (2,) or (2, k) shapes.  Inverse-gamma (shape,
    rate) pairs for the residual, the four subject-level and the dropout
    variances.
    """

    gamma_mean: Sequence = (0.0, 0.0, 0.0, 12.0)
    gamma_var: Sequence = (1000.0, 1000.0, 1000.0, 100.0)
    phi_mean: Sequence = 0.0
    phi_var: Sequence = 1000.0
    omega_mean: Sequence = 0.0
    omega_var: Sequence = 1000.0
    resid_ig: tuple = (0.01, 0.01)
    effects_ig: tuple = ((0.01, 0.01),) * 4
    dropout_ig: tuple = (0.01, 0.01)

    def with_kappa(self, mean: float, var: float) -> "Priors":
        gm = np.array(np.broadcast_to(self.gamma_mean, (4,)) if np.ndim(self.gamma_mean) <= 1
                      else self.gamma_mean, dtype=float)
        gv = np.array(np.broadcast_to(self.gamma_var, (4,)) if np.ndim(self.gamma_var) <= 1
                      else self.gamma_var, dtype=float)
        gm[3] = mean
        gv[3] = var
        return replace(self, gamma_mean=gm, gamma_var=gv)

    def gamma_moments(self, p):
        return _level_broadcast(self.gamma_mean, 4, p), _level_broadcast(self.gamma_var, 4, p)

    def phi_moments(self, p):
        return _level_broadcast(self.phi_mean, 2, p), _level_broadcast(self.phi_var, 2, p)

    def omega_moments(self, q):
        return _level_broadcast(self.omega_mean, 2, q), _level_broadcast(self.omega_var, 2, q)

    def as_dict(self) -> dict:
        def conv(v):
            return np.asarray(v, dtype=float).tolist()
        return {k: conv(getattr(self, k)) for k in self.__dataclass_fields__}


def _level_broadcast(value, rows, cols):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == rows:
        arr = arr[:, None]
    return np.broadcast_to(arr, (rows, cols)).astype(float)


DEFAULT_PRIORS = Priors()


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def invgamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) - (shape + 1.0) * np.log(x) - rate / x


# ---------------------------------------------------------------------------
# Vectorized model
# ---------------------------------------------------------------------------

class JointModel:
    """Data + latent link + priors, with vectorized log-densities.

    ``effects`` arguments are :class:`SubjectEffects` with (N,) arrays.
    """

    def __init__(self, data, variant=ModelVariant.ALL_SHARED, priors: Priors = DEFAULT_PRIORS):
        self.data = data
        self.packed = data.packed if isinstance(data, TrialData) else data
        self.variant = ModelVariant.parse(variant)
        self.priors = priors
        pk = self.packed
        self.horizon = pk.horizon
        self._sel = np.zeros((3, self.variant.nu_dim))
        for col, j in enumerate(self.variant.shared_index):
            self._sel[j, col] = 1.0

    # -- helpers ------------------------------------------------------------
    def var_index(self, hyper: Hyperparams) -> np.ndarray:
        if hyper.varsigma2.shape[1] == 1:
            return np.zeros(self.packed.n_subjects, dtype=int)
        return self.packed.group

    def dropout_var(self, hyper: Hyperparams) -> np.ndarray:
        """(N, 2) dropout variances per subject and risk."""
        return hyper.varsigma2[:, self.var_index(hyper)].T

    def effect_means(self, hyper: Hyperparams) -> np.ndarray:
        """(N, 4) prior means of (alpha, beta1, beta2, kappa)."""
        return self.packed.Z @ hyper.gamma.T

    def latent(self, effects: SubjectEffects, log_time) -> np.ndarray:
        """(N, 2, q) link values per subject and risk."""
        N = self.packed.n_subjects
        if self.variant is ModelVariant.TRAJECTORY_AT_DROPOUT:
            t = np.minimum(np.exp(log_time), self.horizon)
            psi = _trajectory(effects.alpha_baseline[:, None], effects.beta1[:, None],
                              effects.beta2[:, None], effects.kappa[:, None], t)
            return psi[..., None]
        if not self.variant.nu_dim:
            return np.zeros((N, 2, 0))
        mat = np.column_stack([effects.alpha_baseline, effects.beta1, effects.beta2]) @ self._sel
        return np.broadcast_to(mat[:, None, :], (N, 2, mat.shape[1]))

    def theta(self, effects: SubjectEffects, hyper: Hyperparams, log_time) -> np.ndarray:
        """(N, 2) dropout linear predictor at the given log times."""
        base = self.packed.Z @ hyper.phi.T
        if not self.variant.nu_dim:
            return base
        return base + np.einsum("nkq,kq->nk", self.latent(effects, log_time), hyper.omega)

    def log_jacobian(self, effects: SubjectEffects, hyper: Hyperparams, log_time) -> np.ndarray:
        """log |d(residual)/d(log time)| for the self-referential link, else 0.

        With the trajectory-at-dropout link the log time appears on both sides
        of its regression; the change of variables from the normal residual to
        the log time contributes ``1 - omega * psi'(d) * d`` (for d < horizon).
        Non-monotone residual maps get zero density.
        """
        if self.variant is not ModelVariant.TRAJECTORY_AT_DROPOUT:
            return np.zeros_like(log_time)
        d = np.exp(log_time)
        slope = _slope(effects.beta1[:, None], effects.beta2[:, None], effects.kappa[:, None], d)
        jac = np.where(d < self.horizon, 1.0 - hyper.omega[:, 0][None, :] * slope * d, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(jac > 0, np.log(np.where(jac > 0, jac, 1.0)), -np.inf)

    # -- densities ----------------------------------------------------------
    def long_ss(self, effects: SubjectEffects) -> np.ndarray:
        pk = self.packed
        f = lambda v: np.ascontiguousarray(v, dtype=float)
        return _kernels.trajectory_ss(pk.starts, pk.obs_week, pk.obs_y, f(effects.alpha_baseline),
                                      f(effects.beta1), f(effects.beta2), f(effects.kappa))

    def long_loglik(self, effects: SubjectEffects, sigma2_resid: float) -> np.ndarray:
        if sigma2_resid <= 0:
            raise ValueError("sigma2_resid must be > 0")
        n = self.packed.n_visits
        return -0.5 * n * (LOG_2PI + math.log(sigma2_resid)) - 0.5 * self.long_ss(effects) / sigma2_resid

    def dropout_loglik(self, effects: SubjectEffects, hyper: Hyperparams,
                       mode: str = "augmented") -> np.ndarray:
        """(N, 2) per-risk dropout log-densities.

        Observed events: lognormal density of the dropout week.  Censored
        risks: ``augmented`` gives the complete-data normal density of the
        imputed log time (zero density at or below the censoring bound);
        ``marginal`` gives the log survival probability at the censoring time.
        """
        pk = self.packed
        var = self.dropout_var(hyper)
        if mode == "marginal":
            u = pk.log_time
            th = self.theta(effects, hyper, u)
            lj = self.log_jacobian(effects, hyper, u)
            ev = normal_logpdf(u, th, var) - u + lj
            cens = log_ndtr((th - u) / np.sqrt(var))
            return np.where(pk.event, ev, cens)
        if mode != "augmented":
            raise ValueError(f"unknown mode {mode!r}")
        if effects.log_dropout is None:
            if pk.censored.any():
                raise ValueError("augmented mode needs imputed times for censored risks")
            u = pk.log_time
        else:
            u = np.where(pk.event, pk.log_time, effects.log_dropout)
            if np.any(pk.censored & ~np.isfinite(u)):
                raise ValueError("augmented mode needs imputed times for censored risks")
        th = self.theta(effects, hyper, u)
        dens = normal_logpdf(u, th, var) + self.log_jacobian(effects, hyper, u)
        return np.where(pk.event, dens - u, np.where(u > pk.log_time, dens, -np.inf))

    def subject_log_prior(self, effects: SubjectEffects, hyper: Hyperparams) -> np.ndarray:
        mu = self.effect_means(hyper)
        e = effects.as_matrix()
        return normal_logpdf(e, mu, hyper.sigma2_effects[None, :]).sum(axis=1)

    def hyper_log_prior(self, hyper: Hyperparams) -> float:
        pr = self.priors
        hyper.check(self.variant)
        p = self.packed.p
        gm, gv = pr.gamma_moments(p)
        pm, pv = pr.phi_moments(p)
        total = normal_logpdf(hyper.gamma, gm, gv).sum() + normal_logpdf(hyper.phi, pm, pv).sum()
        q = hyper.omega.shape[1]
        if q:
            om, ov = pr.omega_moments(q)
            total += normal_logpdf(hyper.omega, om, ov).sum()
        total += invgamma_logpdf(hyper.sigma2_resid, *pr.resid_ig)
        for l in range(4):
            total += invgamma_logpdf(hyper.sigma2_effects[l], *pr.effects_ig[l])
        total += invgamma_logpdf(hyper.varsigma2, *pr.dropout_ig).sum()
        return float(total)

    def log_prior(self, effects: SubjectEffects, hyper: Hyperparams) -> float:
        return self.hyper_log_prior(hyper) + float(self.subject_log_prior(effects, hyper).sum())

    def log_posterior(self, effects: SubjectEffects, hyper: Hyperparams) -> float:
        """Unnormalized complete-data log posterior."""
        return (float(self.long_loglik(effects, hyper.sigma2_resid).sum())
                + float(self.dropout_loglik(effects, hyper, "augmented").sum())
                + self.log_prior(effects, hyper))

    def deviance(self, effects: SubjectEffects, hyper: Hyperparams) -> float:
        """-2 x observed-data log-likelihood given subject effects (no priors)."""
        ll = self.long_loglik(effects, hyper.sigma2_resid).sum()
        ll += self.dropout_loglik(effects, hyper, "marginal").sum()
        return float(-2.0 * ll)


# ---------------------------------------------------------------------------
# Per-subject API
# ---------------------------------------------------------------------------

def _single(subject: SubjectRecord, horizon=np.inf) -> PackedData:
    m = len(subject.x)
    tmp = TrialData.__new__(TrialData)
    tmp.subjects = [subject]
    tmp.study_end_week = horizon
    tmp.n_treatments = m + 1
    return PackedData.from_trial(tmp)


def _as_arrays(effects: SubjectEffects) -> SubjectEffects:
    ld = None if effects.log_dropout is None else \
        np.asarray(effects.log_dropout, dtype=float).reshape(1, 2)
    return SubjectEffects(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in
                            (effects.alpha_baseline, effects.beta1, effects.beta2, effects.kappa)),
                          ld)


def loglik_longitudinal(subject: SubjectRecord, effects: SubjectEffects, sigma2_resid: float) -> float:
    """Sum of normal log-densities of the subject's log scores."""
    model = JointModel(_single(subject), ModelVariant.SEPARATE)
    value = float(model.long_loglik(_as_arrays(effects), sigma2_resid)[0])
    if not np.isfinite(value):
        raise DataError(f"subject {subject.id}: non-finite longitudinal log-likelihood")
    return value


def loglik_dropout(subject: SubjectRecord, effects: SubjectEffects, hyper: Hyperparams,
                   variant, mode: str = "augmented", horizon: float = np.inf) -> float:
    """Both risks' dropout log-density for one subject (see JointModel.dropout_loglik)."""
    model = JointModel(_single(subject, horizon), variant)
    hyper.check(model.variant)
    g = subject.group if hyper.varsigma2.shape[1] > 1 else 0
    h = replace(hyper, varsigma2=hyper.varsigma2[:, [g]])
    return float(model.dropout_loglik(_as_arrays(effects), h, mode).sum())


def log_prior(effects: SubjectEffects, hyper: Hyperparams, variant, x,
              priors: Priors = DEFAULT_PRIORS) -> float:
    """Subject-level normal priors plus all hyper-priors.

    ``x`` is the (N, m) matrix of treatment dummies matching ``effects``.
    """
    x = np.asarray(x, dtype=float)
    N = x.shape[0]
    pk = PackedData(x, np.zeros(0, dtype=int), np.zeros(0), np.zeros(0),
                    np.zeros((N, 2), dtype=bool), np.zeros((N, 2)), np.inf, x.shape[1] + 1)
    model = JointModel(pk, variant, priors)
    eff = SubjectEffects(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in
                           (effects.alpha_baseline, effects.beta1, effects.beta2, effects.kappa)))
    return model.log_prior(eff, hyper)


def joint_log_posterior(effects: SubjectEffects, hyper: Hyperparams, data: TrialData, variant,
                        priors: Priors = DEFAULT_PRIORS) -> float:
    """Longitudinal + augmented dropout + prior log-density for the whole trial."""
    return JointModel(data, variant, priors).log_posterior(effects, hyper)
