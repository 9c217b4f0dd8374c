"""Forward simulation of trials from the joint model, with ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import pandas as pd

from .model import (
    RISKS,
    Hyperparams,
    ModelVariant,
    PackedData,
    SubjectEffects,
    SubjectRecord,
    TrialData,
    _trajectory,
)

# dense early, sparse late; weeks
DEFAULT_VISIT_WEEKS = (0, 2, 4, 8, 12, 16, 20, 24, 36, 48, 60, 72, 84, 96, 108, 120, 132, 144, 156)

# group 0 is the reference arm (combination therapy), dummies x1 = MTX, x2 = ETAN
ARM_LABELS = ("MTX+ETAN", "MTX", "ETAN")
CAUSES = ("COMPLETED", "AE", "EFFY", "OTHER")
CAUSE_LABELS = {
    "COMPLETED": "Completed study",
    "AE": "Adverse event",
    "EFFY": "Inefficacious treatment",
    "OTHER": "Administrative/other",
}


def arm_label(g: int, n_treatments: int) -> str:
    return ARM_LABELS[g] if n_treatments == len(ARM_LABELS) else f"arm{g}"


@dataclass
class GenConfig:
    truth: Hyperparams
    variant: ModelVariant = ModelVariant.ALL_SHARED
    n_per_arm: Union[int, Sequence[int]] = 100
    visit_weeks: Sequence[float] = DEFAULT_VISIT_WEEKS
    study_end_week: float = 156.0
    # per-week probability of administrative/other exit (scalar or per arm)
    noninformative_hazard: Union[float, Sequence[float]] = 0.0

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)
        w = np.asarray(self.visit_weeks, dtype=float)
        if len(w) and (w[0] != 0 or np.any(np.diff(w) <= 0)):
            raise ValueError("visit weeks must start at 0 and increase strictly")
        if self.truth.omega.shape[1] != self.variant.nu_dim:
            raise ValueError("truth.omega does not match the variant's link dimension")
        self.truth.check()

    @property
    def n_treatments(self) -> int:
        return self.truth.gamma.shape[1]

    def arm_sizes(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.n_per_arm, dtype=int), (self.n_treatments,)).copy()

    def hazards(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.noninformative_hazard, dtype=float),
                               (self.n_treatments,)).copy()


@dataclass
class GroundTruth:
    effects: SubjectEffects
    latent_log_dropout: np.ndarray
    cause: np.ndarray
    noninformative_exit: np.ndarray
    fixed_point_converged: np.ndarray = field(default=None)


def design_for_arms(sizes) -> np.ndarray:
    """(N, m) dummies, arms stacked in order 0..m."""
    m = len(sizes) - 1
    rows = []
    for g, n in enumerate(sizes):
        row = np.zeros(m)
        if g:
            row[g - 1] = 1.0
        rows.append(np.tile(row, (int(n), 1)))
    return np.vstack(rows) if rows else np.zeros((0, m))


def solve_link_times(c, omega, sd_eps, effects_mat, horizon, max_iter=50, tol=1e-8):
    """Solve u = c + omega * psi(min(exp(u), horizon)) + sd_eps for u.

    Fixed-point iteration from u = c (up to ``max_iter`` rounds), then
    bisection for entries that did not converge.  Returns (u, converged).
    Arrays are (N, 2); ``omega`` is (2,).
    """
    a, b1, b2, k = (effects_mat[:, j:j + 1] for j in range(4))
    base = c + sd_eps

    def rhs(u):
        return base + omega[None, :] * _trajectory(a, b1, b2, k, np.minimum(np.exp(u), horizon))

    u = np.array(c, dtype=float)
    converged = np.zeros(u.shape, dtype=bool)
    for _ in range(max_iter):
        new = rhs(u)
        with np.errstate(invalid="ignore"):
            step = np.abs(new - u)
        u = np.where(converged, u, new)
        converged |= step < tol
        if converged.all():
            break
    if not converged.all():
        # the trajectory is bounded on [0, horizon], which brackets the root
        grid = np.stack([_trajectory(a, b1, b2, k, t) for t in (0.0, np.minimum(np.maximum(k, 0), horizon),
                                                               horizon)])
        bound = np.abs(omega)[None, :] * np.abs(grid).max(axis=0) + 1.0
        lo, hi = base - bound, base + bound
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            pos = mid - rhs(mid) > 0
            hi = np.where(pos, mid, hi)
            lo = np.where(pos, lo, mid)
        u = np.where(converged, u, 0.5 * (lo + hi))
    return u, converged


def simulate_arrays(truth: Hyperparams, variant, x, visit_weeks, horizon, hazard, rng) -> dict:
    """Vectorized core of ``simulate_trial``; returns flat arrays."""
    x = np.asarray(x, dtype=float)
    N = x.shape[0]
    Z = np.column_stack([np.ones(N), x])
    z_eff = rng.standard_normal((N, 4))
    eff = Z @ truth.gamma.T + np.sqrt(truth.sigma2_effects)[None, :] * z_eff
    return simulate_given_effects(truth, variant, x, eff, visit_weeks, horizon, hazard, rng)


def simulate_given_effects(truth: Hyperparams, variant, x, eff, visit_weeks, horizon, hazard,
                           rng) -> dict:
    """Dropout times, exits and visits given subject effects ``eff`` (N, 4)."""
    variant = ModelVariant.parse(variant)
    x = np.asarray(x, dtype=float)
    eff = np.asarray(eff, dtype=float)
    N = x.shape[0]
    Z = np.column_stack([np.ones(N), x])
    group = np.where(x.any(axis=1), x.argmax(axis=1) + 1, 0) if x.shape[1] else np.zeros(N, int)
    weeks = np.asarray(visit_weeks, dtype=float)
    eps = rng.standard_normal((N, 2))
    u_exit = 1.0 - rng.random(N)
    noise = rng.standard_normal((N, len(weeks)))

    G = truth.varsigma2.shape[1]
    vidx = group if G > 1 else np.zeros(N, dtype=int)
    sd = np.sqrt(truth.varsigma2[:, vidx].T)
    c = Z @ truth.phi.T
    converged = np.ones((N, 2), dtype=bool)
    if variant is ModelVariant.TRAJECTORY_AT_DROPOUT:
        u, converged = solve_link_times(c, truth.omega[:, 0], sd * eps, eff, horizon)
    else:
        nu = eff[:, list(variant.shared_index)]
        u = c + nu @ truth.omega.T + sd * eps
    d = np.exp(u)

    h = np.asarray(hazard, dtype=float)[group] if np.ndim(hazard) else np.full(N, float(hazard))
    with np.errstate(divide="ignore"):
        rate = -np.log1p(-h)
        exit_time = np.where(h > 0, -np.log(u_exit) / np.where(rate > 0, rate, 1.0), np.inf)

    first = d.argmin(axis=1)
    t_inf = d.min(axis=1)
    informative = t_inf < np.minimum(exit_time, horizon)
    other = ~informative & (exit_time < horizon)
    end = np.where(informative, t_inf, np.where(other, exit_time, horizon))
    cause = np.where(informative, np.where(first == 0, "AE", "EFFY"),
                     np.where(other, "OTHER", "COMPLETED"))

    event = np.zeros((N, 2), dtype=bool)
    event[informative, first[informative]] = True
    times = np.where(event, d, end[:, None])
    # dropout stops collection strictly before the exit; completers keep the final visit
    keep = np.where((informative | other)[:, None], weeks[None, :] < end[:, None],
                    weeks[None, :] <= horizon)
    psi = _trajectory(eff[:, :1], eff[:, 1:2], eff[:, 2:3], eff[:, 3:4], weeks[None, :])
    score = np.exp(psi + np.sqrt(truth.sigma2_resid) * noise)
    obs_subject, obs_col = np.nonzero(keep)
    return {
        "x": x,
        "effects": eff,
        "latent_log_dropout": u,
        "converged": converged,
        "event": event,
        "times": times,
        "cause": cause,
        "exit_time": np.where(other, exit_time, np.inf),
        "obs_subject": obs_subject,
        "obs_week": weeks[obs_col],
        "obs_score": score[obs_subject, obs_col],
    }


def packed_from_arrays(sim: dict, horizon: float, n_treatments: int) -> PackedData:
    return PackedData(sim["x"], sim["obs_subject"], sim["obs_week"], np.log(sim["obs_score"]),
                      sim["event"], np.log(sim["times"]), float(horizon), n_treatments)


def simulate_trial(gen: GenConfig, seed) -> tuple:
    """Simulate a trial; returns (TrialData, GroundTruth)."""
    rng = np.random.default_rng(seed)
    x = design_for_arms(gen.arm_sizes())
    H = float(gen.study_end_week)
    sim = simulate_arrays(gen.truth, gen.variant, x, gen.visit_weeks, H, gen.hazards(), rng)
    N = x.shape[0]
    width = max(4, len(str(N)))
    by_subject = [[] for _ in range(N)]
    for i, w, s in zip(sim["obs_subject"], sim["obs_week"], sim["obs_score"]):
        by_subject[i].append((float(w), float(np.log(s))))
    subjects = []
    for i in range(N):
        dropout = {risk: (float(sim["times"][i, k]), bool(sim["event"][i, k]))
                   for k, risk in enumerate(RISKS)}
        ex = sim["exit_time"][i]
        subjects.append(SubjectRecord(
            id=f"S{i + 1:0{width}d}",
            x=tuple(int(v) for v in x[i]),
            visits=tuple(by_subject[i]),
            dropout=dropout,
            noninformative_exit_week=float(ex) if np.isfinite(ex) else None,
        ))
    data = TrialData(subjects, H, gen.n_treatments)
    truth = GroundTruth(
        effects=SubjectEffects.from_matrix(sim["effects"], log_dropout=sim["latent_log_dropout"]),
        latent_log_dropout=sim["latent_log_dropout"],
        cause=sim["cause"],
        noninformative_exit=sim["exit_time"],
        fixed_point_converged=sim["converged"],
    )
    return data, truth


def disposition_table(data: TrialData) -> pd.DataFrame:
    """Counts and percentages by exit cause, per arm and in total (long format)."""
    return disposition_from_causes([s.exit_cause for s in data.subjects],
                                   [s.group for s in data.subjects], data.n_treatments)


def disposition_from_causes(cause, group, n_treatments: int) -> pd.DataFrame:
    cause = np.asarray(cause)
    group = np.asarray(group, dtype=int)
    labels = [arm_label(g, n_treatments) for g in range(n_treatments)]
    rows = []
    for arm, mask in [(labels[g], group == g) for g in range(n_treatments)] + \
            [("Total", np.ones(len(group), dtype=bool))]:
        n = int(mask.sum())
        for c in CAUSES:
            k = int((cause[mask] == c).sum())
            rows.append({"arm": arm, "cause": c, "label": CAUSE_LABELS[c], "n_arm": n,
                         "count": k, "percent": 100.0 * k / n if n else 0.0})
    return pd.DataFrame(rows)


def expected_disposition(gen: GenConfig, n_per_arm: int = 100_000, seed=0) -> pd.DataFrame:
    """Large-sample disposition of a generator config (arrays only, no records)."""
    rng = np.random.default_rng(seed)
    sizes = [n_per_arm] * gen.n_treatments
    x = design_for_arms(sizes)
    sim = simulate_arrays(gen.truth, gen.variant, x, gen.visit_weeks, float(gen.study_end_week),
                          gen.hazards(), rng)
    return disposition_from_causes(sim["cause"], np.repeat(np.arange(gen.n_treatments), sizes),
                                   gen.n_treatments)


# ---------------------------------------------------------------------------
# Shipped example configuration
# ---------------------------------------------------------------------------

# Illustrative truth on the log-DAS28 scale (weeks).  Columns of gamma/phi are
# (intercept = MTX+ETAN, MTX dummy, ETAN dummy).  Both informative exits are
# driven mainly by the post-change slope, which is largely unobserved for
# early leavers; inefficacy is the more strongly coupled risk.  phi and the
# administrative exit hazards are tuned so the expected disposition matches
# the three-arm TEMPO pattern (see disposition_table).
TEMPO_LIKE_TRUTH = Hyperparams(
    gamma=[[1.85, 0.02, 0.01],
           [-0.064, 0.028, 0.015],
           [-0.001, 0.0015, 0.001],
           [12.0, 2.0, 1.0]],
    sigma2_resid=0.15 ** 2,
    sigma2_effects=[0.15 ** 2, 0.012 ** 2, 0.004 ** 2, 3.0 ** 2],
    phi=[[7.130, 0.020, 0.133],
         [9.961, -0.362, -0.648]],
    omega=[[-1.0, -10.0, -250.0],
           [-2.0, -20.0, -500.0]],
    varsigma2=[[1.3 ** 2] * 3,
               [1.0 ** 2] * 3],
)
TEMPO_LIKE_HAZARD = (0.00144, 0.00183, 0.00132)

# Same trajectories and disposition, but dropout independent of the
# trajectory (omega = 0); phi and hazards re-tuned for that case.
NULL_COUPLING_TRUTH = Hyperparams(
    gamma=TEMPO_LIKE_TRUTH.gamma,
    sigma2_resid=TEMPO_LIKE_TRUTH.sigma2_resid,
    sigma2_effects=TEMPO_LIKE_TRUTH.sigma2_effects,
    phi=[[6.004, -0.360, -0.067],
         [6.481, -0.799, -0.691]],
    omega=np.zeros((2, 3)),
    varsigma2=TEMPO_LIKE_TRUTH.varsigma2,
)
NULL_COUPLING_HAZARD = (0.00138, 0.00163, 0.00121)

TEMPO_ARM_SIZES = (231, 228, 223)
TARGET_DISPOSITION = {  # arm -> cause -> percent, arms in design order
    "MTX+ETAN": {"COMPLETED": 57.1, "AE": 20.0, "EFFY": 5.6, "OTHER": 17.3},
    "MTX": {"COMPLETED": 38.6, "AE": 25.4, "EFFY": 18.4, "OTHER": 17.6},
    "ETAN": {"COMPLETED": 48.0, "AE": 20.2, "EFFY": 17.5, "OTHER": 14.3},
    "Total": {"COMPLETED": 47.9, "AE": 21.8, "EFFY": 13.8, "OTHER": 16.4},
}


def tempo_like_config(n_per_arm=TEMPO_ARM_SIZES, **overrides) -> GenConfig:
    """Example config calibrated to the TEMPO disposition pattern (illustrative)."""
    kw = dict(truth=TEMPO_LIKE_TRUTH.copy(), variant=ModelVariant.ALL_SHARED,
              n_per_arm=n_per_arm, noninformative_hazard=TEMPO_LIKE_HAZARD)
    kw.update(overrides)
    return GenConfig(**kw)


def null_coupling_config(n_per_arm=TEMPO_ARM_SIZES, **overrides) -> GenConfig:
    kw = dict(truth=NULL_COUPLING_TRUTH.copy(), variant=ModelVariant.ALL_SHARED,
              n_per_arm=n_per_arm, noninformative_hazard=NULL_COUPLING_HAZARD)
    kw.update(overrides)
    return GenConfig(**kw)
