"""DIC, convergence diagnostics, posterior summaries and population curves."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .model import Hyperparams, JointModel, ModelVariant, SubjectEffects, _trajectory


class DiagnosticsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Deviance and DIC
# ---------------------------------------------------------------------------

def deviance(effects: SubjectEffects, hyper: Hyperparams, data, variant) -> float:
    """-2 x observed-data log-likelihood given subject effects; priors and imputed times excluded."""
    model = JointModel(data, variant)
    if model.packed.n_subjects == 0:
        return 0.0
    return model.deviance(effects, hyper)


@dataclass(frozen=True)
class DicResult:
    dbar: float
    d_at_mean: float
    p_d: float
    dic: float


def dic_from_deviance(deviances, d_at_mean: float) -> DicResult:
    dev = np.asarray(deviances, dtype=float).ravel()
    if dev.size == 0:
        raise DiagnosticsError("no retained draws")
    dbar = float(dev.mean())
    p_d = dbar - float(d_at_mean)
    return DicResult(dbar, float(d_at_mean), p_d, 2.0 * dbar - float(d_at_mean))


def posterior_means(chains) -> tuple:
    """(SubjectEffects, Hyperparams) at the component-wise posterior mean over all chains."""
    chains = _non_empty(chains)
    keys = chains[0].hyper_draws.keys()
    mean = {k: np.concatenate([c.hyper_draws[k] for c in chains]).mean(axis=0) for k in keys}
    hyper = Hyperparams(mean["gamma"], float(mean["sigma2_resid"]), mean["sigma2_effects"],
                        mean["phi"], mean["omega"], mean["varsigma2"])
    eff = np.concatenate([c.effects for c in chains]).mean(axis=0)
    return SubjectEffects.from_matrix(eff), hyper


def dic(chains, data, variant=None) -> DicResult:
    """Conditional DIC (subject effects in focus) pooled over chains."""
    chains = _non_empty(chains)
    variant = chains[0].variant if variant is None else ModelVariant.parse(variant)
    eff, hyper = posterior_means(chains)
    d_hat = deviance(eff, hyper, data, variant)
    return dic_from_deviance(np.concatenate([c.deviance for c in chains]), d_hat)


def _non_empty(chains):
    chains = list(chains)
    if not chains or any(c.n_draws == 0 for c in chains):
        raise DiagnosticsError("every chain needs at least one retained draw")
    return chains


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------

def _as_chains(x) -> np.ndarray:
    """(m, n) array from one series or a sequence of equal-length series."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DiagnosticsError("expected one series or a list of series")
    return arr


def rhat(chains) -> float:
    """Split-chain potential scale reduction; NaN when the within-chain variance is zero."""
    arr = _as_chains(chains)
    half = arr.shape[1] // 2
    if half < 4:
        raise DiagnosticsError("need at least 4 draws per half chain")
    split = np.concatenate([arr[:, :half], arr[:, arr.shape[1] - half:]])
    n = half
    w = split.var(axis=1, ddof=1).mean()
    if not w > 0:
        return float("nan")
    b = n * split.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance at lags 0..n-1 of each row, via FFT."""
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    return np.fft.irfft(f * np.conj(f), size)[..., :n] / n


def ess_and_acf(chains, max_lag: int = 50) -> tuple:
    """(ESS, autocorrelations at lags 1..max_lag) for one or more chains.

    Multi-chain autocorrelation combines within-chain autocovariances with the
    between-chain variance; the sum is truncated by Geyer's initial monotone
    positive sequence.  ESS is capped at the total number of draws.  A constant
    series returns (NaN, NaN array).
    """
    arr = _as_chains(chains)
    m, n = arr.shape
    if n < 10:
        raise DiagnosticsError("need at least 10 draws per chain")
    max_lag = min(max_lag, n - 1)
    acov = _autocov(arr)
    w = acov[:, 0].mean() * n / (n - 1)
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += arr.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float("nan"), np.full(max_lag, np.nan)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sums of adjacent pairs, positive and non-increasing
    n_pairs = (n - 1) // 2
    pairs = rho[:2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0)
    k = neg[0] if len(neg) else n_pairs
    pairs = np.minimum.accumulate(pairs[:k])
    tau = -1.0 + 2.0 * pairs.sum()
    total = m * n
    ess_val = total / tau if tau > 0 else float(total)
    return float(min(ess_val, total)), rho[1:max_lag + 1].copy()


def ess(chains) -> float:
    return ess_and_acf(chains, max_lag=1)[0]


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def _hyper_columns(chains):
    names, first = chains[0].scalar_draws()
    return names, np.stack([c.scalar_draws()[1] for c in chains])  # (m, n, P)


def _row(draws_mn: np.ndarray) -> dict:
    flat = draws_mn.ravel()
    q = np.quantile(flat, [0.025, 0.5, 0.975])  # type 7 (linear)
    n = draws_mn.shape[1]
    row = {"mean": flat.mean(), "sd": flat.std(ddof=1) if flat.size > 1 else np.nan,
           "q2.5": q[0], "q50": q[1], "q97.5": q[2], "rhat": np.nan, "ess": np.nan}
    if n >= 8:
        row["rhat"] = rhat(draws_mn)
    if n >= 10:
        row["ess"] = ess(draws_mn)
    return row


def summarize(chains, include_effects: bool = False) -> pd.DataFrame:
    """Posterior summary table, one row per scalar parameter.

    Columns: mean, sd, q2.5, q50, q97.5, rhat, ess, acceptance.  sd is NaN for
    a single draw; rhat/ess are NaN when the chains are too short.
    """
    chains = _non_empty(chains)
    names, arr = _hyper_columns(chains)
    rows = {}
    dropout_acc = np.mean([c.mh_acceptance.get("dropout_regression", [np.nan] * 2)
                           for c in chains], axis=0)
    for j, name in enumerate(names):
        row = _row(arr[:, :, j])
        row["acceptance"] = np.nan
        if name.startswith(("phi_", "omega_")) and "EFFY" in name:
            row["acceptance"] = dropout_acc[1]
        elif name.startswith(("phi_", "omega_")):
            row["acceptance"] = dropout_acc[0]
        rows[name] = row
    if include_effects:
        eff = np.stack([c.effects for c in chains])  # (m, n, N, 4)
        kappa_acc = np.mean([c.mh_acceptance.get("kappa", np.full(eff.shape[2], np.nan))
                             for c in chains], axis=0)
        eff_acc = np.mean([c.mh_acceptance.get("effects", np.full(eff.shape[2], np.nan))
                           for c in chains], axis=0)
        for i in range(eff.shape[2]):
            for l, level in enumerate(("alpha_baseline", "beta1", "beta2", "kappa")):
                row = _row(eff[:, :, i, l])
                row["acceptance"] = kappa_acc[i] if l == 3 else eff_acc[i]
                rows[f"{level}[{i}]"] = row
    df = pd.DataFrame.from_dict(rows, orient="index")
    df.index.name = "parameter"
    return df


# ---------------------------------------------------------------------------
# Population curves
# ---------------------------------------------------------------------------

def population_curves(chains, data, treatment: int, grid) -> pd.DataFrame:
    """Posterior of exp(population log-trajectory) for one arm on a week grid.

    The trajectory uses the arm's mean intercept, slopes and change point.
    Returns columns week, mean, lower (2.5%), upper (97.5%) on the DAS28 scale.
    """
    chains = _non_empty(chains)
    pk = data.packed if hasattr(data, "packed") else data
    n_tr = pk.m + 1
    if not 0 <= treatment < n_tr:
        raise DiagnosticsError(f"treatment must be in 0..{n_tr - 1}")
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0) or np.any(grid > pk.horizon):
        raise DiagnosticsError("grid must lie within [0, study end]")
    z = np.zeros(n_tr)
    z[0] = 1.0
    if treatment:
        z[treatment] = 1.0
    gamma = np.concatenate([c.hyper_draws["gamma"] for c in chains])  # (n, 4, p)
    a, b1, b2, k = (gamma[:, j, :] @ z for j in range(4))
    curves = np.exp(_trajectory(a[:, None], b1[:, None], b2[:, None], k[:, None], grid[None, :]))
    lo, hi = np.quantile(curves, [0.025, 0.975], axis=0)
    return pd.DataFrame({"week": grid, "mean": curves.mean(axis=0), "lower": lo, "upper": hi})
