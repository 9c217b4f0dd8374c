"""CSV ingestion and emission of trials, run configuration and manifests.

Longitudinal file: ``subject_id,week,das28`` (or the four DAS28 components
``tender28,swollen28,esr,gh_vas`` instead of ``das28``).

Subjects file: ``subject_id,x1,..,xm,ae_week,ae_event,effy_week,effy_event,exit_week``.
``*_week`` is the event week when ``*_event`` is 1, else the week the risk was
censored.  ``exit_week`` is the week of an administrative/other exit and is
left empty for everyone else.
"""
from __future__ import annotations

import configparser
import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .model import RISKS, DataError, ModelVariant, Priors, SubjectRecord, TrialData, das28_score
from .sampler import McmcConfig

LONG_FILE = "longitudinal.csv"
SUBJECTS_FILE = "subjects.csv"
COMPONENTS = ("tender28", "swollen28", "esr", "gh_vas")
RISK_COLUMNS = {"AE": ("ae_week", "ae_event"), "EFFY": ("effy_week", "effy_event")}


class SchemaError(ValueError):
    """Input file does not follow the documented schema."""


class ConfigError(ValueError):
    """Invalid run configuration."""


def _line(i: int) -> int:
    # header is line 1
    return i + 2


def _read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[])
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: empty file (a header line is required)") from None
    except FileNotFoundError:
        raise SchemaError(f"{path}: no such file") from None


def _number(value: str, what: str, where: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise SchemaError(f"{where}: {what} is not a number: {value!r}") from None
    if not math.isfinite(out):
        raise SchemaError(f"{where}: {what} must be finite")
    return out


def _flag(value: str, what: str, where: str) -> bool:
    if value.strip() not in ("0", "1"):
        raise SchemaError(f"{where}: {what} must be 0 or 1, got {value!r}")
    return value.strip() == "1"


def trial_from_tables(long_df: pd.DataFrame, subj_df: pd.DataFrame, study_end_week: float = 156.0,
                      source=("longitudinal", "subjects")) -> TrialData:
    """Validated TrialData from string-typed tables; errors cite file and line."""
    lname, sname = source
    x_cols = sorted((c for c in subj_df.columns if c.startswith("x") and c[1:].isdigit()),
                    key=lambda c: int(c[1:]))
    if x_cols != [f"x{j}" for j in range(1, len(x_cols) + 1)]:
        raise SchemaError(f"{sname}: dummy columns must be x1..xm")
    need = ["subject_id", *x_cols, "ae_week", "ae_event", "effy_week", "effy_event", "exit_week"]
    missing = [c for c in need if c not in subj_df.columns]
    if missing:
        raise SchemaError(f"{sname}: missing columns {missing}")
    if "subject_id" not in long_df.columns or "week" not in long_df.columns:
        raise SchemaError(f"{lname}: needs columns subject_id, week and das28 (or components)")
    use_components = "das28" not in long_df.columns
    if use_components and any(c not in long_df.columns for c in COMPONENTS):
        raise SchemaError(f"{lname}: needs das28 or all of {list(COMPONENTS)}")

    visits: dict = {}
    scores = []
    for i, row in enumerate(long_df.itertuples(index=False)):
        row = row._asdict()
        where = f"{lname} line {_line(i)}"
        sid = row["subject_id"].strip()
        if not sid:
            raise SchemaError(f"{where}: empty subject_id")
        week = _number(row["week"], "week", where)
        if use_components:
            comps = [_number(row[c], c, where) for c in COMPONENTS]
            try:
                score = das28_score(*comps)
            except ValueError as err:
                raise SchemaError(f"{where}: {err}") from None
        else:
            score = _number(row["das28"], "das28", where)
        if score <= 0:
            raise SchemaError(f"{where}: das28 must be > 0 (log scale)")
        visits.setdefault(sid, []).append((i, week))
        scores.append(score)
    # scalar log, the same path datagen and score_for_log use
    log_scores = [float(np.log(v)) for v in scores]

    subjects = []
    seen = set()
    for i, row in enumerate(subj_df.itertuples(index=False)):
        row = row._asdict()
        where = f"{sname} line {_line(i)}"
        sid = row["subject_id"].strip()
        if not sid or sid in seen:
            raise SchemaError(f"{where}: empty or duplicate subject_id {sid!r}")
        seen.add(sid)
        x = tuple(int(_flag(row[c], c, where)) for c in x_cols)
        dropout = {}
        for risk, (wcol, ecol) in RISK_COLUMNS.items():
            dropout[risk] = (_number(row[wcol], wcol, where), _flag(row[ecol], ecol, where))
        exit_raw = row["exit_week"].strip()
        exit_week = _number(exit_raw, "exit_week", where) if exit_raw else None
        rows = visits.pop(sid, [])
        weeks = [w for _, w in rows]
        for (j0, w0), (j1, w1) in zip(rows, rows[1:]):
            if w1 <= w0:
                raise SchemaError(f"{lname} line {_line(j1)}: visit weeks of {sid} not increasing")
        for risk in RISKS:
            t, ev = dropout[risk]
            late = [j for j, w in rows if ev and w > t]
            if late:
                raise SchemaError(f"{lname} line {_line(late[0])}: visit after {risk} dropout of {sid}")
        rec = SubjectRecord(sid, x, tuple((w, log_scores[j]) for (j, _), w in zip(rows, weeks)),
                            dropout, exit_week)
        try:
            rec.validate(study_end_week, len(x_cols))
        except DataError as err:
            raise SchemaError(f"{where}: {err}") from None
        subjects.append(rec)
    if visits:
        sid, rows = next(iter(visits.items()))
        raise SchemaError(f"{lname} line {_line(rows[0][0])}: unknown subject_id {sid!r}")
    return TrialData(subjects, float(study_end_week), len(x_cols) + 1)


def ingest(longitudinal_file, subjects_file, study_end_week: float = 156.0) -> TrialData:
    """Read and validate a trial from its two CSV files."""
    return trial_from_tables(_read_csv(longitudinal_file), _read_csv(subjects_file), study_end_week,
                             (str(longitudinal_file), str(subjects_file)))


def _fmt(v: float) -> str:
    return repr(float(v))


def score_for_log(y: float) -> float:
    """A float s with np.log(s) == y when one exists nearby, else exp(y).

    Scores written this way read back to the identical log value.
    """
    s = float(np.exp(y))
    if np.log(s) == y:
        return s
    for direction in (np.inf, 0.0):
        c = s
        for _ in range(8):
            c = float(np.nextafter(c, direction))
            if np.log(c) == y:
                return c
    return s


def trial_to_tables(data: TrialData) -> tuple:
    m = data.n_treatments - 1
    long_rows, subj_rows = [], []
    for s in data.subjects:
        for w, y in s.visits:
            long_rows.append({"subject_id": s.id, "week": _fmt(w), "das28": _fmt(score_for_log(y))})
        row = {"subject_id": s.id}
        row.update({f"x{j + 1}": str(int(v)) for j, v in enumerate(s.x)})
        for risk, (wcol, ecol) in RISK_COLUMNS.items():
            t, ev = s.dropout[risk]
            row[wcol] = _fmt(t)
            row[ecol] = "1" if ev else "0"
        row["exit_week"] = "" if s.noninformative_exit_week is None else _fmt(s.noninformative_exit_week)
        subj_rows.append(row)
    long_df = pd.DataFrame(long_rows, columns=["subject_id", "week", "das28"])
    cols = ["subject_id", *[f"x{j + 1}" for j in range(m)], "ae_week", "ae_event", "effy_week",
            "effy_event", "exit_week"]
    return long_df, pd.DataFrame(subj_rows, columns=cols)


def write_trial(data: TrialData, directory) -> tuple:
    """Write ``longitudinal.csv`` and ``subjects.csv``; returns their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    long_df, subj_df = trial_to_tables(data)
    paths = d / LONG_FILE, d / SUBJECTS_FILE
    long_df.to_csv(paths[0], index=False, lineterminator="\n")
    subj_df.to_csv(paths[1], index=False, lineterminator="\n")
    return paths


def read_trial(directory, study_end_week: float = 156.0) -> TrialData:
    d = Path(directory)
    return ingest(d / LONG_FILE, d / SUBJECTS_FILE, study_end_week)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    variants: tuple = (ModelVariant.ALL_SHARED,)
    longitudinal: Optional[Path] = None
    subjects: Optional[Path] = None
    study_end_week: float = 156.0
    out: Path = Path("out")
    # simulate
    example: str = "tempo"
    n_per_arm: tuple = (231, 228, 223)
    # emit flags
    emit_draws: bool = True
    emit_summaries: bool = True
    emit_curves: bool = True
    emit_disposition: bool = True
    curve_step: float = 4.0
    source: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "mcmc": self.mcmc.as_dict(),
            "variants": [int(v) for v in self.variants],
            "longitudinal": None if self.longitudinal is None else str(self.longitudinal),
            "subjects": None if self.subjects is None else str(self.subjects),
            "study_end_week": self.study_end_week,
            "out": str(self.out),
            "example": self.example,
            "n_per_arm": list(self.n_per_arm),
            "emit": {"draws": self.emit_draws, "summaries": self.emit_summaries,
                     "curves": self.emit_curves, "disposition": self.emit_disposition},
            "curve_step": self.curve_step,
        }


def parse_variants(value) -> tuple:
    """``"all"``, a single tag/number, or a comma-separated list."""
    text = str(value).strip()
    if text.lower() == "all":
        return tuple(ModelVariant)
    try:
        out = tuple(ModelVariant.parse(v.strip()) for v in text.split(",") if v.strip())
    except (ValueError, KeyError) as err:
        raise ConfigError(f"bad variant {value!r}: {err}") from None
    if not out:
        raise ConfigError("no variant given")
    return tuple(dict.fromkeys(out))


_INT = ("iterations", "burn_in", "thin", "n_chains", "seed", "adapt_window", "kappa_moves",
        "dropout_block_moves")
_FLOAT = ("adapt_target", "kappa_step", "effects_step")
_BOOL = ("group_dropout_variance", "pin_omega_zero", "emit_draws", "emit_summaries",
         "emit_curves", "emit_disposition")
_KNOWN = set(_INT) | set(_FLOAT) | set(_BOOL) | {
    "variant", "longitudinal", "subjects", "study_end_week", "out", "example", "n_per_arm",
    "kappa_prior_mean", "kappa_prior_var", "curve_step"}


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Flat ``key = value`` file (an optional ``[run]`` header is accepted).

    Relative data paths resolve against the config file's directory.
    ``overrides`` (from the command line) win over the file.
    """
    raw: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        base = path.parent
    if path is not None and path.suffix == ".json":
        try:
            raw.update(json.loads(text)["replay"])
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"{path}: not a run manifest (no 'replay' block)") from None
    elif path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as err:
            raise ConfigError(str(err)) from None
        for section in parser.sections():
            raw.update(parser[section])
    raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    unknown = set(raw) - _KNOWN
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    mcmc_kw = {}
    try:
        for k in _INT:
            if k in raw:
                mcmc_kw[k] = int(raw[k])
        for k in _FLOAT:
            if k in raw:
                mcmc_kw[k] = float(raw[k])
        bools = {k: _parse_bool(raw[k], k) for k in _BOOL if k in raw}
        for k in ("group_dropout_variance", "pin_omega_zero"):
            if k in bools:
                mcmc_kw[k] = bools.pop(k)
        priors = Priors()
        if "kappa_prior_mean" in raw or "kappa_prior_var" in raw:
            priors = priors.with_kappa(float(raw.get("kappa_prior_mean", 12.0)),
                                       float(raw.get("kappa_prior_var", 100.0)))
            if priors.gamma_var[3] <= 0:
                raise ConfigError("kappa_prior_var must be > 0")
        variants = parse_variants(raw.get("variant", "6"))
        mcmc = McmcConfig(variant=variants[0], priors=priors, **mcmc_kw)
        n_per_arm = tuple(int(v) for v in raw.get("n_per_arm", "231,228,223").split(","))
        if any(n < 0 for n in n_per_arm):
            raise ConfigError("n_per_arm must be >= 0")
        cfg = RunConfig(
            mcmc=mcmc, variants=variants,
            longitudinal=_resolve(raw.get("longitudinal"), base),
            subjects=_resolve(raw.get("subjects"), base),
            study_end_week=float(raw.get("study_end_week", 156.0)),
            out=Path(raw.get("out", "out")),
            example=raw.get("example", "tempo").strip().lower(),
            n_per_arm=n_per_arm,
            curve_step=float(raw.get("curve_step", 4.0)),
            source=dict(raw),
            **bools,
        )
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if cfg.example not in ("tempo", "null"):
        raise ConfigError("example must be 'tempo' or 'null'")
    if not cfg.curve_step > 0:
        raise ConfigError("curve_step must be > 0")
    return cfg


def _parse_bool(value: str, key: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: not a boolean: {value!r}")


def _resolve(value, base: Path) -> Optional[Path]:
    if value is None or not str(value).strip():
        return None
    p = Path(str(value).strip())
    return (p if p.is_absolute() else base / p).resolve()


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def versions() -> dict:
    import numba
    import scipy

    from . import __version__
    return {"das28joint": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__, "numba": numba.__version__}


def replay_block(cfg: RunConfig) -> dict:
    """Flat key/value settings that ``load_config`` turns back into ``cfg``."""
    m = cfg.mcmc
    gm, gv = m.priors.gamma_moments(1)
    out = {k: repr(getattr(m, k)) if isinstance(getattr(m, k), float) else str(getattr(m, k))
           for k in _INT + _FLOAT}
    out.update({k: str(getattr(m, k)).lower() for k in ("group_dropout_variance", "pin_omega_zero")})
    out.update({
        "variant": ",".join(str(int(v)) for v in cfg.variants),
        "kappa_prior_mean": repr(float(gm[3, 0])),
        "kappa_prior_var": repr(float(gv[3, 0])),
        "study_end_week": repr(float(cfg.study_end_week)),
        "out": str(cfg.out),
        "example": cfg.example,
        "n_per_arm": ",".join(str(n) for n in cfg.n_per_arm),
        "curve_step": repr(float(cfg.curve_step)),
        "emit_draws": str(cfg.emit_draws).lower(),
        "emit_summaries": str(cfg.emit_summaries).lower(),
        "emit_curves": str(cfg.emit_curves).lower(),
        "emit_disposition": str(cfg.emit_disposition).lower(),
    })
    for key in ("longitudinal", "subjects"):
        p = getattr(cfg, key)
        if p is not None:
            out[key] = str(Path(p).resolve())
    return out


def write_manifest(path, command: str, config: RunConfig, outputs: list, extra: Optional[dict] = None):
    """JSON manifest: command, full config, seed, versions and output files (no timestamps).

    The ``replay`` block is accepted by ``--config`` to repeat the run.
    """
    doc = {"command": command, "seed": config.mcmc.seed, "config": config.as_dict(),
           "replay": replay_block(config), "versions": versions(),
           "outputs": sorted(str(o) for o in outputs)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
