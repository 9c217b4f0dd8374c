"""Command-line workflow: simulate, fit, diagnose, compare.

Exit codes: 0 success, 2 configuration error, 3 input schema error,
4 numerical failure (sampler or diagnostics).
"""
from __future__ import annotations

import argparse
import io as _stdio
import json
import sys
import zipfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import datagen, diagnostics
from .io import (ConfigError, RunConfig, SchemaError, ingest, load_config, read_trial,
                 write_manifest, write_trial)
from .model import DataError, ModelVariant
from .sampler import ChainOutput, SamplerError, run_analysis

EXIT_OK, EXIT_CONFIG, EXIT_SCHEMA, EXIT_NUMERIC = 0, 2, 3, 4
FLOAT_FORMAT = "%.10g"
ACF_LAGS = (1, 5, 10, 25)


# ---------------------------------------------------------------------------
# Deterministic writers
# ---------------------------------------------------------------------------

def _csv(df: pd.DataFrame, path: Path, index=False) -> Path:
    df.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def save_npz(path: Path, arrays: dict) -> Path:
    """np.savez equivalent with fixed zip timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = _stdio.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return path


def chains_to_arrays(variant: ModelVariant, chains) -> dict:
    out = {}
    for c in chains:
        pre = f"m{int(variant)}_c{c.chain_index}_"
        for k, v in c.hyper_draws.items():
            out[pre + k] = v
        out[pre + "effects"] = c.effects
        out[pre + "deviance"] = c.deviance
        for k, v in c.mh_acceptance.items():
            out[pre + "acc_" + k] = np.asarray(v, dtype=float)
    return out


def chains_from_npz(path) -> dict:
    """{variant: [ChainOutput]} from a draws file written by ``fit``."""
    found: dict = {}
    with np.load(path, allow_pickle=False) as z:
        for name in z.files:
            head, chain, key = name.split("_", 2)
            found.setdefault((int(head[1:]), int(chain[1:])), {})[key] = z[name]
    out: dict = {}
    for (v, c), parts in sorted(found.items()):
        hyper = {k: parts[k] for k in ("gamma", "sigma2_resid", "sigma2_effects", "phi", "omega",
                                       "varsigma2")}
        acc = {k[4:]: parts[k] for k in parts if k.startswith("acc_")}
        out.setdefault(ModelVariant(v), []).append(ChainOutput(
            hyper_draws=hyper, effects=parts["effects"], deviance=parts["deviance"],
            mh_acceptance=acc, step_sizes={}, burn_in_step_sizes={}, seed=-1, chain_index=c,
            variant=ModelVariant(v), config_echo={}))
    return out


def plot_curves(curves: pd.DataFrame, path: Path, arm_labels) -> Path:
    """Population curves per arm: separate model solid, joint models dashed."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "das28joint"
    fig, ax = plt.subplots(figsize=(7, 4.5))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for (variant, arm), df in curves.groupby(["variant", "arm"], sort=True):
        style = "-" if variant == int(ModelVariant.SEPARATE) else "--"
        ax.plot(df["week"], df["mean"], style, color=colors[arm % len(colors)],
                label=f"{arm_labels[arm]}, model {variant}")
    ax.set_xlabel("week")
    ax.set_ylabel("DAS28 (population median)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _fit_variants(cfg: RunConfig, data, variants):
    fits = {}
    for v in variants:
        mcmc = replace(cfg.mcmc, variant=v)
        fits[v] = run_analysis(mcmc, data)
    return fits


def _dic_table(fits, data) -> pd.DataFrame:
    rows = []
    for v, chains in fits.items():
        r = diagnostics.dic(chains, data, v)
        rows.append({"variant": int(v), "model": v.tag, "dbar": r.dbar, "d_at_mean": r.d_at_mean,
                     "p_d": r.p_d, "dic": r.dic})
    return pd.DataFrame(rows)


def _convergence(chains) -> pd.DataFrame:
    names, arr = chains[0].scalar_draws()
    arr = np.stack([c.scalar_draws()[1] for c in chains])
    rows = []
    for j, name in enumerate(names):
        col = arr[:, :, j]
        row = {"parameter": name, "rhat": np.nan, "ess": np.nan}
        row.update({f"acf_lag{L}": np.nan for L in ACF_LAGS})
        if col.shape[1] >= 10:
            row["rhat"] = diagnostics.rhat(col)
            e, acf = diagnostics.ess_and_acf(col, max(ACF_LAGS))
            row["ess"] = e
            for L in ACF_LAGS:
                if L <= len(acf):
                    row[f"acf_lag{L}"] = acf[L - 1]
        rows.append(row)
    return pd.DataFrame(rows)


def _load_data(cfg: RunConfig):
    if cfg.longitudinal is None or cfg.subjects is None:
        raise ConfigError("config must name 'longitudinal' and 'subjects' files (or pass --data)")
    for p in (cfg.longitudinal, cfg.subjects):
        if not Path(p).is_file():
            raise ConfigError(f"input file not found: {p}")
    return ingest(cfg.longitudinal, cfg.subjects, cfg.study_end_week)


def cmd_simulate(cfg: RunConfig) -> list:
    make = datagen.tempo_like_config if cfg.example == "tempo" else datagen.null_coupling_config
    sizes = cfg.n_per_arm if len(cfg.n_per_arm) > 1 else cfg.n_per_arm[0]
    gen = make(n_per_arm=sizes, study_end_week=cfg.study_end_week)
    data, truth = datagen.simulate_trial(gen, cfg.mcmc.seed)
    out = cfg.out
    files = list(write_trial(data, out))
    files.append(_csv(datagen.disposition_table(data), out / "disposition.csv"))
    truth_doc = {"variant": int(gen.variant), "hyper": {k: float(v) for k, v in gen.truth.flat().items()},
                 "noninformative_hazard": gen.hazards().tolist(),
                 "arm_sizes": gen.arm_sizes().tolist()}
    (out / "truth.json").write_text(json.dumps(truth_doc, indent=2, sort_keys=True) + "\n")
    files.append(out / "truth.json")
    eff = pd.DataFrame(truth.effects.as_matrix(), columns=["alpha", "beta1", "beta2", "kappa"])
    eff.insert(0, "subject_id", [s.id for s in data.subjects])
    eff["latent_log_ae"] = truth.latent_log_dropout[:, 0]
    eff["latent_log_effy"] = truth.latent_log_dropout[:, 1]
    files.append(_csv(eff, out / "true_effects.csv"))
    return files


def cmd_fit(cfg: RunConfig) -> list:
    data = _load_data(cfg)
    fits = _fit_variants(cfg, data, cfg.variants)
    out = cfg.out
    files = [_csv(_dic_table(fits, data), out / "dic.csv")]
    if cfg.emit_summaries:
        parts, conv = [], []
        for v, chains in fits.items():
            s = diagnostics.summarize(chains).reset_index()
            s.insert(0, "variant", int(v))
            parts.append(s)
            c = _convergence(chains)
            c.insert(0, "variant", int(v))
            conv.append(c)
        files.append(_csv(pd.concat(parts, ignore_index=True), out / "summary.csv"))
        files.append(_csv(pd.concat(conv, ignore_index=True), out / "convergence.csv"))
    if cfg.emit_curves:
        grid = np.unique(np.append(np.arange(0.0, cfg.study_end_week, cfg.curve_step),
                                   cfg.study_end_week))
        parts = []
        for v, chains in fits.items():
            for arm in range(data.n_treatments):
                df = diagnostics.population_curves(chains, data, arm, grid)
                df.insert(0, "arm", arm)
                df.insert(0, "variant", int(v))
                parts.append(df)
        curves = pd.concat(parts, ignore_index=True)
        files.append(_csv(curves, out / "curves.csv"))
        labels = [datagen.arm_label(g, data.n_treatments) for g in range(data.n_treatments)]
        files.append(plot_curves(curves, out / "curves.svg", labels))
    if cfg.emit_disposition:
        files.append(_csv(datagen.disposition_table(data), out / "disposition.csv"))
    if cfg.emit_draws:
        arrays = {}
        for v, chains in fits.items():
            arrays.update(chains_to_arrays(v, chains))
        files.append(save_npz(out / "draws.npz", arrays))
    return files


def cmd_diagnose(cfg: RunConfig, draws_path: Path) -> list:
    if not draws_path.is_file():
        raise ConfigError(f"draws file not found: {draws_path} (run fit with emit_draws)")
    fits = chains_from_npz(draws_path)
    parts, summ = [], []
    for v, chains in fits.items():
        c = _convergence(chains)
        c.insert(0, "variant", int(v))
        parts.append(c)
        s = diagnostics.summarize(chains).reset_index()
        s.insert(0, "variant", int(v))
        summ.append(s)
    out = cfg.out
    return [_csv(pd.concat(parts, ignore_index=True), out / "diagnostics.csv"),
            _csv(pd.concat(summ, ignore_index=True), out / "diagnostics_summary.csv")]


def rank_dic(table: pd.DataFrame) -> pd.DataFrame:
    """Sort ascending by DIC (ties keep variant order) and mark the minimum."""
    t = table.sort_values("variant").sort_values("dic", kind="stable").reset_index(drop=True)
    best = t["dic"].iloc[0]
    t.insert(0, "rank", np.arange(1, len(t) + 1))
    t["delta_dic"] = t["dic"] - best
    t["best"] = t["dic"] == best
    t["tie"] = t["best"] & (int(t["best"].sum()) > 1)
    return t


def cmd_compare(cfg: RunConfig) -> list:
    if len(cfg.variants) < 2:
        raise ConfigError("compare needs at least two variants")
    data = _load_data(cfg)
    fits = _fit_variants(cfg, data, cfg.variants)
    ranked = rank_dic(_dic_table(fits, data))
    return [_csv(ranked, cfg.out / "compare.csv")]


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="das28joint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("simulate", "simulate a trial from the shipped example truth"),
                           ("fit", "fit one or more model variants"),
                           ("diagnose", "convergence tables from a saved draws file"),
                           ("compare", "rank model variants by DIC")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", help="1-6, a model tag, a comma list, or 'all'")
        p.add_argument("--out", type=Path)
        if name in ("fit", "compare"):
            p.add_argument("--data", type=Path,
                           help="directory holding longitudinal.csv and subjects.csv")
        if name == "diagnose":
            p.add_argument("--draws", type=Path, help="draws file (default <out>/draws.npz)")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    overrides = {"seed": args.seed, "variant": args.variant,
                 "out": None if args.out is None else str(args.out)}
    if args.command == "compare" and args.variant is None and args.config is None:
        overrides["variant"] = "1,6"
    data_dir = getattr(args, "data", None)
    if data_dir is not None:
        overrides["longitudinal"] = str(data_dir / "longitudinal.csv")
        overrides["subjects"] = str(data_dir / "subjects.csv")
    try:
        cfg = load_config(args.config, overrides)
        cfg.out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            files = cmd_simulate(cfg)
        elif args.command == "fit":
            files = cmd_fit(cfg)
        elif args.command == "diagnose":
            files = cmd_diagnose(cfg, args.draws or cfg.out / "draws.npz")
        else:
            files = cmd_compare(cfg)
        files.append(write_manifest(cfg.out / f"manifest_{args.command}.json", args.command, cfg,
                                    [Path(f).name for f in files]))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, DataError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except (SamplerError, diagnostics.DiagnosticsError, FloatingPointError) as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    for f in files:
        print(f)
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
