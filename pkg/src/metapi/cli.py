"""Command-line interface: ``metapi fit``, ``metapi simulate``, ``metapi grid``."""

import argparse
import csv
import logging
import os
import secrets
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np
from scipy import stats

from metapi import __version__, kernels
from metapi import io as mio
from metapi.core import cochran_q, fit_dl, tau2_reml
from metapi.errors import ConvergenceError, MetaPIError, ScenarioAbort
from metapi.intervals import PRESETS, compute_pi, get_method
from metapi.simulation import GENERATOR_ID, build_grid, failure_counts, run_scenario

log = logging.getLogger("metapi")

WCHISQ_EVALUATOR = "ruben-series (fallbacks: imhof, montecarlo)"

EXIT_OK = 0
EXIT_SCENARIO_FAILED = 1
EXIT_BAD_INPUT = 2
EXIT_IO = 3


def _seed(value):
    try:
        seed = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {value!r}") from None
    if not 0 <= seed <= mio.U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return seed


def _methods(value):
    if value.strip().lower() == "all":
        return list(PRESETS)
    return [get_method(v.strip()).name for v in value.split(",") if v.strip()]


# ---------------------------------------------------------------- fit


def fit_report(d, methods=None, level=0.95, seed=None, B=5000):
    """Everything ``metapi fit`` reports, as a JSON-ready dict.

    Without ``seed`` a random 64-bit seed is drawn and recorded, so the
    bootstrap interval can still be reproduced.
    """
    methods = list(PRESETS) if methods is None else methods
    seed_source = "user"
    if seed is None:
        seed, seed_source = secrets.randbits(64), "entropy"
    warnings = []
    het = cochran_q(d)
    fit = fit_dl(d)
    try:
        reml = tau2_reml(d, start=het.tau2_dl).tau2
    except ConvergenceError as exc:
        reml = None
        warnings.append(f"REML did not converge after {exc.iterations} iterations")

    z = float(stats.norm.ppf(0.5 * (1.0 + level)))
    t = float(stats.t.ppf(0.5 * (1.0 + level), d.K - 1))
    studies = [
        {"study_id": s.id, "effect": s.effect, "se": s.se,
         "ci_lower": s.effect - z * s.se, "ci_upper": s.effect + z * s.se}
        for s in d.studies
    ]
    pooled = [
        {"id": "iv_z", "label": "RE-DL (IV, z)", "estimate": fit.mu_hat, "se": fit.se_iv,
         "lower": fit.mu_hat - z * fit.se_iv, "upper": fit.mu_hat + z * fit.se_iv},
        {"id": "hksj_t", "label": "RE-DL (HKSJ, t_{K-1})", "estimate": fit.mu_hat, "se": fit.se_hksj,
         "lower": fit.mu_hat - t * fit.se_hksj, "upper": fit.mu_hat + t * fit.se_hksj},
    ]

    fits = {"DL": fit}
    rows = []
    for name in methods:
        spec = get_method(name, B=B)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        row = {"method": spec.name, "label": spec.label, "lower": None, "upper": None,
               "length": None, "degenerate": False, "error": None}
        try:
            pi = compute_pi(spec, d, level, rng=rng, fits=fits)
        except MetaPIError as exc:
            row["error"] = str(exc)
            warnings.append(f"{spec.label}: {exc}")
        else:
            row.update(lower=pi.lower, upper=pi.upper, length=pi.length, degenerate=pi.degenerate)
            if pi.degenerate:
                warnings.append(f"{spec.label}: degenerate interval (estimated tau2 is 0)")
        rows.append(row)

    return {
        "meta": {
            "tool": "metapi", "version": __version__, "level": level, "seed": str(seed),
            "seed_source": seed_source, "bootstrap_B": B, "kernel_backend": kernels.BACKEND,
            "wchisq_evaluator": WCHISQ_EVALUATOR,
        },
        "studies": studies,
        "pooled": pooled,
        "heterogeneity": {
            "K": d.K, "Q": het.Q, "df": d.K - 1, "I2": het.I2,
            "tau2_DL": het.tau2_dl, "tau2_REML": reml,
        },
        "prediction_intervals": rows,
        "warnings": warnings,
    }


def cmd_fit(args):
    d = mio.parse_studies(args.input)
    report = fit_report(d, args.methods, args.level, args.seed, args.bootstrap_b)
    text = mio.write_fit_report(report, None if args.out in (None, "-") else args.out, args.format)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def _run_one(s, out_dir, records):
    entry = {"index": s.index, "dir": s.dirname, "status": "ok", "failures": {}, "message": ""}
    try:
        rec, summary = run_scenario(s)
        entry["failures"] = failure_counts(rec)
        mio.write_scenario(out_dir, rec, summary, records=records)
    except ScenarioAbort as exc:
        entry.update(status="aborted", failures=exc.failures, message=str(exc))
        try:
            path = os.path.join(out_dir, s.dirname)
            os.makedirs(path, exist_ok=True)
            with open(os.path.join(path, "FAILED"), "w", encoding="utf-8") as fh:
                fh.write(str(exc) + "\n")
        except OSError as io_exc:
            entry.update(status="io_error", message=f"{exc}; {io_exc}")
    except OSError as exc:
        entry.update(status="io_error", message=f"{exc.filename}: {exc.strerror}")
    return entry


def simulate(config, out_dir, jobs=1):
    """Run every scenario of ``config`` and write its files under ``out_dir``.

    Scenarios run in a pool of ``jobs`` processes; each scenario is written
    by the worker that ran it, and ``manifest.json`` is written last.
    Returns ``(manifest, exit_code)``.
    """
    scenarios = build_grid(config)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    os.makedirs(out_dir, exist_ok=True)
    marker = os.path.join(out_dir, "INCOMPLETE")
    with open(marker, "w", encoding="utf-8") as fh:
        fh.write("run in progress or aborted; see manifest.json once finished\n")

    args = (scenarios, [out_dir] * len(scenarios), [config.records] * len(scenarios))
    if jobs <= 1 or len(scenarios) == 1:
        entries = []
        for i, s in enumerate(scenarios):
            entries.append(_run_one(s, out_dir, config.records))
            log.info("scenario %d/%d %s: %s", i + 1, len(scenarios), s.dirname, entries[-1]["status"])
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_run_one, *args))

    statuses = {e["status"] for e in entries}
    manifest = {
        "tool": "metapi",
        "version": __version__,
        "master_seed": str(config.seed),
        "generator": GENERATOR_ID,
        "config_digest": mio.config_digest(config),
        "config": mio.config_dict(config),
        "kernel_backend": kernels.BACKEND,
        "wchisq_evaluator": WCHISQ_EVALUATOR,
        "started_utc": started,
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "n_scenarios": len(scenarios),
        "scenarios": entries,
    }
    if "io_error" in statuses:
        return manifest, EXIT_IO
    mio.write_json(manifest, os.path.join(out_dir, "manifest.json"))
    os.remove(marker)
    return manifest, EXIT_SCENARIO_FAILED if "aborted" in statuses else EXIT_OK


def _load_config(args):
    config = mio.parse_config(args.config) if args.config else mio.parse_config({})
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for key in ("reps", "reps_bootstrap"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if overrides:
        config = mio.parse_config({**mio.config_dict(config), **overrides})
    return config


def cmd_simulate(args):
    config = _load_config(args)
    manifest, code = simulate(config, args.out_dir, args.jobs)
    for e in manifest["scenarios"]:
        if e["status"] != "ok":
            log.error("%s: %s", e["dir"], e["message"])
    return code


def cmd_grid(args):
    config = _load_config(args)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("index", "dir", "K", "N", "tau2", "dist", "reps", "reps_bootstrap"))
    for s in build_grid(config):
        w.writerow((s.index, s.dirname, s.K, s.size_tag, mio.fmt(s.tau2), s.dist, s.reps, s.reps_bootstrap))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="metapi", description="Prediction intervals for random-effects meta-analysis.")
    p.add_argument("--version", action="version", version=f"metapi {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a study table and report every prediction interval")
    f.add_argument("--input", required=True, help="CSV with study_id,effect and se or var")
    f.add_argument("--methods", type=_methods, default=list(PRESETS), help="comma-separated methods, or 'all'")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--seed", type=_seed, default=None, help="seed for the bootstrap (default: random, recorded)")
    f.add_argument("--bootstrap-b", type=int, default=5000)
    f.add_argument("--format", choices=("json", "csv"), default="json")
    f.add_argument("--out", default=None, help="output path (default: stdout)")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a coverage simulation")
    s.add_argument("--config", default=None, help="JSON config (default: the full grid)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=_seed, default=None)
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--reps-bootstrap", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("grid", help="list the scenarios a config expands to")
    g.add_argument("--print", action="store_true", required=True, help="print the scenario table")
    g.add_argument("--config", default=None)
    g.add_argument("--seed", type=_seed, default=None)
    g.set_defaults(func=cmd_grid)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MetaPIError as exc:
        print(f"metapi: error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except OSError as exc:
        print(f"metapi: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
