"""Reading study tables and configs; writing fit reports and simulation output.

All CSV files are UTF-8 without BOM, comma separated, with ``\\n`` line
endings. Floats are written with ``repr``, the shortest decimal string that
parses back to the same double.
"""

import csv
import gzip
import hashlib
import io
import json
import math
import os

import numpy as np

from metapi.core import MetaDataset
from metapi.distributions import parse_family
from metapi.errors import ConfigError, InputError, MetaPIError
from metapi.intervals import PRESETS, get_method
from metapi.simulation import OK, GridConfig

SUMMARY_COLUMNS = (
    "scenario", "K", "N", "tau2", "dist", "method", "label", "n", "n_failed",
    "mean_C", "median_C", "mean_abs_dev", "mean_rel_length", "norm_mae",
    "prop_C_gt_99", "freq_new_covered",
)
SUMMARY_TRAILER = ("v", "mean_I2", "L_T")
HIST_COLUMNS = ("bin_lo", "bin_hi", "count")
RECORD_COLUMNS = (
    "rep", "method", "status", "lower", "upper", "C", "L", "new_covered",
    "theta_new", "tau2_dl", "tau2_reml", "I2", "Q", "mu_hat",
)
STATUS_NAMES = {0: "ok", 1: "skipped", 2: "failed"}

U64_MAX = 2**64 - 1


def fmt(x):
    """Shortest round-trip text for a number; empty string for ``None``."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


# ---------------------------------------------------------------- studies


def parse_studies(path):
    """Read a study table with columns ``study_id,effect`` and ``se`` or ``var``.

    Row numbers in error messages count the header as row 1.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    if text.startswith("\ufeff"):
        text = text[1:]
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise InputError("file is empty", row=1)
    header = [h.strip() for h in header]
    missing = [c for c in ("study_id", "effect") if c not in header]
    if "se" in header and "var" in header:
        raise InputError("give either an 'se' or a 'var' column, not both", row=1)
    spread = "se" if "se" in header else "var" if "var" in header else None
    if spread is None:
        missing.append("se or var")
    if missing:
        raise InputError(f"missing column(s): {', '.join(missing)}", row=1)
    i_id, i_eff, i_spread = header.index("study_id"), header.index("effect"), header.index(spread)

    ids, effects, variances = [], [], []
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"expected {len(header)} fields, got {len(row)}", row=row_no)
        sid = row[i_id].strip()
        if not sid:
            raise InputError("empty study_id", row=row_no)
        effect = _number(row[i_eff], "effect", row_no)
        s = _number(row[i_spread], spread, row_no)
        if not s > 0:
            raise InputError(f"{spread} must be positive, got {row[i_spread].strip()}", row=row_no)
        ids.append(sid)
        effects.append(effect)
        variances.append(s * s if spread == "se" else s)
    if len(ids) < 2:
        raise InputError(f"need at least 2 studies, got {len(ids)}", row=len(ids) + 1)
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise InputError(f"duplicate study_id {dup!r}", row=ids.index(dup, ids.index(dup) + 1) + 2)
    return MetaDataset(effects, variances, tuple(ids))


def _number(text, column, row_no):
    try:
        x = float(text.strip())
    except ValueError:
        raise InputError(f"{column} is not a number: {text.strip()!r}", row=row_no) from None
    if not math.isfinite(x):
        raise InputError(f"{column} must be finite, got {text.strip()}", row=row_no)
    return x


def write_studies(d, path, column="var"):
    """Write a dataset in the format read by :func:`parse_studies`.

    The ``var`` column round-trips exactly; ``se`` does not in general,
    since squaring a rounded square root need not restore the variance.
    """
    if column not in ("se", "var"):
        raise ValueError("column must be 'se' or 'var'")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(("study_id", "effect", column))
        for s in d.studies:
            w.writerow((s.id, fmt(s.effect), fmt(s.se if column == "se" else s.within_variance)))


# ---------------------------------------------------------------- config

_LIST_KEYS = ("K", "N", "tau2", "dist", "beta", "methods")


def parse_config(source):
    """Validate a simulation config (JSON path or dict) into a :class:`GridConfig`.

    Missing keys take the defaults of :class:`GridConfig`. All problems are
    collected and raised together as one :class:`ConfigError`.
    """
    if isinstance(source, dict):
        raw = dict(source)
    else:
        try:
            with open(source, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError([f"cannot read {source}: {exc.strerror}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"invalid JSON: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])

    known = set(GridConfig.__dataclass_fields__)
    problems = [f"unknown key {k!r}" for k in sorted(set(raw) - known)]
    values = {}
    for key in sorted(set(raw) & known):
        val = raw[key]
        if key == "methods" and val == "all":
            val = list(PRESETS)
        if key in _LIST_KEYS:
            if not isinstance(val, list):
                problems.append(f"{key!r} must be a list")
                continue
            if not val:
                problems.append(f"{key!r} must not be empty")
                continue
        checked = _CHECKS[key](val)
        if isinstance(checked, str):
            problems.append(f"{key!r}: {checked}")
        else:
            values[key] = checked
    if problems:
        raise ConfigError(problems)
    config = GridConfig(**values)

    min_k = min(config.K)
    for name in config.methods:
        need = PRESETS[name].min_studies
        if min_k < need:
            problems.append(f"method {name!r} needs K >= {need}, but 'K' contains {min_k}")
    if problems:
        raise ConfigError(problems)
    return config


def _ints(lo, hi=None):
    def check(vals):
        for v in vals:
            if isinstance(v, bool) or not isinstance(v, int) or v < lo or (hi is not None and v > hi):
                return f"expected integers >= {lo}, got {v!r}"
        return tuple(vals)
    return check


def _scalar(list_check):
    def check(v):
        out = list_check([v])
        return out if isinstance(out, str) else out[0]
    return check


def _int(lo, hi=None):
    return _scalar(_ints(lo, hi))


def _check_n(vals):
    for v in vals:
        if v == "mixed":
            continue
        if isinstance(v, bool) or not isinstance(v, int) or v < 4 or v % 2:
            return f"sample sizes must be even integers >= 4 or \"mixed\", got {v!r}"
    return tuple(vals)


def _check_positive(vals):
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not (v > 0 and math.isfinite(v)):
            return f"expected positive numbers, got {v!r}"
    return tuple(float(v) for v in vals)


def _check_unit(vals):
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 < v < 1:
            return f"expected numbers in (0, 1), got {v!r}"
    return tuple(float(v) for v in vals)


def _check_dists(vals):
    for v in vals:
        try:
            parse_family(v)
        except (MetaPIError, TypeError, AttributeError):
            return f"unknown distribution {v!r}"
    return tuple(vals)


def _check_methods(vals):
    out = []
    for v in vals:
        try:
            out.append(get_method(v).name)
        except (MetaPIError, TypeError, AttributeError):
            return f"unknown method {v!r}"
    return tuple(dict.fromkeys(out))


def _check_float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        return f"expected a finite number, got {v!r}"
    return float(v)


def _check_bool(v):
    return v if isinstance(v, bool) else f"expected true or false, got {v!r}"


_CHECKS = {
    "K": _ints(2),
    "N": _check_n,
    "tau2": _check_positive,
    "dist": _check_dists,
    "mu": _check_float,
    "reps": _int(1),
    "reps_bootstrap": _int(0),
    "B": _int(100),
    "alpha": _scalar(_check_unit),
    "beta": _check_unit,
    "methods": _check_methods,
    "seed": _int(0, U64_MAX),
    "hist_bins": _int(1),
    "records": _check_bool,
    "bootstrap_recompute_weights": _check_bool,
}


def config_dict(config):
    """Plain-JSON form of a config, in field order."""
    return {k: list(v) if isinstance(v, tuple) else v for k, v in vars(config).items()}


def config_digest(config):
    canonical = json.dumps(config_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- fit report


def write_fit_report(report, path, fmt_name="json"):
    """Serialize the dict produced by :func:`metapi.cli.fit_report`."""
    text = fit_report_json(report) if fmt_name == "json" else fit_report_csv(report)
    if path is None or path == "-":
        return text
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    return text


def fit_report_json(report):
    return json.dumps(report, indent=2, allow_nan=False) + "\n"


def fit_report_csv(report):
    """One long table: ``section,id,label,estimate,se,lower,upper,note``."""
    buf = io.StringIO()
    w = _writer(buf)
    w.writerow(("section", "id", "label", "estimate", "se", "lower", "upper", "note"))
    for key in ("level", "seed", "seed_source", "kernel_backend", "wchisq_evaluator", "version"):
        w.writerow(("meta", key, "", "", "", "", "", report["meta"][key]))
    for s in report["studies"]:
        w.writerow(("study", s["study_id"], "", fmt(s["effect"]), fmt(s["se"]), fmt(s["ci_lower"]), fmt(s["ci_upper"]), ""))
    for p in report["pooled"]:
        w.writerow(("pooled", p["id"], p["label"], fmt(p["estimate"]), fmt(p["se"]), fmt(p["lower"]), fmt(p["upper"]), ""))
    for key, val in report["heterogeneity"].items():
        w.writerow(("heterogeneity", key, "", fmt(val), "", "", "", ""))
    for p in report["prediction_intervals"]:
        note = "degenerate" if p["degenerate"] else (p["error"] or "")
        w.writerow(("pi", p["method"], p["label"], "", "", fmt(p["lower"]), fmt(p["upper"]), note))
    for msg in report["warnings"]:
        w.writerow(("warning", "", "", "", "", "", "", msg))
    return buf.getvalue()


# ---------------------------------------------------------------- simulation output


def summary_header(betas):
    return SUMMARY_COLUMNS + tuple(f"tol_content_{b:g}" for b in betas) + SUMMARY_TRAILER


def write_summary(summary, path):
    s = summary.scenario
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(summary_header(s.betas))
        for m in s.methods:
            ms = summary.methods.get(m.name)
            if ms is None:
                continue
            w.writerow(
                (s.index, s.K, s.size_tag, fmt(s.tau2), s.dist, m.name, m.label, ms.n, ms.n_failed)
                + tuple(fmt(getattr(ms, c)) for c in SUMMARY_COLUMNS[9:])
                + tuple(fmt(ms.tolerance_content[float(b)]) for b in s.betas)
                + (fmt(summary.v), fmt(summary.mean_I2), fmt(summary.L_T))
            )


def write_histogram(method_summary, path):
    e = method_summary.bin_edges
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(HIST_COLUMNS)
        for lo, hi, c in zip(e[:-1], e[1:], method_summary.histogram):
            w.writerow((fmt(lo), fmt(hi), int(c)))


def write_records(rec, path):
    """Per-replicate records, long format, gzip with a fixed header timestamp."""
    buf = io.StringIO()
    w = _writer(buf)
    w.writerow(RECORD_COLUMNS)
    diag = (rec.theta_new, rec.tau2_dl, rec.tau2_reml, rec.I2, rec.Q, rec.mu_hat)
    for i, name in enumerate(rec.method_names):
        for j in range(rec.lower.shape[1]):
            ok = rec.status[i, j] == OK
            w.writerow(
                (j, name, STATUS_NAMES[int(rec.status[i, j])])
                + ((fmt(rec.lower[i, j]), fmt(rec.upper[i, j]), fmt(rec.C[i, j]), fmt(rec.L[i, j]),
                    fmt(bool(rec.new_covered[i, j]))) if ok else ("",) * 5)
                + tuple("" if math.isnan(x[j]) else fmt(x[j]) for x in diag)
            )
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as gz:
        gz.write(buf.getvalue().encode("utf-8"))


def write_scenario(out_dir, rec, summary, records=False):
    """All files for one scenario, in its own directory; returns the path."""
    d = os.path.join(out_dir, rec.scenario.dirname)
    os.makedirs(d, exist_ok=True)
    write_summary(summary, os.path.join(d, "summary.csv"))
    for name, ms in summary.methods.items():
        write_histogram(ms, os.path.join(d, f"hist_{name}.csv"))
    if records:
        write_records(rec, os.path.join(d, "records.csv.gz"))
    return d


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")
