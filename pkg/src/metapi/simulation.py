"""Coverage simulation for prediction-interval methods.

Each scenario fixes the number of studies, the per-study sample sizes, the
between-study variance and the shape of the true-effect distribution. A
replicate generates a mean-difference meta-analysis, computes every
requested interval and records its covered probability ``F(U) - F(L)``, its
length, and whether an independent new true effect falls inside it.

Randomness is drawn from per-replicate substreams keyed by
``(master_seed, scenario index, replicate, stream)``, so results do not
depend on execution order or on how replicates are split across workers.
"""

import itertools
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from metapi import kernels
from metapi.core import REML_MAX_ITER, REML_TOL, MetaDataset, fit_arrays, q_statistics
from metapi.distributions import dist_from_name
from metapi.errors import ConfigError, MetaPIError, ScenarioAbort
from metapi.intervals import PRESETS, PIMethodSpec, bootstrap_pi, critical_value, empirical_quantile

GROUP_VARIANCE = 10.0
MIXED_SIZES = (50, 100, 500)

DEFAULT_K = (3, 4, 5, 7, 10, 15, 20, 30, 100)
DEFAULT_N = (30, 50, 100, 200, 500, 1000, 2000, "mixed")
DEFAULT_TAU2 = (0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 5.0)
DEFAULT_DISTS = ("normal", "skew0.5", "skew0.75", "skew0.99", "bimodal", "uniform")

STREAM_DATA = 0
STREAM_NEW = 1
STREAM_BOOT = 2
GENERATOR_ID = "numpy.random.Generator(PCG64) seeded by SeedSequence(master_seed, spawn_key=(scenario, replicate, stream))"

FAILURE_THRESHOLD = 0.01

# status codes in the per-replicate arrays
OK = 0
SKIPPED = 1
FAILED = 2


def replicate_rng(master_seed, scenario_index, rep, stream):
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(scenario_index), int(rep), int(stream)))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class GridConfig:
    K: tuple = DEFAULT_K
    N: tuple = DEFAULT_N
    tau2: tuple = DEFAULT_TAU2
    dist: tuple = DEFAULT_DISTS
    mu: float = 0.0
    reps: int = 5000
    reps_bootstrap: int = 1000
    B: int = 5000
    alpha: float = 0.05
    beta: tuple = (0.8,)
    methods: tuple = tuple(PRESETS)
    seed: int = 20240601
    hist_bins: int = 100
    records: bool = False
    bootstrap_recompute_weights: bool = False


@dataclass(frozen=True)
class Scenario:
    index: int
    K: int
    sample_size: object  # even int, or "mixed"
    tau2: float
    dist: str
    mu: float = 0.0
    reps: int = 5000
    reps_bootstrap: int = 1000
    alpha: float = 0.05
    methods: tuple = tuple(PRESETS.values())
    master_seed: int = 0
    betas: tuple = (0.8,)
    hist_bins: int = 100
    true_dist: object = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        problems = []
        if self.K < 2:
            problems.append(f"K must be at least 2, got {self.K}")
        if self.sample_size != "mixed":
            if not isinstance(self.sample_size, (int, np.integer)) or self.sample_size < 4 or self.sample_size % 2:
                problems.append(f"sample size must be an even integer >= 4 or 'mixed', got {self.sample_size!r}")
        if self.reps < 1:
            problems.append("reps must be at least 1")
        if not self.tau2 > 0:
            problems.append(f"tau2 must be positive, got {self.tau2}")
        if not 0 < self.alpha < 1:
            problems.append(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.methods:
            problems.append("at least one method is required")
        for m in self.methods:
            if self.K < m.min_studies:
                problems.append(f"method {m.name} needs K >= {m.min_studies}, got K={self.K}")
        if problems:
            raise ConfigError(problems)
        try:
            dist = dist_from_name(self.dist, self.mu, self.tau2)
        except MetaPIError as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "true_dist", dist)

    @property
    def level(self):
        return 1.0 - self.alpha

    @property
    def sizes(self):
        if self.sample_size == "mixed":
            return np.resize(np.array(MIXED_SIZES), self.K)
        return np.full(self.K, int(self.sample_size))

    @property
    def size_tag(self):
        return "mixed" if self.sample_size == "mixed" else str(self.sample_size)

    @property
    def sigma2(self):
        """Theoretical within-study variances ``V/N_E + V/N_C``."""
        half = self.sizes // 2
        return GROUP_VARIANCE / half + GROUP_VARIANCE / half

    @property
    def v_ratio(self):
        sig = self.sigma2
        if np.all(sig == sig[0]):
            return self.tau2 / float(sig[0])
        return self.tau2 / statistics.fmean(sig.tolist())

    @property
    def dirname(self):
        return f"s{self.index}_K{self.K}_N{self.size_tag}_t2{self.tau2:g}_{self.dist}"


def build_grid(config):
    """Fully crossed scenario grid, indexed in iteration order."""
    if isinstance(config, dict):
        config = GridConfig(**config)
    problems = [f"factor {name!r} is empty" for name in ("N", "K", "tau2", "dist") if not getattr(config, name)]
    if not config.methods:
        problems.append("methods is empty")
    if problems:
        raise ConfigError(problems)
    methods = tuple(
        PIMethodSpec(
            p.name, p.label, p.kind, p.tau2_estimator, p.variance, p.critical,
            config.B if p.kind == "bootstrap" else p.B,
            config.bootstrap_recompute_weights if p.kind == "bootstrap" else False,
        )
        for p in (m if isinstance(m, PIMethodSpec) else PRESETS[m] for m in config.methods)
    )
    out = []
    for i, (n, k, t2, dist) in enumerate(itertools.product(config.N, config.K, config.tau2, config.dist)):
        out.append(
            Scenario(
                index=i, K=int(k), sample_size=n, tau2=float(t2), dist=dist, mu=float(config.mu),
                reps=int(config.reps), reps_bootstrap=int(config.reps_bootstrap), alpha=float(config.alpha),
                methods=methods, master_seed=int(config.seed), betas=tuple(config.beta),
                hist_bins=int(config.hist_bins),
            )
        )
    return out


@dataclass(frozen=True)
class GeneratedData:
    dataset: MetaDataset
    theta: np.ndarray
    sigma2: np.ndarray
    sizes: np.ndarray


def generate_dataset(s, rep_index, rng):
    """One simulated meta-analysis of mean differences.

    Group sample variances are scaled chi-squares; observed effects add
    normal error with the theoretical within-study variance to true effects
    drawn from the scenario's distribution.
    """
    sizes = s.sizes
    half = sizes // 2
    df = half - 1
    v_e = rng.chisquare(df) * GROUP_VARIANCE / df
    v_c = rng.chisquare(df) * GROUP_VARIANCE / df
    sigma2_hat = v_e / half + v_c / half
    sigma2 = GROUP_VARIANCE / half + GROUP_VARIANCE / half
    theta = np.asarray(s.true_dist.sample(rng, s.K), dtype=np.float64)
    theta_hat = theta + rng.standard_normal(s.K) * np.sqrt(sigma2)
    return GeneratedData(MetaDataset(theta_hat, sigma2_hat), theta, sigma2, sizes)


def coverage(pi, d):
    """Mass of the true-effect distribution inside the interval."""
    return min(max(d.cdf(pi.upper) - d.cdf(pi.lower), 0.0), 1.0)


def theoretical_length(d, level=0.95):
    a = 0.5 * (1.0 - level)
    return d.quantile(1.0 - a) - d.quantile(a)


@dataclass
class ScenarioRecords:
    """Per-replicate output; method arrays have shape ``(n_methods, reps)``."""

    scenario: Scenario
    lower: np.ndarray
    upper: np.ndarray
    status: np.ndarray
    reason: list
    theta_new: np.ndarray
    tau2_dl: np.ndarray
    tau2_reml: np.ndarray
    I2: np.ndarray
    Q: np.ndarray
    mu_hat: np.ndarray
    C: np.ndarray = None
    L: np.ndarray = None
    new_covered: np.ndarray = None

    @property
    def method_names(self):
        return [m.name for m in self.scenario.methods]


def _replicate_chunk(s, start, stop):
    n_m = len(s.methods)
    n = stop - start
    lower = np.full((n_m, n), np.nan)
    upper = np.full((n_m, n), np.nan)
    status = np.zeros((n_m, n), dtype=np.int8)
    reason = []
    theta_new = np.empty(n)
    diag = np.full((5, n), np.nan)
    level = s.level
    crit = {}
    for m in s.methods:
        if m.kind == "hts":
            crit[m.critical] = critical_value(m.critical, s.K, level)
    a = 0.5 * s.alpha
    for j, rep in enumerate(range(start, stop)):
        gen = generate_dataset(s, rep, replicate_rng(s.master_seed, s.index, rep, STREAM_DATA))
        d = gen.dataset
        y, v = d.effects, d.variances
        Q, I2, udl = q_statistics(y, v)
        tau2_dl = max(0.0, udl)
        reml, _, reml_ok = kernels.reml_fixed_point(y, v, tau2_dl, REML_TOL, REML_MAX_ITER)
        fits = {"DL": fit_arrays(y, v, tau2_dl) + (tau2_dl,)}
        if reml_ok:
            fits["REML"] = fit_arrays(y, v, reml) + (reml,)
        diag[:, j] = (tau2_dl, reml if reml_ok else np.nan, I2, Q, fits["DL"][0])
        for i, m in enumerate(s.methods):
            try:
                if m.kind == "bootstrap":
                    if rep >= s.reps_bootstrap:
                        status[i, j] = SKIPPED
                        continue
                    pi = bootstrap_pi(
                        d, m.B, level, replicate_rng(s.master_seed, s.index, rep, STREAM_BOOT),
                        recompute_weights=m.recompute_weights, method=m,
                    )
                    lower[i, j], upper[i, j] = pi.lower, pi.upper
                    continue
                fit = fits.get(m.tau2_estimator)
                if fit is None:
                    status[i, j] = FAILED
                    reason.append((rep, m.name, "reml_nonconvergence"))
                    continue
                mu, var_iv, var_hksj, w, tau2 = fit
                if m.kind == "ensemble":
                    shrunk = mu + np.sqrt(tau2 / (tau2 + v)) * (y - mu)
                    lo, hi = empirical_quantile(shrunk, [a, 1.0 - a])
                else:
                    var = var_hksj if m.variance == "HKSJ" else var_iv
                    half = crit[m.critical] * math.sqrt(tau2 + var)
                    lo, hi = mu - half, mu + half
                lower[i, j], upper[i, j] = lo, hi
            except MetaPIError as exc:
                status[i, j] = FAILED
                reason.append((rep, m.name, type(exc).__name__))
        theta_new[j] = s.true_dist.sample(replicate_rng(s.master_seed, s.index, rep, STREAM_NEW), 1)[0]
    return lower, upper, status, reason, theta_new, diag


def _chunks(reps, jobs):
    n = max(1, min(jobs, reps))
    edges = np.linspace(0, reps, n + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def simulate_records(s, jobs=1):
    """Run all replicates of a scenario; chunks are merged in replicate order."""
    chunks = _chunks(s.reps, jobs)
    if len(chunks) == 1:
        parts = [_replicate_chunk(s, *chunks[0])]
    else:
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_replicate_chunk, [s] * len(chunks), *zip(*chunks)))
    lower = np.concatenate([p[0] for p in parts], axis=1)
    upper = np.concatenate([p[1] for p in parts], axis=1)
    status = np.concatenate([p[2] for p in parts], axis=1)
    reason = [r for p in parts for r in p[3]]
    theta_new = np.concatenate([p[4] for p in parts])
    diag = np.concatenate([p[5] for p in parts], axis=1)
    rec = ScenarioRecords(s, lower, upper, status, reason, theta_new, *diag)
    ok = status == OK
    lo = np.where(ok, lower, 0.0)
    hi = np.where(ok, upper, 0.0)
    C = np.clip(s.true_dist.cdf(hi) - s.true_dist.cdf(lo), 0.0, 1.0)
    rec.C = np.where(ok, C, np.nan)
    rec.L = np.where(ok, upper - lower, np.nan)
    rec.new_covered = np.where(ok, (lower < theta_new) & (theta_new < upper), False)
    return rec


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n: int
    n_failed: int
    mean_C: float
    median_C: float
    mean_abs_dev: float
    mean_rel_length: float
    norm_mae: float
    prop_C_gt_99: float
    freq_new_covered: float
    tolerance_content: dict
    histogram: np.ndarray
    bin_edges: np.ndarray


@dataclass(frozen=True)
class ScenarioSummary:
    scenario: Scenario
    L_T: float
    v: float
    mean_I2: float
    methods: dict

    def __getitem__(self, name):
        return self.methods[name]


def summarize(C, L, L_T, betas=(0.8,), bins=100, target=0.95, new_covered=None, method="", n_failed=0):
    """Performance measures of one method from its replicate records."""
    C = np.asarray(C, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if C.size == 0:
        raise ValueError("summarize needs at least one record")
    counts, edges = np.histogram(C, bins=bins, range=(0.0, 1.0))
    rel = L / L_T
    return MethodSummary(
        method=method,
        n=int(C.size),
        n_failed=int(n_failed),
        mean_C=float(np.mean(C)),
        median_C=float(np.median(C)),
        mean_abs_dev=float(np.mean(np.abs(C - target))),
        mean_rel_length=float(np.mean(rel)),
        norm_mae=float(np.mean(np.abs(rel - 1.0))),
        prop_C_gt_99=float(np.mean(C > 0.99)),
        freq_new_covered=float(np.mean(new_covered)) if new_covered is not None else math.nan,
        tolerance_content={float(b): float(np.mean(C >= b)) for b in betas},
        histogram=counts,
        bin_edges=edges,
    )


def summarize_records(rec):
    s = rec.scenario
    L_T = theoretical_length(s.true_dist, s.level)
    per_method = {}
    for i, m in enumerate(s.methods):
        ok = rec.status[i] == OK
        if not ok.any():
            continue
        per_method[m.name] = summarize(
            rec.C[i, ok], rec.L[i, ok], L_T, s.betas, s.hist_bins, s.level,
            new_covered=rec.new_covered[i, ok], method=m.name,
            n_failed=int(np.sum(rec.status[i] == FAILED)),
        )
    return ScenarioSummary(s, L_T, s.v_ratio, float(np.mean(rec.I2)), per_method)


def check_failures(rec, threshold=FAILURE_THRESHOLD):
    s = rec.scenario
    for i, m in enumerate(s.methods):
        attempted = np.sum(rec.status[i] != SKIPPED)
        failed = np.sum(rec.status[i] == FAILED)
        if attempted and failed / attempted > threshold:
            reasons = sorted({r[2] for r in rec.reason if r[1] == m.name})
            raise ScenarioAbort(
                f"scenario {s.dirname}: {m.name} failed in {failed}/{attempted} replicates ({', '.join(reasons)})",
                failures={m.name: int(failed)},
            )


def run_scenario(s, jobs=1):
    """Simulate a scenario; returns ``(records, summary)``.

    Raises :class:`ScenarioAbort` when any method fails in more than 1% of
    the replicates it was attempted on.
    """
    rec = simulate_records(s, jobs=jobs)
    check_failures(rec)
    return rec, summarize_records(rec)


def failure_counts(rec):
    return {m.name: int(np.sum(rec.status[i] == FAILED)) for i, m in enumerate(rec.scenario.methods)}
