"""Prediction-interval constructions for random-effects meta-analysis.

Three families are provided:

* Higgins-Thompson-Spiegelhalter (HTS) intervals, ``mu +/- c * sqrt(tau2 + V)``,
  in five variants differing in the tau2 estimator, the variance estimate of
  the pooled mean and the critical value.
* The Wang-Lee ensemble interval: empirical quantiles of shrunken effects.
* The Nagashima-Noma-Furukawa parametric bootstrap, which mixes a normal
  draw scaled by a tau from the confidence distribution of tau2, and a
  t(K-1) draw scaled by the HKSJ standard error.
"""

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy import interpolate, stats

from metapi.core import MetaDataset, cochran_q, fit_arrays, fit_dl, fit_reml
from metapi.errors import DatasetError, NumericError, ParameterError
from metapi.quadform import wchisq_cdf_batch

CRITICALS = ("t_k-2", "t_k-1", "z")
VARIANCES = ("IV", "HKSJ")
ESTIMATORS = ("DL", "REML")
KINDS = ("hts", "ensemble", "bootstrap")

CD_TOL = 1e-8
# Upper limit of the tau2 bracket, in units of max(1, mean within-study variance).
CD_CAP = 1e12
CD_GRID = 160


@dataclass(frozen=True)
class PIMethodSpec:
    name: str
    label: str
    kind: str
    tau2_estimator: str = "DL"
    variance: str = "IV"
    critical: str = "t_k-2"
    B: int = 5000
    recompute_weights: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown method kind {self.kind!r}")
        if self.tau2_estimator not in ESTIMATORS:
            raise ParameterError(f"unknown tau2 estimator {self.tau2_estimator!r}")
        if self.variance not in VARIANCES:
            raise ParameterError(f"unknown variance estimator {self.variance!r}")
        if self.critical not in CRITICALS:
            raise ParameterError(f"unknown critical value {self.critical!r}")
        if self.kind == "bootstrap" and self.B < 100:
            raise ParameterError(f"bootstrap needs B >= 100, got {self.B}")

    @property
    def min_studies(self):
        return 3 if self.kind == "hts" and self.critical == "t_k-2" else 2


PRESETS = {
    p.name: p
    for p in (
        PIMethodSpec("hts_dl_tk2", "HTS-DL (t_{k-2})", "hts", "DL", "IV", "t_k-2"),
        PIMethodSpec("hts_reml_tk2", "HTS-REML (t_{k-2})", "hts", "REML", "IV", "t_k-2"),
        PIMethodSpec("hts_hksj_tk2", "HTS-HKSJ (t_{k-2})", "hts", "DL", "HKSJ", "t_k-2"),
        PIMethodSpec("hts_dl_tk1", "HTS-DL (t_{k-1})", "hts", "DL", "IV", "t_k-1"),
        PIMethodSpec("hts_dl_z", "HTS-DL (z)", "hts", "DL", "IV", "z"),
        PIMethodSpec("ensemble", "Ensemble", "ensemble", "DL"),
        PIMethodSpec("bootstrap", "Parametric bootstrap", "bootstrap", "DL", "HKSJ", "t_k-1"),
    )
}


def _norm_key(name):
    return "".join(ch for ch in name.lower() if ch.isalnum())


_ALIASES = {}
for _p in PRESETS.values():
    _ALIASES[_norm_key(_p.name)] = _p.name
    _ALIASES[_norm_key(_p.label)] = _p.name
_ALIASES["boot"] = "bootstrap"
_ALIASES["parametricbootstrap"] = "bootstrap"
_ALIASES["wanglee"] = "ensemble"


def get_method(name, B=None):
    """Look up a preset by slug (``hts_dl_z``) or label (``HTS-DL (z)``)."""
    if isinstance(name, PIMethodSpec):
        spec = name
    else:
        key = _ALIASES.get(_norm_key(name))
        if key is None:
            raise ParameterError(f"unknown prediction-interval method {name!r}; known: {sorted(PRESETS)}")
        spec = PRESETS[key]
    if B is not None and spec.kind == "bootstrap":
        spec = replace(spec, B=int(B))
    return spec


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    level: float
    method: PIMethodSpec

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise NumericError("prediction interval bound is not finite", lower=self.lower, upper=self.upper)
        if self.lower > self.upper:
            raise NumericError("prediction interval bounds are reversed", lower=self.lower, upper=self.upper)

    @property
    def length(self):
        return self.upper - self.lower

    @property
    def degenerate(self):
        return self.lower == self.upper

    def contains(self, x):
        return self.lower < x < self.upper


def _check_level(level):
    if not 0.0 < level < 1.0:
        raise ParameterError(f"level must lie in (0, 1), got {level}")


@lru_cache(maxsize=1024)
def critical_value(critical, K, level):
    """Two-sided critical value: the ``(1 + level) / 2`` quantile."""
    p = 0.5 * (1.0 + level)
    if critical == "z":
        return float(stats.norm.ppf(p))
    df = K - 2 if critical == "t_k-2" else K - 1
    if critical not in ("t_k-2", "t_k-1"):
        raise ParameterError(f"unknown critical value {critical!r}")
    if df < 1:
        raise DatasetError(f"{critical} needs at least {3 if critical == 't_k-2' else 2} studies (K={K})")
    return float(stats.t.ppf(p, df))


def hts_pi(fit, critical="t_k-2", variance="IV", level=0.95, method=None):
    """HTS interval ``mu_hat +/- c * sqrt(tau2 + V)``, symmetric about ``mu_hat``."""
    _check_level(level)
    if method is None:
        method = PIMethodSpec("hts_custom", "HTS", "hts", fit.tau2_estimator, variance, critical)
    c = critical_value(critical, fit.K, level)
    var = fit.var_hksj if variance == "HKSJ" else fit.var_iv
    half = c * math.sqrt(fit.tau2 + var)
    return PredictionInterval(fit.mu_hat - half, fit.mu_hat + half, level, method)


def empirical_quantile(x, p):
    """Linear interpolation between order statistics at ``h = (n - 1) p + 1``."""
    return np.quantile(np.asarray(x, dtype=np.float64), p, method="linear")


def shrunken_effects(d, fit):
    factor = np.sqrt(fit.tau2 / (fit.tau2 + d.variances))
    return fit.mu_hat + factor * (d.effects - fit.mu_hat)


def ensemble_pi(d, fit, level=0.95, method=None):
    """Wang-Lee interval from the empirical quantiles of shrunken effects.

    With ``tau2 == 0`` every shrunken effect equals ``mu_hat`` and the
    interval degenerates to a point.
    """
    _check_level(level)
    a = 0.5 * (1.0 - level)
    lo, hi = empirical_quantile(shrunken_effects(d, fit), [a, 1.0 - a])
    return PredictionInterval(float(lo), float(hi), level, method or PRESETS["ensemble"])


class Tau2ConfidenceDistribution:
    """Confidence distribution of tau2 obtained by inverting the law of Q.

    Given tau2, Cochran's Q is a quadratic form in normal effects with
    covariance ``diag(v + tau2)``, hence a weighted sum of chi-square(1)
    variables whose weights are the eigenvalues of
    ``S^(1/2) (W - w w'/sum w) S^(1/2)``. The confidence distribution function
    is ``H(tau2) = P(Q > q_obs; tau2)``, with an atom of size ``H(0)`` at zero.
    """

    def __init__(self, d):
        if not isinstance(d, MetaDataset):
            raise DatasetError("expected a MetaDataset")
        v = d.variances
        w = 1.0 / v
        self.variances = v
        self.form = np.diag(w) - np.outer(w, w) / w.sum()
        het = cochran_q(d)
        self.q_obs = het.Q
        self.tau2_dl = het.tau2_dl
        self.scale = float(np.mean(v))
        self.cap = CD_CAP * max(1.0, self.scale)
        self.evaluators = set()

    def weights(self, tau2):
        """Chi-square weights of Q at each tau2 (rows sorted ascending)."""
        tau2 = np.atleast_1d(np.asarray(tau2, dtype=np.float64))
        s = np.sqrt(self.variances[None, :] + tau2[:, None])
        m = self.form[None, :, :] * s[:, :, None] * s[:, None, :]
        lam = np.linalg.eigvalsh(m)
        return np.clip(lam, 0.0, None)

    def q_cdf(self, tau2):
        """``P(Q <= q_obs; tau2)`` for each tau2."""
        tau2 = np.atleast_1d(np.asarray(tau2, dtype=np.float64))
        if self.q_obs <= 0.0:
            return np.zeros(tau2.shape)
        cdf, ev = wchisq_cdf_batch(self.weights(tau2), np.full(tau2.shape, self.q_obs))
        self.evaluators.update(ev.tolist())
        return cdf

    def cdf(self, tau2):
        """Confidence distribution function ``H(tau2)``."""
        return 1.0 - self.q_cdf(tau2)

    @property
    def mass_at_zero(self):
        return float(self.cdf(0.0)[0])

    def _upper_bracket(self, u_max):
        hi = max(1.0, self.tau2_dl)
        while self.cdf(hi)[0] <= u_max:
            hi *= 2.0
            if hi > self.cap:
                raise NumericError(
                    "tau2 bracket exceeded cap", u=float(u_max), cap=self.cap, q_obs=self.q_obs
                )
        return hi

    def ppf(self, u, tol=CD_TOL):
        """Exact inverse by bracketing bisection, vectorized over ``u``."""
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        if np.any((u <= 0.0) | (u >= 1.0)):
            raise ParameterError("confidence levels must lie in (0, 1)")
        out = np.zeros(u.shape)
        need = u > self.mass_at_zero
        if not need.any():
            return out
        uu = u[need]
        hi = np.full(uu.shape, self._upper_bracket(uu.max()))
        lo = np.zeros(uu.shape)
        while np.max(hi - lo) > tol:
            mid = 0.5 * (lo + hi)
            above = self.cdf(mid) > uu
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        out[need] = 0.5 * (lo + hi)
        return out

    def ppf_interp(self, u, n_grid=CD_GRID):
        """Inverse through a tabulated confidence distribution.

        ``-log H`` is tabulated on a grid uniform in ``log y`` with
        ``y = s / (s + tau2)``, where it is close to a power of ``y``, and
        ``log y`` is interpolated as a cubic spline in ``log(-log H)``.
        """
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        out = np.zeros(u.shape)
        h0 = self.mass_at_zero
        need = u > h0
        if not need.any():
            return out
        uu = u[need]
        hi = self._upper_bracket(uu.max())
        s = self.scale
        log_y = np.linspace(math.log(s / (s + hi)), 0.0, n_grid)
        tau2 = s * (np.exp(-log_y) - 1.0)
        tau2[-1] = 0.0
        c = self.q_cdf(tau2)
        # H = 1 - c loses relative accuracy as c -> 1; keep the resolvable part
        ok = c < 1.0 - 1e-10
        n_ok = int(np.argmin(ok)) if not ok.all() else ok.size
        x = np.log(-np.log1p(-c[:n_ok]))
        if n_ok < 8 or not np.all(np.diff(x) > 0):
            out[need] = self.ppf(uu)
            return out
        spline = interpolate.CubicSpline(x, log_y[:n_ok])
        h_min = 1.0 - c[n_ok - 1]
        res = np.empty(uu.shape)
        inside = uu >= h_min
        ly = np.clip(spline(np.log(-np.log(uu[inside]))), log_y[0], 0.0)
        res[inside] = np.maximum(s * (np.exp(-ly) - 1.0), 0.0)
        if not inside.all():
            res[~inside] = self.ppf(uu[~inside])
        out[need] = res
        return out


def sample_tau2_confidence(d, u, tol=CD_TOL):
    """tau2 at confidence level ``u``: the root of ``P(Q > q_obs; tau2) = u``.

    ``u`` may be a scalar or an array; levels inside the atom at zero map
    to 0. Feeding Uniform(0, 1) levels yields draws from the distribution.
    """
    arr = np.asarray(u, dtype=np.float64)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise ParameterError("u must lie in (0, 1)")
    out = Tau2ConfidenceDistribution(d).ppf(arr.ravel(), tol=tol)
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def bootstrap_draws(d, B, rng, recompute_weights=False, exact=False):
    """Predictive draws ``mu + z tau_b - t sqrt(V_HKSJ)`` for the bootstrap PI.

    ``mu`` and ``V_HKSJ`` come from the observed data at the DL estimate.
    With ``recompute_weights`` both are re-evaluated at each ``tau2_b``.
    ``exact`` inverts the confidence distribution by bisection per draw
    instead of through the tabulated inverse.
    """
    if B < 100:
        raise ParameterError(f"B must be at least 100, got {B}")
    y, v = d.effects, d.variances
    K = d.K
    cd = Tau2ConfidenceDistribution(d)
    mu, _, var_hksj, _ = fit_arrays(y, v, cd.tau2_dl)
    u = rng.random(B)
    while np.any(u == 0.0):
        u[u == 0.0] = rng.random()
    z = rng.standard_normal(B)
    t = rng.standard_t(K - 1, B)
    tau2_b = cd.ppf(u) if exact else cd.ppf_interp(u)
    if recompute_weights:
        w = 1.0 / (v[None, :] + tau2_b[:, None])
        sw = w.sum(axis=1)
        mu_b = (w @ y) / sw
        var_b = np.sum(w * (y[None, :] - mu_b[:, None]) ** 2, axis=1) / ((K - 1) * sw)
        return mu_b + z * np.sqrt(tau2_b) - t * np.sqrt(var_b)
    return mu + z * np.sqrt(tau2_b) - t * math.sqrt(var_hksj)


def bootstrap_pi(d, B=5000, level=0.95, rng=None, recompute_weights=False, exact=False, method=None):
    """Parametric-bootstrap interval: empirical quantiles of the predictive draws."""
    _check_level(level)
    if rng is None:
        raise ParameterError("bootstrap_pi needs an explicit numpy Generator")
    draws = bootstrap_draws(d, B, rng, recompute_weights=recompute_weights, exact=exact)
    a = 0.5 * (1.0 - level)
    lo, hi = empirical_quantile(draws, [a, 1.0 - a])
    if method is None:
        method = replace(PRESETS["bootstrap"], B=int(B), recompute_weights=recompute_weights)
    return PredictionInterval(float(lo), float(hi), level, method)


def compute_pi(method, d, level=0.95, rng=None, fits=None):
    """Compute any preset on a dataset.

    ``fits`` is an optional dict caching ``"DL"`` / ``"REML"`` fits across
    methods applied to the same data.
    """
    method = get_method(method) if not isinstance(method, PIMethodSpec) else method
    if d.K < method.min_studies:
        raise DatasetError(f"{method.label} needs at least {method.min_studies} studies (K={d.K})")
    if fits is None:
        fits = {}
    if method.kind == "bootstrap":
        return bootstrap_pi(d, method.B, level, rng, recompute_weights=method.recompute_weights, method=method)
    est = method.tau2_estimator
    if est not in fits:
        fits[est] = fit_dl(d) if est == "DL" else fit_reml(d)
    fit = fits[est]
    if method.kind == "ensemble":
        return ensemble_pi(d, fit, level, method)
    return hts_pi(fit, method.critical, method.variance, level, method)
