"""Distribution of nonnegative-weighted sums of chi-square(1) variables.

The primary evaluator is Ruben's mixture representation: with
``beta = min(lambda)`` the sum equals ``beta`` times a chi-square whose
degrees of freedom are ``m + 2J`` for a random, nonnegative integer ``J``.
All mixing weights are nonnegative, so the truncation error is bounded by
the unassigned mass and the series is stopped on a relative tolerance.
Imhof's numerical inversion and a plain Monte-Carlo estimate are kept as
fallbacks and as independent checks.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from metapi import kernels
from metapi.errors import NumericError, ParameterError

EIGEN_FLOOR = 1e-12
SERIES_EPS = 1e-10
MAX_TERMS = 20000
MC_DRAWS = 200_000


@dataclass(frozen=True)
class WeightedChiSquare:
    """``sum_k weights[k] * X_k`` with ``X_k`` i.i.d. chi-square(1)."""

    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.size == 0 or not np.all(np.isfinite(w)):
            raise ParameterError("weights must be a nonempty finite sequence")
        if np.any(w < 0):
            raise ParameterError("weights must be nonnegative")
        if not np.any(w > 0):
            raise ParameterError("at least one weight must be positive")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))

    def cdf(self, q, method="ruben"):
        return weighted_chisq_cdf(self, q, method=method)

    def sf(self, q):
        return 1.0 - weighted_chisq_cdf(self, q)


def _prepare(lam, q):
    lam = np.atleast_2d(np.asarray(lam, dtype=np.float64))
    q = np.broadcast_to(np.asarray(q, dtype=np.float64), (lam.shape[0],))
    top = lam.max(axis=1)
    if np.any(~(top > 0)):
        raise ParameterError("every row needs at least one positive weight")
    keep = lam > EIGEN_FLOOR * top[:, None]
    beta = np.where(keep, lam, np.inf).min(axis=1)
    gam = np.where(keep, 1.0 - beta[:, None] / np.where(keep, lam, 1.0), 0.0)
    shape0 = 0.5 * keep.sum(axis=1)
    half_x = np.where(q > 0, 0.5 * q / beta, 0.0)
    p_start = special.gammainc(shape0, half_x)
    with np.errstate(divide="ignore"):
        logt = np.where(half_x > 0, shape0 * np.log(half_x) - half_x - special.gammaln(shape0 + 1.0), -np.inf)
    return lam, keep, q, np.ascontiguousarray(gam), half_x, shape0, p_start, logt


def wchisq_cdf_batch(lam, q, eps=SERIES_EPS, max_terms=MAX_TERMS):
    """Row-wise CDF of weighted chi-square sums.

    ``lam`` has one row of weights per form (pad with zeros); weights below
    ``1e-12`` times the row maximum are treated as zero. Rows on which the
    series exhausts its budget are re-evaluated with Imhof's method.

    Returns ``(cdf, evaluator)`` where ``evaluator`` is a string array naming
    the method used per row.
    """
    lam, keep, q, gam, half_x, shape0, p_start, logt = _prepare(lam, q)
    cdf, status = kernels.ruben_series(gam, half_x, shape0, p_start, logt, float(eps), int(max_terms))
    evaluator = np.full(lam.shape[0], "ruben", dtype=object)
    for i in np.flatnonzero(status):
        w = lam[i][keep[i]]
        try:
            cdf[i] = 1.0 - imhof_sf(w, q[i])
            evaluator[i] = "imhof"
        except NumericError:
            cdf[i] = mc_cdf(w, q[i], seed=0)
            evaluator[i] = "montecarlo"
    return cdf, evaluator


def imhof_sf(weights, q, tol=1e-9, max_chunks=5000):
    """Upper-tail probability by Imhof's inversion of the characteristic function.

    For large ``u`` the integrand oscillates with period ``4 pi / q`` under the
    envelope ``1 / (u rho(u))``; the range is cut where one half-period of the
    envelope falls below ``tol`` and integrated piecewise.
    """
    lam = np.asarray(weights, dtype=np.float64)
    lam = lam[lam > 0]
    if q <= 0:
        return 1.0
    m = lam.size
    half_log_prod = 0.5 * float(np.sum(np.log(lam)))
    # envelope(U) * 4/q <= tol * pi, envelope(U) <= U^(-1-m/2) prod(lam)^(-1/2)
    upper = math.exp((math.log(4.0 / (q * tol * math.pi)) - half_log_prod) / (1.0 + 0.5 * m))

    def integrand(u):
        theta = 0.5 * np.sum(np.arctan(lam * u)) - 0.5 * q * u
        rho = np.exp(0.25 * np.sum(np.log1p((lam * u) ** 2)))
        return math.sin(theta) / (u * rho)

    period = 40.0 * math.pi / (q + float(lam.sum()))
    n_chunks = int(math.ceil(upper / period))
    if n_chunks > max_chunks:
        raise NumericError("Imhof truncation point too far out", upper=upper, q=q)
    total = 0.0
    abserr = 0.0
    for c in range(n_chunks):
        a = c * period
        val, err = integrate.quad(integrand, a, min(a + period, upper), limit=200)
        total += val
        abserr += err
    if not math.isfinite(total) or abserr > 1e-6:
        raise NumericError("Imhof integral did not reach tolerance", abserr=abserr, q=q)
    return min(max(0.5 + total / math.pi, 0.0), 1.0)


def mc_cdf(weights, q, draws=MC_DRAWS, seed=0):
    """Monte-Carlo estimate of ``P(sum lambda_k X_k <= q)``."""
    lam = np.asarray(weights, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.chisquare(1.0, size=(draws, lam.size)) @ lam
    return float(np.mean(x <= q))


def weighted_chisq_cdf(w, q, method="ruben"):
    """``P(Q <= q)`` for a :class:`WeightedChiSquare` (or a weight sequence).

    ``method`` is one of ``"ruben"`` (default), ``"imhof"`` or ``"montecarlo"``.
    """
    if not isinstance(w, WeightedChiSquare):
        w = WeightedChiSquare(tuple(np.ravel(w)))
    q = float(q)
    if math.isnan(q):
        raise ParameterError("q is NaN")
    if q <= 0.0:
        return 0.0
    lam = np.asarray(w.weights)
    if method == "ruben":
        cdf, _ = wchisq_cdf_batch(lam[None, :], np.array([q]))
        return float(cdf[0])
    if method == "imhof":
        return 1.0 - imhof_sf(lam, q)
    if method == "montecarlo":
        return mc_cdf(lam, q)
    raise ParameterError(f"unknown evaluator {method!r}")
