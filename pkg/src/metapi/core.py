"""Random-effects model fitting.

Within-study variances are treated as known constants. Heterogeneity is
summarized by Cochran's Q, I^2 and the DerSimonian-Laird moment estimator;
REML is solved by fixed-point iteration of its estimating equation.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from metapi import kernels
from metapi.errors import ConvergenceError, DatasetError

REML_TOL = 1e-10
REML_MAX_ITER = 200


@dataclass(frozen=True)
class StudySummary:
    id: str
    effect: float
    within_variance: float

    def __post_init__(self):
        if not math.isfinite(self.effect):
            raise DatasetError(f"study {self.id!r}: effect must be finite")
        if not (self.within_variance > 0 and math.isfinite(self.within_variance)):
            raise DatasetError(f"study {self.id!r}: within-study variance must be positive and finite")

    @property
    def se(self):
        return math.sqrt(self.within_variance)


@dataclass(frozen=True, eq=False)
class MetaDataset:
    """Observed effects and within-study variances of ``K`` studies.

    Stored as read-only numpy arrays; ``ids`` defaults to ``"1".."K"``.
    """

    effects: np.ndarray
    variances: np.ndarray
    ids: tuple = field(default=())

    def __post_init__(self):
        y = np.array(self.effects, dtype=np.float64).ravel()
        v = np.array(self.variances, dtype=np.float64).ravel()
        if y.shape != v.shape:
            raise DatasetError("effects and variances differ in length")
        if y.size < 2:
            raise DatasetError(f"need at least 2 studies, got {y.size}")
        if not np.all(np.isfinite(y)):
            raise DatasetError("effects must be finite")
        if not np.all((v > 0) & np.isfinite(v)):
            raise DatasetError("within-study variances must be positive and finite")
        y.flags.writeable = False
        v.flags.writeable = False
        ids = tuple(str(i) for i in self.ids) if self.ids else tuple(str(i + 1) for i in range(y.size))
        if len(ids) != y.size:
            raise DatasetError("ids differ in length from effects")
        object.__setattr__(self, "effects", y)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_studies(cls, studies):
        studies = list(studies)
        return cls(
            [s.effect for s in studies],
            [s.within_variance for s in studies],
            tuple(s.id for s in studies),
        )

    @property
    def K(self):
        return self.effects.size

    @property
    def studies(self):
        return [StudySummary(i, float(y), float(v)) for i, y, v in zip(self.ids, self.effects, self.variances)]

    def __len__(self):
        return self.K

    def __eq__(self, other):
        if not isinstance(other, MetaDataset):
            return NotImplemented
        return (
            self.ids == other.ids
            and np.array_equal(self.effects, other.effects)
            and np.array_equal(self.variances, other.variances)
        )

    def shifted(self, c):
        return MetaDataset(self.effects + c, self.variances, self.ids)

    def scaled(self, s):
        return MetaDataset(self.effects * s, self.variances * s * s, self.ids)


@dataclass(frozen=True)
class HeterogeneityStats:
    Q: float
    I2: float
    tau2_udl: float
    tau2_dl: float


@dataclass(frozen=True)
class REMLResult:
    tau2: float
    iterations: int
    converged: bool


@dataclass(frozen=True, eq=False)
class REFit:
    mu_hat: float
    var_iv: float
    var_hksj: float
    tau2: float
    tau2_estimator: str
    weights: np.ndarray
    het: HeterogeneityStats
    K: int

    @property
    def se_iv(self):
        return math.sqrt(self.var_iv)

    @property
    def se_hksj(self):
        return math.sqrt(self.var_hksj)


def _check(d):
    if not isinstance(d, MetaDataset):
        raise DatasetError("expected a MetaDataset")


def q_statistics(y, v):
    """Array-level core of :func:`cochran_q`; returns ``(Q, I2, tau2_udl)``."""
    w = 1.0 / v
    s1 = w.sum()
    mean_fe = np.dot(w, y) / s1
    Q = float(np.dot(w, (y - mean_fe) ** 2))
    k = y.size
    I2 = max(0.0, (Q - (k - 1)) / Q) if Q > 0 else 0.0
    tau2_udl = (Q - (k - 1)) / (s1 - np.dot(w, w) / s1)
    return Q, I2, float(tau2_udl)


def cochran_q(d):
    """Cochran's Q, I^2 and the (untruncated) DerSimonian-Laird estimate."""
    _check(d)
    Q, I2, udl = q_statistics(d.effects, d.variances)
    return HeterogeneityStats(Q=Q, I2=I2, tau2_udl=udl, tau2_dl=max(0.0, udl))


def tau2_reml(d, start=None, tol=REML_TOL, max_iter=REML_MAX_ITER):
    """REML estimate of the between-study variance.

    Starts from the DerSimonian-Laird value. Raises :class:`ConvergenceError`
    (carrying the last iterate) if ``max_iter`` is reached; callers that want
    to fall back to DL must do so explicitly.
    """
    _check(d)
    if start is None:
        start = cochran_q(d).tau2_dl
    tau2, it, ok = kernels.reml_fixed_point(d.effects, d.variances, float(start), float(tol), int(max_iter))
    if not ok:
        raise ConvergenceError("REML iteration did not converge", tau2, it)
    return REMLResult(float(tau2), int(it), True)


def fit_arrays(y, v, tau2):
    """Array-level core of :func:`re_fit`; returns ``(mu, var_iv, var_hksj, w)``."""
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = float(np.dot(w, y) / sw)
    # clamp against rounding outside the observed range
    mu = min(max(mu, float(y.min())), float(y.max()))
    var_hksj = float(np.dot(w, (y - mu) ** 2) / ((y.size - 1) * sw))
    return mu, float(1.0 / sw), var_hksj, w


def re_fit(d, tau2, estimator="DL", het=None):
    """Pooled random-effects estimate at a given between-study variance."""
    _check(d)
    tau2 = float(tau2)
    if not tau2 >= 0:
        raise DatasetError(f"tau2 must be nonnegative, got {tau2}")
    if het is None:
        het = cochran_q(d)
    mu, var_iv, var_hksj, w = fit_arrays(d.effects, d.variances, tau2)
    w.flags.writeable = False
    return REFit(mu, var_iv, var_hksj, tau2, estimator, w, het, d.K)


def fit_dl(d):
    het = cochran_q(d)
    return re_fit(d, het.tau2_dl, "DL", het)


def fit_reml(d):
    het = cochran_q(d)
    res = tau2_reml(d, start=het.tau2_dl)
    return re_fit(d, res.tau2, "REML", het)


def restricted_loglik(d, tau2):
    """Restricted log-likelihood of ``tau2`` (up to an additive constant)."""
    y, v = d.effects, d.variances
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = np.dot(w, y) / sw
    return float(-0.5 * (np.sum(np.log(v + tau2)) + math.log(sw) + np.dot(w, (y - mu) ** 2)))
