"""True-effect distributions with matched mean and variance.

Every family is parameterized by its mean and variance, so swapping the
family changes only the shape of the between-study distribution. Skew-normal
laws are additionally indexed by their skewness coefficient.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats

from metapi.errors import ParameterError

FAMILIES = ("normal", "skew_normal", "bimodal", "uniform")

_B = math.sqrt(2.0 / math.pi)
# Skewness of the skew-normal as its shape parameter delta -> 1.
MAX_SKEWNESS = 0.5 * (4.0 - math.pi) * _B**3 / (1.0 - _B**2) ** 1.5

# Equal-weight two-normal mixture: component means at mean +/- sqrt(0.75 var),
# common component variance 0.25 var.
BIMODAL_SHIFT = math.sqrt(0.75)
BIMODAL_COMPONENT_SD = math.sqrt(0.25)


def _skewness_of_delta(delta):
    bd = _B * delta
    return 0.5 * (4.0 - math.pi) * bd**3 / (1.0 - bd * bd) ** 1.5


def skew_normal_delta(skewness, tol=1e-12):
    """Solve the skew-normal ``delta`` giving the requested skewness."""
    g = abs(skewness)
    if g == 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _skewness_of_delta(mid) < g:
            lo = mid
        else:
            hi = mid
    return math.copysign(0.5 * (lo + hi), skewness)


@dataclass(frozen=True)
class TrueEffectDist:
    """A distribution of true study effects.

    Build instances with :func:`make_true_effect_dist`; the derived fields
    (``loc``, ``scale``, ``shape``) are filled in there.
    """

    family: str
    mean: float
    variance: float
    skewness: float | None = None
    loc: float = field(default=0.0, repr=False)
    scale: float = field(default=1.0, repr=False)
    shape: float = field(default=0.0, repr=False)

    @property
    def name(self):
        if self.family == "skew_normal":
            return f"skew{self.skewness:g}"
        return self.family

    @property
    def sd(self):
        return math.sqrt(self.variance)

    # analytic moments, used by the moment-matching tests
    def analytic_mean(self):
        if self.family == "skew_normal":
            delta = self.shape / math.sqrt(1.0 + self.shape**2)
            return self.loc + self.scale * delta * _B
        return self.mean

    def analytic_variance(self):
        if self.family == "skew_normal":
            delta = self.shape / math.sqrt(1.0 + self.shape**2)
            return self.scale**2 * (1.0 - (_B * delta) ** 2)
        if self.family == "bimodal":
            s = self.sd
            comp = (BIMODAL_COMPONENT_SD * s) ** 2
            return comp + (BIMODAL_SHIFT * s) ** 2
        if self.family == "uniform":
            return (2.0 * self.scale) ** 2 / 12.0
        return self.variance

    def analytic_skewness(self):
        if self.family == "skew_normal":
            delta = self.shape / math.sqrt(1.0 + self.shape**2)
            return _skewness_of_delta(delta)
        return 0.0

    @property
    def support(self):
        if self.family == "uniform":
            return (self.loc - self.scale, self.loc + self.scale)
        return (-math.inf, math.inf)

    def cdf(self, x):
        """Cumulative distribution function; accepts scalars or arrays."""
        arr = np.asarray(x, dtype=np.float64)
        if np.isnan(arr).any():
            raise ParameterError("cdf argument is NaN")
        if self.family == "normal" or (self.family == "skew_normal" and self.shape == 0.0):
            out = special.ndtr((arr - self.loc) / self.scale)
        elif self.family == "skew_normal" and self.shape > 0.0:
            out = stats.skewnorm.cdf(arr, self.shape, loc=self.loc, scale=self.scale)
        elif self.family == "skew_normal":
            # reflect: scipy's negative-shape CDF is not monotone at the ulp level near 1
            out = 1.0 - stats.skewnorm.cdf(-(arr - self.loc) / self.scale, -self.shape)
        elif self.family == "bimodal":
            s = self.sd * BIMODAL_COMPONENT_SD
            d = self.sd * BIMODAL_SHIFT
            out = 0.5 * special.ndtr((arr - (self.mean - d)) / s) + 0.5 * special.ndtr(
                (arr - (self.mean + d)) / s
            )
        else:
            out = np.clip((arr - (self.loc - self.scale)) / (2.0 * self.scale), 0.0, 1.0)
        out = np.clip(out, 0.0, 1.0)
        return float(out) if out.ndim == 0 else out

    def quantile(self, p):
        """Inverse CDF for a single probability in (0, 1)."""
        p = float(p)
        if not 0.0 < p < 1.0:
            raise ParameterError(f"quantile level must lie in (0, 1), got {p}")
        if self.family == "normal":
            return self.loc + self.scale * float(special.ndtri(p))
        if self.family == "uniform":
            return self.loc - self.scale + 2.0 * self.scale * p
        if self.family == "skew_normal" and self.shape == 0.0:
            return self.loc + self.scale * float(special.ndtri(p))
        return self._solve_quantile(p)

    def _solve_quantile(self, p):
        step = self.sd
        lo = self.mean - step
        hi = self.mean + step
        while self.cdf(lo) > p:
            step *= 2.0
            lo = self.mean - step
        step = self.sd
        while self.cdf(hi) < p:
            step *= 2.0
            hi = self.mean + step
        return optimize.brentq(lambda x: self.cdf(x) - p, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps)

    def sample(self, rng, size=None):
        """Draw from the distribution using the caller's generator."""
        if self.family == "normal":
            return rng.normal(self.loc, self.scale, size)
        if self.family == "skew_normal":
            delta = self.shape / math.sqrt(1.0 + self.shape**2)
            u0 = rng.standard_normal(size)
            u1 = rng.standard_normal(size)
            return self.loc + self.scale * (delta * np.abs(u0) + math.sqrt(1.0 - delta * delta) * u1)
        if self.family == "bimodal":
            upper = rng.random(size) < 0.5
            z = rng.standard_normal(size)
            d = self.sd * BIMODAL_SHIFT
            centre = np.where(upper, self.mean + d, self.mean - d)
            out = centre + self.sd * BIMODAL_COMPONENT_SD * z
            return float(out) if np.ndim(out) == 0 else out
        return rng.uniform(self.loc - self.scale, self.loc + self.scale, size)


def make_true_effect_dist(family, mean, variance, skewness=None):
    """Construct a distribution of the given family with matched moments.

    ``skewness`` must be given for (and only for) the skew-normal family and
    must lie strictly inside the attainable range ``(-0.99527, 0.99527)``.
    """
    family = family.lower()
    if family not in FAMILIES:
        raise ParameterError(f"unknown family {family!r}; expected one of {FAMILIES}")
    mean = float(mean)
    variance = float(variance)
    if not math.isfinite(mean):
        raise ParameterError("mean must be finite")
    if not (variance > 0.0 and math.isfinite(variance)):
        raise ParameterError(f"variance must be positive and finite, got {variance}")
    if (skewness is not None) != (family == "skew_normal"):
        raise ParameterError("skewness is required for skew_normal and not allowed otherwise")
    sd = math.sqrt(variance)
    if family == "normal":
        return TrueEffectDist("normal", mean, variance, loc=mean, scale=sd)
    if family == "uniform":
        return TrueEffectDist("uniform", mean, variance, loc=mean, scale=math.sqrt(3.0 * variance))
    if family == "bimodal":
        return TrueEffectDist("bimodal", mean, variance, loc=mean, scale=sd)
    skewness = float(skewness)
    if not abs(skewness) < MAX_SKEWNESS:
        raise ParameterError(
            f"skewness {skewness} outside the attainable skew-normal range (+/-{MAX_SKEWNESS:.5f})"
        )
    delta = skew_normal_delta(skewness)
    omega = sd / math.sqrt(1.0 - (_B * delta) ** 2)
    xi = mean - omega * delta * _B
    alpha = delta / math.sqrt(1.0 - delta * delta)
    return TrueEffectDist("skew_normal", mean, variance, skewness, loc=xi, scale=omega, shape=alpha)


def parse_family(name):
    """Split a short name such as ``"skew0.75"`` into ``(family, skewness)``."""
    key = name.strip().lower()
    if key.startswith("skew"):
        rest = key[4:].lstrip("_-")
        if rest.startswith("normal"):
            rest = rest[6:].lstrip("_-:")
        try:
            return "skew_normal", float(rest)
        except ValueError:
            raise ParameterError(f"cannot read skewness from {name!r}") from None
    if key in FAMILIES:
        return key, None
    raise ParameterError(f"unknown distribution name {name!r}")


def dist_from_name(name, mean, variance):
    family, skew = parse_family(name)
    return make_true_effect_dist(family, mean, variance, skew)


def dist_cdf(d, x):
    return d.cdf(x)


def dist_quantile(d, p):
    return d.quantile(p)


def dist_sample(d, rng, size=None):
    return d.sample(rng, size)
