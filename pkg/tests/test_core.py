import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from metapi.core import (
    MetaDataset,
    StudySummary,
    cochran_q,
    fit_arrays,
    fit_dl,
    fit_reml,
    re_fit,
    restricted_loglik,
    tau2_reml,
)
from metapi.errors import ConvergenceError, DatasetError

TOY = MetaDataset([0.0, 2.0, 4.0], [1.0, 1.0, 1.0])
FLAT = MetaDataset([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])


def _random(rng, K):
    v = rng.uniform(0.05, 2.0, K)
    return MetaDataset(rng.normal(0.3, np.sqrt(v + 0.5)), v)


def test_toy_heterogeneity():
    h = cochran_q(TOY)
    assert (h.Q, h.I2, h.tau2_udl, h.tau2_dl) == pytest.approx((8.0, 0.75, 3.0, 3.0), abs=1e-12)


def test_flat_heterogeneity():
    h = cochran_q(FLAT)
    assert (h.Q, h.I2, h.tau2_udl, h.tau2_dl) == (0.0, 0.0, -1.0, 0.0)


def test_equal_effects_give_zero_q():
    h = cochran_q(MetaDataset([2.5] * 4, [0.1, 1.0, 3.0, 0.7]))
    assert h.Q == 0.0 and h.tau2_dl == 0.0


def test_toy_fit():
    fit = re_fit(TOY, 3.0)
    assert fit.mu_hat == pytest.approx(2.0)
    assert fit.var_iv == pytest.approx(4 / 3, abs=1e-12)
    assert fit.var_hksj == pytest.approx(4 / 3, abs=1e-12)


def test_flat_fit():
    fit = re_fit(FLAT, 0.0)
    assert fit.mu_hat == 1.0 and fit.var_iv == pytest.approx(1 / 3) and fit.var_hksj == 0.0


def test_shift_equivariance():
    a, b = fit_dl(TOY), fit_dl(TOY.shifted(10.0))
    assert b.mu_hat == pytest.approx(a.mu_hat + 10)
    assert b.var_iv == pytest.approx(a.var_iv, abs=1e-12)
    assert b.var_hksj == pytest.approx(a.var_hksj, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 30), st.floats(-50, 50), st.floats(0.1, 10))
def test_translation_and_scale_invariants(seed, K, c, s):
    d = _random(np.random.default_rng(seed), K)
    h, fit = cochran_q(d), fit_dl(d)
    ht, ft = cochran_q(d.shifted(c)), fit_dl(d.shifted(c))
    assert ht.Q == pytest.approx(h.Q, rel=1e-9, abs=1e-9)
    assert ht.tau2_udl == pytest.approx(h.tau2_udl, rel=1e-8, abs=1e-9)
    assert ft.mu_hat == pytest.approx(fit.mu_hat + c, abs=1e-9)
    assert ft.var_iv == pytest.approx(fit.var_iv, rel=1e-10)
    assert ft.var_hksj == pytest.approx(fit.var_hksj, rel=1e-7, abs=1e-10)
    hs, fs = cochran_q(d.scaled(s)), fit_dl(d.scaled(s))
    assert hs.Q == pytest.approx(h.Q, rel=1e-9, abs=1e-10)
    assert hs.tau2_udl == pytest.approx(h.tau2_udl * s * s, rel=1e-8, abs=1e-10)
    assert fs.mu_hat == pytest.approx(fit.mu_hat * s, rel=1e-9, abs=1e-10)
    assert fs.var_iv == pytest.approx(fit.var_iv * s * s, rel=1e-10)
    assert fs.var_hksj == pytest.approx(fit.var_hksj * s * s, rel=1e-8, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 40))
def test_dl_truncation_and_i2_range(seed, K):
    h = cochran_q(_random(np.random.default_rng(seed), K))
    assert h.tau2_dl == max(0.0, h.tau2_udl)
    assert 0.0 <= h.I2 < 1.0


@pytest.mark.parametrize("seed", range(5))
def test_hksj_equals_scaled_iv_for_equal_variances(seed):
    rng = np.random.default_rng(seed)
    d = MetaDataset(rng.normal(0, 2, 8), [0.5] * 8)
    fit = fit_dl(d)
    if fit.tau2 == 0:
        pytest.skip("no heterogeneity in this draw")
    w = fit.weights
    q_re = float(np.sum(w * (d.effects - fit.mu_hat) ** 2))
    assert fit.var_hksj == pytest.approx(fit.var_iv * q_re / (d.K - 1), rel=1e-10)


def test_reml_toy_and_flat():
    assert tau2_reml(TOY).tau2 == pytest.approx(3.0, abs=1e-8)
    assert tau2_reml(FLAT).tau2 == 0.0
    assert fit_reml(TOY).tau2_estimator == "REML"


@pytest.mark.parametrize("seed", range(4))
def test_reml_equal_variances_closed_form(seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(0, 2, 6)
    d = MetaDataset(y, [0.3] * 6)
    closed = max(0.0, float(np.var(y, ddof=1)) - 0.3)
    assert tau2_reml(d).tau2 == pytest.approx(closed, abs=1e-8)


@pytest.mark.parametrize("seed", range(6))
def test_reml_matches_grid_search(seed):
    d = _random(np.random.default_rng(100 + seed), 10)
    grid = np.linspace(0.0, 10.0, 20001)
    ll = np.array([restricted_loglik(d, t) for t in grid])
    i = int(np.argmax(ll))
    if 0 < i < grid.size - 1:
        best = optimize.minimize_scalar(
            lambda t: -restricted_loglik(d, t), bounds=(grid[i - 1], grid[i + 1]), method="bounded",
            options={"xatol": 1e-9},
        ).x
    else:
        best = grid[i]
    assert tau2_reml(d).tau2 == pytest.approx(best, abs=1e-4)


def test_reml_nonconvergence_is_explicit():
    # nearly flat restricted likelihood: the fixed-point map has slope ~1
    d = MetaDataset(
        [1.1959642387876572, -1.485476517072541, -0.22895174140664726, -2.1905842001983626,
         0.009268845425706107, -0.0015350929100465538, 0.680917069087688],
        [0.7353179959867672, 0.48880000660557926, 0.08245705183946875, 0.8894725909952597,
         0.40587423567058806, 0.08519352537413619, 0.8812520049163084],
    )
    with pytest.raises(ConvergenceError) as info:
        tau2_reml(d)
    assert info.value.iterations == 200
    assert 0.0 < info.value.last_iterate < 0.3


def test_fit_arrays_matches_re_fit():
    d = _random(np.random.default_rng(4), 7)
    mu, var_iv, var_hksj, _ = fit_arrays(d.effects, d.variances, 0.4)
    fit = re_fit(d, 0.4)
    assert (mu, var_iv, var_hksj) == (fit.mu_hat, fit.var_iv, fit.var_hksj)


@pytest.mark.parametrize(
    "y,v",
    [([1.0], [1.0]), ([1.0, 2.0], [1.0, 0.0]), ([1.0, 2.0], [1.0, -1.0]), ([1.0, math.nan], [1.0, 1.0]),
     ([1.0, 2.0], [1.0])],
)
def test_invalid_datasets(y, v):
    with pytest.raises(DatasetError):
        MetaDataset(y, v)


def test_negative_tau2_rejected():
    with pytest.raises(DatasetError):
        re_fit(TOY, -0.1)


def test_dataset_helpers():
    d = MetaDataset.from_studies([StudySummary("x", 1.0, 4.0), StudySummary("y", 2.0, 1.0)])
    assert d.ids == ("x", "y") and d.K == 2 and len(d) == 2
    assert d.studies[0].se == 2.0
    assert d == MetaDataset([1.0, 2.0], [4.0, 1.0], ("x", "y"))
    assert not d.effects.flags.writeable
    with pytest.raises(DatasetError):
        StudySummary("z", 1.0, 0.0)
