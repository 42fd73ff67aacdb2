"""Pure-Python/numpy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable and
the reference the compiled versions are benchmarked and tested against.
Signatures and return conventions match ``metapi._ckernels`` exactly.
"""

import math

import numpy as np


def ruben_series(gam, half_x, shape0, p_start, logt_start, eps, max_terms):
    """Ruben mixture-of-chi-square series, one row per quadratic form.

    Parameters
    ----------
    gam : ndarray, shape (n, m)
        ``1 - beta / lambda_k`` per weight; 0 for padded entries.
    half_x : ndarray, shape (n,)
        ``q / (2 beta)``.
    shape0 : ndarray, shape (n,)
        Half the number of positive weights (gamma shape of the first term).
    p_start, logt_start : ndarray, shape (n,)
        Regularized lower gamma ``P(shape0, half_x)`` and the log of
        ``half_x**shape0 * exp(-half_x) / Gamma(shape0 + 1)``.
    eps : float
        Relative tolerance: stop once the truncation bound is below
        ``eps`` times the partial sum.
    max_terms : int

    Returns
    -------
    cdf : ndarray, shape (n,)
    status : ndarray of int8, shape (n,)
        0 converged, 1 term budget exhausted.
    """
    gam = np.ascontiguousarray(gam, dtype=np.float64)
    n, m = gam.shape
    cdf = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    for i in range(n):
        g = gam[i]
        hx = half_x[i]
        if hx <= 0.0:
            continue
        c0 = math.exp(0.5 * float(np.sum(np.log1p(-g))))
        coef = [c0]
        d = [0.0]
        gpow = g.copy()
        p = p_start[i]
        logt = logt_start[i]
        loghx = math.log(hx)
        shape = shape0[i]
        total = c0 * p
        mass = c0
        done = (1.0 - mass) * p <= eps * total
        j = 0
        while not done:
            j += 1
            if j > max_terms:
                status[i] = 1
                break
            d.append(0.5 * float(gpow.sum()))
            gpow *= g
            p -= math.exp(logt)
            logt += loghx - math.log(shape + 1.0)
            shape += 1.0
            if p < 0.0:
                p = 0.0
            cj = sum(d[j - r] * coef[r] for r in range(j)) / j
            coef.append(cj)
            total += cj * p
            mass += cj
            done = (1.0 - mass) * p <= eps * total
        cdf[i] = min(max(total, 0.0), 1.0)
    return cdf, status


def reml_fixed_point(y, v, start, tol, max_iter):
    """Iterate the REML estimating equation for the between-study variance.

    Returns ``(tau2, iterations, converged)``. Negative iterates are truncated
    at zero; once the step changes sign the update is damped by one half.
    """
    y = np.asarray(y, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tau2 = max(float(start), 0.0)
    damp = 1.0
    prev_step = 0.0
    for it in range(1, max_iter + 1):
        w = 1.0 / (v + tau2)
        sw = w.sum()
        mu = float(np.dot(w, y)) / sw
        w2 = w * w
        target = float(np.dot(w2, (y - mu) ** 2 - v)) / w2.sum() + 1.0 / sw
        if target < 0.0:
            target = 0.0
        step = target - tau2
        if prev_step * step < 0.0:
            damp = 0.5
        new = tau2 + damp * step
        if new < 0.0:
            new = 0.0
        if abs(new - tau2) < tol:
            return new, it, True
        prev_step = step
        tau2 = new
    return tau2, max_iter, False
