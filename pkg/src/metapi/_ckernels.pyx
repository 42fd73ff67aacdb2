# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contracts as metapi._pykernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs
from libc.stdlib cimport malloc, free

cnp.import_array()


def ruben_series(const double[:, ::1] gam, const double[::1] half_x, const double[::1] shape0,
                 const double[::1] p_start, const double[::1] logt_start,
                 double eps, Py_ssize_t max_terms):
    cdef Py_ssize_t n = gam.shape[0]
    cdef Py_ssize_t m = gam.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(n)
    cdef cnp.ndarray[cnp.int8_t, ndim=1] status = np.zeros(n, dtype=np.int8)
    cdef double *coef = <double *> malloc((max_terms + 1) * sizeof(double))
    cdef double *d = <double *> malloc((max_terms + 1) * sizeof(double))
    cdef double *gpow = <double *> malloc((m + 1) * sizeof(double))
    cdef Py_ssize_t i, j, k, r
    cdef double hx, loghx, c0, p, logt, shape, total, mass, s, cj
    if coef == NULL or d == NULL or gpow == NULL:
        free(coef); free(d); free(gpow)
        raise MemoryError()
    try:
        for i in range(n):
            hx = half_x[i]
            if hx <= 0.0:
                continue
            s = 0.0
            for k in range(m):
                s += log1p(-gam[i, k])
                gpow[k] = gam[i, k]
            c0 = exp(0.5 * s)
            coef[0] = c0
            p = p_start[i]
            logt = logt_start[i]
            loghx = log(hx)
            shape = shape0[i]
            total = c0 * p
            mass = c0
            j = 0
            while (1.0 - mass) * p > eps * total:
                j += 1
                if j > max_terms:
                    status[i] = 1
                    break
                s = 0.0
                for k in range(m):
                    s += gpow[k]
                    gpow[k] *= gam[i, k]
                d[j] = 0.5 * s
                p -= exp(logt)
                logt += loghx - log(shape + 1.0)
                shape += 1.0
                if p < 0.0:
                    p = 0.0
                cj = 0.0
                for r in range(j):
                    cj += d[j - r] * coef[r]
                cj /= j
                coef[j] = cj
                total += cj * p
                mass += cj
            if total < 0.0:
                total = 0.0
            elif total > 1.0:
                total = 1.0
            out[i] = total
    finally:
        free(coef)
        free(d)
        free(gpow)
    return out, status


def reml_fixed_point(y, v, double start, double tol, Py_ssize_t max_iter):
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t K = yv.shape[0]
    cdef Py_ssize_t it, k
    cdef double tau2 = start if start > 0.0 else 0.0
    cdef double damp = 1.0, prev_step = 0.0
    cdef double w, sw, swy, sw2, num, mu, target, step, new, e
    for it in range(1, max_iter + 1):
        sw = 0.0
        swy = 0.0
        for k in range(K):
            w = 1.0 / (vv[k] + tau2)
            sw += w
            swy += w * yv[k]
        mu = swy / sw
        sw2 = 0.0
        num = 0.0
        for k in range(K):
            w = 1.0 / (vv[k] + tau2)
            e = yv[k] - mu
            sw2 += w * w
            num += w * w * (e * e - vv[k])
        target = num / sw2 + 1.0 / sw
        if target < 0.0:
            target = 0.0
        step = target - tau2
        if prev_step * step < 0.0:
            damp = 0.5
        new = tau2 + damp * step
        if new < 0.0:
            new = 0.0
        if fabs(new - tau2) < tol:
            return new, it, True
        prev_step = step
        tau2 = new
    return tau2, max_iter, False
