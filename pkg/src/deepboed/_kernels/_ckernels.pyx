# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled simulator kernels. Same contracts as ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, hypot, sqrt

cnp.import_array()


cdef void _thomas_one(double complex[:] diag, double complex[:] off, int k,
                      double complex[:] cp, double complex[:] dp,
                      double complex[:] x) noexcept nogil:
    cdef int n = diag.shape[0]
    cdef int i
    cdef double complex denom, r
    denom = diag[0]
    if n > 1:
        cp[0] = off[0] / denom
    dp[0] = (1.0 if k == 0 else 0.0) / denom
    for i in range(1, n):
        denom = diag[i] - off[i - 1] * cp[i - 1]
        if i < n - 1:
            cp[i] = off[i] / denom
        r = 1.0 if i == k else 0.0
        dp[i] = (r - off[i - 1] * dp[i - 1]) / denom
    x[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]


def tridiag_columns(omega, coupling, kappa, w):
    cdef double[:, :] om = np.array(omega, dtype=np.float64)
    cdef Py_ssize_t B = om.shape[0]
    cdef Py_ssize_t N = om.shape[1]
    cdef double[:] ww = np.array(
        np.broadcast_to(np.asarray(w, dtype=np.float64), (B,)), dtype=np.float64)
    cdef double[:] kap = np.array(kappa, dtype=np.float64)
    cdef double[:] cpl = np.array(coupling, dtype=np.float64).reshape(-1)
    first_arr = np.empty((B, N), dtype=np.complex128)
    last_arr = np.empty((B, N), dtype=np.complex128)
    cdef double complex[:, :] first = first_arr
    cdef double complex[:, :] last = last_arr
    cdef double complex[:] diag = np.empty(N, dtype=np.complex128)
    cdef double complex[:] off = np.empty(max(N - 1, 1), dtype=np.complex128)
    cdef double complex[:] cp = np.empty(N, dtype=np.complex128)
    cdef double complex[:] dp = np.empty(N, dtype=np.complex128)
    cdef Py_ssize_t b, j
    for j in range(N - 1):
        off[j] = 1j * cpl[j]
    with nogil:
        for b in range(B):
            for j in range(N):
                diag[j] = -1j * (ww[b] - om[b, j]) + 0.5 * kap[j]
            _thomas_one(diag, off, 0, cp, dp, first[b])
            _thomas_one(diag, off, <int>(N - 1), cp, dp, last[b])
    return first_arr, last_arr


cdef void _tred2(double[:, :] V, double[:] d, double[:] e) noexcept nogil:
    # Householder reduction of symmetric V to tridiagonal form (d, e),
    # accumulating the orthogonal transform in V
    cdef int n = V.shape[0]
    cdef int i, j, k
    cdef double scale, h, f, g, hh
    for j in range(n):
        d[j] = V[n - 1, j]
    for i in range(n - 1, 0, -1):
        scale = 0.0
        h = 0.0
        for k in range(i):
            scale += fabs(d[k])
        if scale == 0.0:
            e[i] = d[i - 1]
            for j in range(i):
                d[j] = V[i - 1, j]
                V[i, j] = 0.0
                V[j, i] = 0.0
        else:
            for k in range(i):
                d[k] /= scale
                h += d[k] * d[k]
            f = d[i - 1]
            g = sqrt(h)
            if f > 0:
                g = -g
            e[i] = scale * g
            h = h - f * g
            d[i - 1] = f - g
            for j in range(i):
                e[j] = 0.0
            for j in range(i):
                f = d[j]
                V[j, i] = f
                g = e[j] + V[j, j] * f
                for k in range(j + 1, i):
                    g += V[k, j] * d[k]
                    e[k] += V[k, j] * f
                e[j] = g
            f = 0.0
            for j in range(i):
                e[j] /= h
                f += e[j] * d[j]
            hh = f / (h + h)
            for j in range(i):
                e[j] -= hh * d[j]
            for j in range(i):
                f = d[j]
                g = e[j]
                for k in range(j, i):
                    V[k, j] -= (f * e[k] + g * d[k])
                d[j] = V[i - 1, j]
                V[i, j] = 0.0
        d[i] = h
    for i in range(n - 1):
        V[n - 1, i] = V[i, i]
        V[i, i] = 1.0
        h = d[i + 1]
        if h != 0.0:
            for k in range(i + 1):
                d[k] = V[k, i + 1] / h
            for j in range(i + 1):
                g = 0.0
                for k in range(i + 1):
                    g += V[k, i + 1] * V[k, j]
                for k in range(i + 1):
                    V[k, j] -= g * d[k]
        for k in range(i + 1):
            V[k, i + 1] = 0.0
    for j in range(n):
        d[j] = V[n - 1, j]
        V[n - 1, j] = 0.0
    V[n - 1, n - 1] = 1.0
    e[0] = 0.0


cdef inline double _hypot(double a, double b) noexcept nogil:
    return hypot(a, b)


cdef void _tql2(double[:, :] V, double[:] d, double[:] e) noexcept nogil:
    # implicit QL on the tridiagonal (d, e); eigenvectors accumulated in V
    cdef int n = V.shape[0]
    cdef int i, k, l, m, it
    cdef double f, tst1, eps, g, p, r, dl1, h, c, c2, c3, el1, s, s2
    eps = 2.220446049250313e-16
    for i in range(1, n):
        e[i - 1] = e[i]
    e[n - 1] = 0.0
    f = 0.0
    # deflation is judged against the whole matrix, so a tiny coupling next
    # to a zero diagonal entry is not mistaken for a significant one
    tst1 = 0.0
    for l in range(n):
        if fabs(d[l]) + fabs(e[l]) > tst1:
            tst1 = fabs(d[l]) + fabs(e[l])
    for l in range(n):
        m = l
        while m < n - 1:
            if fabs(e[m]) <= eps * tst1:
                break
            m += 1
        if m > l:
            it = 0
            while True:
                it += 1
                g = d[l]
                p = (d[l + 1] - g) / (2.0 * e[l])
                r = _hypot(p, 1.0)
                if p < 0:
                    r = -r
                d[l] = e[l] / (p + r)
                d[l + 1] = e[l] * (p + r)
                dl1 = d[l + 1]
                h = g - d[l]
                for i in range(l + 2, n):
                    d[i] -= h
                f += h
                p = d[m]
                c = 1.0
                c2 = c
                c3 = c
                el1 = e[l + 1]
                s = 0.0
                s2 = 0.0
                for i in range(m - 1, l - 1, -1):
                    c3 = c2
                    c2 = c
                    s2 = s
                    g = c * e[i]
                    h = c * p
                    r = _hypot(p, e[i])
                    e[i + 1] = s * r
                    s = e[i] / r
                    c = p / r
                    p = c * d[i] - s * g
                    d[i + 1] = h + s * (c * g + s * d[i])
                    for k in range(n):
                        h = V[k, i + 1]
                        V[k, i + 1] = s * V[k, i] + c * h
                        V[k, i] = c * V[k, i] - s * h
                p = -s * s2 * c3 * el1 * e[l] / dl1
                e[l] = s * p
                d[l] = c * p
                if fabs(e[l]) <= eps * tst1 or it > 60:
                    break
        d[l] = d[l] + f
        e[l] = 0.0


def sym_eigh(h):
    """Ascending eigenpairs of a batch of real symmetric matrices (B, d, d)."""
    hh = np.array(h, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, :] vec = hh
    cdef Py_ssize_t B = vec.shape[0]
    cdef Py_ssize_t d = vec.shape[1]
    val_arr = np.empty((B, d), dtype=np.float64)
    cdef double[:, :] val = val_arr
    cdef double[:] e = np.empty(d, dtype=np.float64)
    cdef Py_ssize_t b
    with nogil:
        for b in range(B):
            _tred2(vec[b], val[b], e)
            _tql2(vec[b], val[b], e)
    vec_arr = hh
    order = np.argsort(val_arr, axis=1, kind="stable")
    val_arr = np.take_along_axis(val_arr, order, axis=1)
    vec_arr = np.take_along_axis(vec_arr, order[:, None, :], axis=2)
    return val_arr, vec_arr
