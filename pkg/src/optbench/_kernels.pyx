# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: xoshiro256++ streams, cyclic Jacobi sweeps, KS xmin scan.

Each function mirrors one in ``_kernels_py`` operation for operation, so the
two backends agree bit for bit on the RNG and to rounding on the rest.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, log, pow
from libc.stdint cimport uint64_t

cnp.import_array()


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def fill_uint64(cnp.uint64_t[::1] state, Py_ssize_t n):
    """Advance ``state`` in place by ``n`` steps and return the outputs."""
    out = np.empty(n, dtype=np.uint64)
    cdef cnp.uint64_t[::1] o = out
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3]
    cdef uint64_t t
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = _rotl(s0 + s3, 23) + s0
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return out


def jacobi_eigenvalues(double[:, ::1] a, double tol, int max_sweeps):
    """Cyclic Jacobi on a copy of ``a``; returns (diagonal, sweeps used)."""
    cdef Py_ssize_t n = a.shape[0]
    work = np.array(a, dtype=np.float64, copy=True)
    cdef double[:, ::1] m = work
    cdef Py_ssize_t p, q, k
    cdef double off, apq, app, aqq, theta, t, c, s, akp, akq
    cdef int sweep = 0
    with nogil:
        while sweep < max_sweeps:
            off = 0.0
            for p in range(n):
                for q in range(p + 1, n):
                    off += m[p, q] * m[p, q]
            off = sqrt(2.0 * off)
            if off <= tol:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = m[p, q]
                    if apq == 0.0:
                        continue
                    app = m[p, p]
                    aqq = m[q, q]
                    theta = (aqq - app) / (2.0 * apq)
                    if theta >= 0.0:
                        t = 1.0 / (theta + sqrt(1.0 + theta * theta))
                    else:
                        t = -1.0 / (-theta + sqrt(1.0 + theta * theta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = t * c
                    for k in range(n):
                        akp = m[k, p]
                        akq = m[k, q]
                        m[k, p] = c * akp - s * akq
                        m[k, q] = s * akp + c * akq
                    for k in range(n):
                        akp = m[p, k]
                        akq = m[q, k]
                        m[p, k] = c * akp - s * akq
                        m[q, k] = s * akp + c * akq
            sweep += 1
    return np.diagonal(work).copy(), sweep


def ks_scan(double[::1] lam, Py_ssize_t min_tail):
    """Hill alpha and KS distance for every admissible xmin of ascending ``lam``.

    Returns arrays (alpha, ks); candidates whose log-sum vanishes get NaN.
    """
    cdef Py_ssize_t n = lam.shape[0]
    cdef Py_ssize_t ncand = n - min_tail + 1 if n >= min_tail else 0
    alpha_out = np.full(ncand, np.nan)
    ks_out = np.full(ncand, np.nan)
    cdef double[::1] ao = alpha_out
    cdef double[::1] ko = ks_out
    logs_np = np.log(np.asarray(lam))
    cdef double[::1] logs = logs_np
    suffix_np = np.zeros(n + 1)
    cdef double[::1] suffix = suffix_np
    cdef Py_ssize_t i, j, m
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1] + logs[i]
    cdef double xmin, lsum, alpha, d, f, lo, hi, e
    with nogil:
        for i in range(ncand):
            xmin = lam[i]
            m = n - i
            lsum = suffix[i] - m * logs[i]
            if lsum <= 0.0:
                continue
            alpha = 1.0 + m / lsum
            d = 0.0
            for j in range(i, n):
                f = 1.0 - pow(lam[j] / xmin, 1.0 - alpha)
                lo = fabs(f - (j - i) / <double>m)
                hi = fabs(f - (j - i + 1) / <double>m)
                e = lo if lo > hi else hi
                if e > d:
                    d = e
            ao[i] = alpha
            ko[i] = d
    return alpha_out, ks_out
