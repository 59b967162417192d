"""Pure-Python/numpy twins of the compiled kernels in ``_kernels.pyx``."""
import math

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


def fill_uint64(state, n):
    s0, s1, s2, s3 = (int(v) for v in state)
    out = [0] * n
    for i in range(n):
        out[i] = (_rotl((s0 + s3) & _MASK, 23) + s0) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
    return np.array(out, dtype=np.uint64)


def jacobi_eigenvalues(a, tol, max_sweeps):
    m = np.array(a, dtype=np.float64, copy=True)
    n = m.shape[0]
    iu = np.triu_indices(n, 1)
    sweep = 0
    while sweep < max_sweeps:
        off = np.sqrt(2.0 * np.sum(m[iu] ** 2))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                akp = m[:, p].copy()
                akq = m[:, q].copy()
                m[:, p] = c * akp - s * akq
                m[:, q] = s * akp + c * akq
                akp = m[p, :].copy()
                akq = m[q, :].copy()
                m[p, :] = c * akp - s * akq
                m[q, :] = s * akp + c * akq
        sweep += 1
    return np.diagonal(m).copy(), sweep


def ks_scan(lam, min_tail):
    lam = np.asarray(lam, dtype=np.float64)
    n = lam.size
    ncand = n - min_tail + 1 if n >= min_tail else 0
    alpha = np.full(ncand, np.nan)
    ks = np.full(ncand, np.nan)
    logs = np.log(lam)
    suffix = np.concatenate([np.cumsum(logs[::-1])[::-1], [0.0]])
    for i in range(ncand):
        m = n - i
        lsum = suffix[i] - m * logs[i]
        if lsum <= 0.0:
            continue
        a = 1.0 + m / lsum
        # libm pow per element: numpy's vectorised power may round differently
        f = 1.0 - np.array([math.pow(r, 1.0 - a) for r in (lam[i:] / lam[i]).tolist()])
        ranks = np.arange(m, dtype=np.float64)
        d = max(np.abs(f - ranks / m).max(), np.abs(f - (ranks + 1) / m).max())
        alpha[i] = a
        ks[i] = d
    return alpha, ks
