"""Deterministic numeric substrate: seeded streams, quantiles, symmetric eigenvalues.

Tensors are plain ``numpy.float64`` arrays throughout the package.
"""
import hashlib
import math

import numpy as np

from . import kernels

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64_next(state):
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def splitmix64(x):
    """First splitmix64 output for seed ``x``; used as a 64-bit mixing hash."""
    return splitmix64_next(x & MASK64)[1]


def label_hash(label):
    """Stable u64 for strings, ints or floats (platform-independent)."""
    if isinstance(label, bool):
        label = int(label)
    if isinstance(label, int):
        return label & MASK64
    if isinstance(label, float):
        label = repr(label)
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def hash_chain(*parts):
    """Fold ``parts`` into one u64 via ``h = splitmix64(h ^ part)``."""
    h = 0
    for part in parts:
        h = splitmix64(h ^ label_hash(part))
    return h


class RandomStream:
    """xoshiro256++ generator seeded by four splitmix64 outputs.

    Uniforms are ``(x >> 11) * 2**-53``; normals come from Box-Muller on
    uniform pairs, both members of each pair used in order.
    """

    def __init__(self, seed):
        self.seed = int(seed) & MASK64
        s = self.seed
        words = []
        for _ in range(4):
            s, out = splitmix64_next(s)
            words.append(out)
        self.state = np.array(words, dtype=np.uint64)

    def fork(self, label):
        return RandomStream(splitmix64(self.seed ^ label_hash(label)))

    def next_uint64(self, n=1):
        return kernels.fill_uint64(self.state, int(n))

    def uniform(self, n=None):
        k = 1 if n is None else int(n)
        u = (self.next_uint64(k) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if n is None else u

    def normal(self, size=None, loc=0.0, scale=1.0):
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        ang = 2.0 * math.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(ang)
        z[1::2] = r * np.sin(ang)
        out = loc + scale * z[:count]
        return float(out[0]) if size is None else out.reshape(shape)

    def permutation(self, n):
        # argsort of distinct uniforms; a stable sort keeps ties deterministic
        return np.argsort(self.uniform(n), kind="stable")

    def choice_from_probs(self, probs):
        """One categorical draw per row of ``probs`` (rows sum to 1)."""
        probs = np.atleast_2d(probs)
        u = self.uniform(probs.shape[0])
        cdf = np.cumsum(probs, axis=1)
        idx = (cdf < u[:, None]).sum(axis=1)
        return np.minimum(idx, probs.shape[1] - 1)


def seeded_stream(seed):
    return RandomStream(seed)


def quantile(values, q):
    """Type-7 sample quantile: linear interpolation at position ``q*(n-1)``."""
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level {q} outside [0, 1]")
    h = q * (len(xs) - 1)
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


class EigenError(ValueError):
    pass


def sym_eigenvalues(matrix, tol=1e-12, max_sweeps=64):
    """All eigenvalues of a real symmetric matrix, descending (cyclic Jacobi)."""
    a = np.ascontiguousarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise EigenError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n == 0:
        return []
    if n > 2048:
        raise EigenError(f"matrix side {n} exceeds 2048")
    fro = float(np.sqrt(np.sum(a * a)))
    if fro > 0 and float(np.max(np.abs(a - a.T))) > 1e-12 * fro:
        raise EigenError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    diag, _ = kernels.jacobi_eigenvalues(a, tol * fro, max_sweeps)
    return sorted(diag.tolist(), reverse=True)
