"""Per-layer weight indicators: spectral tail exponent, value entropy, L2 norm and top-k energy."""
import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .checkpoint import read_checkpoint
from .core_math import sym_eigenvalues

MIN_TAIL = 10
DEFAULT_BINS = 256
DEFAULT_K_RULE = "frac:0.05"
RIDGE_HEADER = ("layer_index", "layer_name", "alpha", "xmin", "entropy", "l2norm", "pca_k", "pca_ratio")
# eigenvalues below this fraction of the largest one are rounding noise, not spectrum
POSITIVE_RTOL = 1e-12


class InsufficientSpectrum(ValueError):
    pass


class ZeroMatrixWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ESD:
    name: str
    eigenvalues: np.ndarray  # descending, clamped at 0
    shape: tuple

    def positive(self):
        lam = self.eigenvalues
        if lam.size == 0 or lam[0] <= 0.0:
            return lam[:0]
        return lam[lam > POSITIVE_RTOL * lam[0]]


def as_matrix(tensor):
    """Flatten to (out, rest); returns None for vectors and scalars."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim < 2:
        return None
    return arr.reshape(arr.shape[0], -1)


def esd(weight, name=""):
    w = as_matrix(weight)
    if w is None:
        raise ValueError(f"{name or 'tensor'} is not a matrix")
    if w.size == 0:
        raise ValueError(f"{name or 'tensor'} has a zero-length axis")
    gram = w @ w.T if w.shape[0] < w.shape[1] else w.T @ w
    lam = np.asarray(sym_eigenvalues(gram), dtype=np.float64)
    return ESD(name, np.maximum(lam, 0.0), tuple(w.shape))


def hill_alpha(tail, xmin):
    """Continuous power-law MLE ``1 + n / sum(ln(x / xmin))`` for a given tail."""
    tail = np.asarray(tail, dtype=np.float64)
    s = math.fsum(np.log(tail / xmin))
    if s <= 0.0:
        raise InsufficientSpectrum("tail has no spread above xmin")
    return 1.0 + tail.size / s


def pl_alpha(spectrum, min_tail=MIN_TAIL):
    """Power-law exponent of the spectrum tail; xmin minimises the KS distance.

    Accepts an ``ESD`` or a plain array of eigenvalues. Returns ``(alpha, xmin)``.
    """
    if isinstance(spectrum, ESD):
        lam = spectrum.positive()
    else:
        lam = np.asarray(spectrum, dtype=np.float64)
        lam = lam[lam > 0.0]
    if lam.size < min_tail:
        raise InsufficientSpectrum(f"insufficient spectrum: {lam.size} positive eigenvalues, need {min_tail}")
    lam = np.sort(lam)
    alphas, ks = kernels.ks_scan(lam, min_tail)
    if np.all(np.isnan(ks)):
        raise InsufficientSpectrum("insufficient spectrum: no candidate xmin with spread")
    best = int(np.nanargmin(ks))
    return float(alphas[best]), float(lam[best])


def entropy(tensor, bins=DEFAULT_BINS):
    arr = np.asarray(tensor, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("entropy of an empty tensor")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    counts, _ = np.histogram(arr, bins=bins)
    p = counts[counts > 0] / arr.size
    return float(max(0.0, -math.fsum(p * np.log(p))))


def l2_norm(tensor):
    # hypot rescales internally, so tiny or huge entries neither underflow nor overflow
    return math.hypot(*np.asarray(tensor, dtype=np.float64).ravel().tolist())


def pca_topk_ratio(weight, k, spectrum=None):
    """Share of the squared singular-value energy held by the k largest components."""
    lam = (spectrum if spectrum is not None else esd(weight)).eigenvalues
    if not 1 <= k <= lam.size:
        raise ValueError(f"k={k} outside 1..{lam.size}")
    total = math.fsum(lam)
    if total <= 0.0:
        warnings.warn("zero matrix: top-k energy ratio set to 0", ZeroMatrixWarning, stacklevel=2)
        return 0.0
    return min(1.0, math.fsum(lam[:k]) / total)


def parse_k_rule(rule):
    """``frac:F`` -> max(1, round(F * n)); ``fixed:K`` -> min(K, n)."""
    try:
        kind, raw = rule.split(":", 1)
        if kind == "frac":
            frac = float(raw)
            if not 0.0 < frac <= 1.0:
                raise ValueError
            return lambda n: max(1, min(n, round(frac * n)))
        if kind == "fixed":
            k = int(raw)
            if k < 1:
                raise ValueError
            return lambda n: min(k, n)
    except ValueError:
        pass
    raise ValueError(f"bad k rule {rule!r}; expected frac:F with 0<F<=1 or fixed:K with K>=1")


@dataclass(frozen=True)
class DiagnosticsRecord:
    layer_index: int
    layer_name: str
    alpha: float  # None when the spectrum is too short
    xmin: float
    entropy: float
    l2norm: float
    pca_k: int
    pca_ratio: float


def diagnose_tensor(index, name, tensor, bins=DEFAULT_BINS, k_rule=DEFAULT_K_RULE):
    pick_k = parse_k_rule(k_rule) if isinstance(k_rule, str) else k_rule
    spec = esd(tensor, name)
    try:
        alpha, xmin = pl_alpha(spec)
    except InsufficientSpectrum:
        alpha = xmin = None
    k = pick_k(spec.eigenvalues.size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroMatrixWarning)
        ratio = pca_topk_ratio(None, k, spectrum=spec)
    return DiagnosticsRecord(index, name, alpha, xmin, entropy(tensor, bins), l2_norm(tensor), k, ratio)


def layer_sweep(source, bins=DEFAULT_BINS, k_rule=DEFAULT_K_RULE):
    """One record per weight matrix, in checkpoint order.

    ``source`` is an OWB1 path or a mapping of name -> tensor.
    """
    tensors = read_checkpoint(source)[0] if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__") else source
    records = []
    for name, tensor in tensors.items():
        if np.ndim(tensor) < 2:
            continue
        records.append(diagnose_tensor(len(records), name, tensor, bins, k_rule))
    return records


def _fmt(x):
    return "" if x is None else repr(float(x))


def ridge_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RIDGE_HEADER)
    for r in records:
        w.writerow([r.layer_index, r.layer_name, _fmt(r.alpha), _fmt(r.xmin), _fmt(r.entropy),
                    _fmt(r.l2norm), r.pca_k, _fmt(r.pca_ratio)])
    return buf.getvalue()
