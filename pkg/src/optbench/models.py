"""Desk-scale backbone families with closed-form forward and backward passes.

Families and the macro-design axis each stands in for:

- ``linear``: single affine classifier.
- ``plain_mlp``: plainly stacked affine->ReLU blocks, no skip paths.
- ``res_mlp``: pre-norm residual blocks ``x + W2 relu(W1 LN(x))``.
- ``patch_mixer``: isotropic mixer over 2x2 patches of an 8x8 input, with a
  token-mixing and a channel-mixing residual per block.
- ``quad_bowl``: analytic ``0.5 * theta^T A theta`` with geometric spectrum.

Weights are stored ``(out, in)``; a batch is ``(x, y)`` with ``x`` of shape
``(B, in)`` and integer labels ``y``.
"""
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .core_math import RandomStream
from .datasets import IMAGE_SIDE, ConfigError

FAMILIES = ("linear", "plain_mlp", "res_mlp", "patch_mixer", "quad_bowl")
TAXONOMY = {
    "linear": "primary",
    "plain_mlp": "primary",
    "res_mlp": "classical",
    "patch_mixer": "modern-isotropic",
    "quad_bowl": "primary",
}
LN_EPS = 1e-5
PATCH = 2
TOKENS = (IMAGE_SIDE // PATCH) ** 2


class DivergedError(FloatingPointError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str
    depth: int = 1
    width: int = 32
    taxonomy_tag: str = None
    init_seed: int = 0
    name: str = None
    dims: int = 10  # quad_bowl only
    cond: float = 100.0  # quad_bowl only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.depth < 1 or self.width < 1:
            raise ConfigError("depth and width must be >= 1")
        expected = TAXONOMY[self.family]
        if self.taxonomy_tag is None:
            object.__setattr__(self, "taxonomy_tag", expected)
        elif self.taxonomy_tag != expected:
            raise ConfigError(
                f"taxonomy tag {self.taxonomy_tag!r} inconsistent with family {self.family!r}"
            )
        if self.name is None:
            object.__setattr__(self, "name", default_model_name(self))

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_dict(self):
        return asdict(self)


def default_model_name(spec):
    if spec.family == "linear":
        return "linear"
    if spec.family == "quad_bowl":
        return f"quad_bowl-d{spec.dims}-c{spec.cond:g}"
    return f"{spec.family}-d{spec.depth}-w{spec.width}"


# -- layer primitives -------------------------------------------------------

def _affine(x, w, b):
    if x.dtype != np.float64:
        # numpy has no BLAS for extended precision; dot beats matmul there by ~3x
        return np.dot(x.reshape(-1, x.shape[-1]), w.T).reshape(x.shape[:-1] + (w.shape[0],)) + b
    return x @ w.T + b


def _token_mix(w, u):
    if u.dtype != np.float64:
        return np.tensordot(w, u, axes=([1], [1])).transpose(1, 0, 2)
    return w @ u


def _affine_back(dy, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w, dy2.T @ x2, dy2.sum(axis=0)


def _layernorm(x, gain, bias):
    c = x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) / c
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) / c + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layernorm_back(dy, cache, gain):
    xhat, inv = cache
    flat = dy.reshape(-1, dy.shape[-1])
    dgain = (flat * xhat.reshape(flat.shape)).sum(axis=0)
    dbias = flat.sum(axis=0)
    c = dy.shape[-1]
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.sum(axis=-1, keepdims=True) / c
        - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) / c)
    )
    return dx, dgain, dbias


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, y):
    """Mean softmax cross-entropy with max-subtraction; returns (loss, dlogits)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(lse - shifted[np.arange(n), y]))
    d = np.exp(shifted - lse[:, None])
    d[np.arange(n), y] -= 1.0
    return loss, d / n


def patchify(x):
    b = x.shape[0]
    g = IMAGE_SIDE // PATCH
    img = x.reshape(b, g, PATCH, g, PATCH)
    return img.transpose(0, 1, 3, 2, 4).reshape(b, TOKENS, PATCH * PATCH)


# -- models -----------------------------------------------------------------

class Model:
    """Parameters plus the activation cache of the last ``forward_loss``."""

    def __init__(self, spec, in_dim, classes):
        self.spec = spec
        self.in_dim = in_dim
        self.classes = classes
        self.params = OrderedDict()
        self._cache = None
        self._rng = RandomStream(spec.init_seed)

    # parameter construction helpers
    def _weight(self, name, out, fan_in, gain=1.0):
        std = math.sqrt(gain / fan_in)
        self.params[name] = self._rng.normal((out, fan_in), scale=std)

    def _zeros(self, name, n):
        self.params[name] = np.zeros(n)

    def _ones(self, name, n):
        self.params[name] = np.ones(n)

    @property
    def layers(self):
        """Parameters grouped by layer prefix, in order: [(layer, [names])]."""
        groups = OrderedDict()
        for name in self.params:
            groups.setdefault(name.rsplit(".", 1)[0], []).append(name)
        return list(groups.items())

    def pack(self):
        """Re-home every parameter as a view into one contiguous ``self.flat``."""
        self.flat = np.concatenate([p.ravel() for p in self.params.values()])
        offset = 0
        for name, p in list(self.params.items()):
            self.params[name] = self.flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        return self.flat

    def num_params(self):
        return int(sum(p.size for p in self.params.values()))

    def check_finite(self):
        for p in self.params.values():
            if not np.isfinite(p).all():
                raise DivergedError("diverged state")

    def forward_loss(self, batch):
        self.check_finite()
        x, y = batch
        logits, cache = self._forward(x)
        loss, dlogits = cross_entropy(logits, y)
        self._cache = (x, y, cache, dlogits)
        return loss, logits

    def backward(self, batch):
        if self._cache is None:
            raise StaleCacheError("backward called without a matching forward_loss")
        x, y, cache, dlogits = self._cache
        if batch[0] is not x or batch[1] is not y:
            raise StaleCacheError("activation cache belongs to a different batch")
        self._cache = None
        grads = self._backward(dlogits, cache)
        return OrderedDict((k, grads[k]) for k in self.params)

    def logits(self, x):
        return self._forward(x)[0]

    def _kinks(self, cache):
        """ReLU pre-activations held in a forward cache."""
        return []

    def _wide_eval(self, batch):
        # dtype-following loss plus ReLU sign pattern (gradcheck in extended precision)
        x, y = batch
        z, cache = self._forward(x)
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        loss = (lse - z[np.arange(z.shape[0]), y]).mean()
        return loss, [a > 0 for a in self._kinks(cache)]

    def accuracy(self, x, y):
        return float(np.mean(np.argmax(self.logits(x), axis=1) == y))


class LinearModel(Model):
    def __init__(self, spec, in_dim, classes):
        super().__init__(spec, in_dim, classes)
        self._weight("head.weight", classes, in_dim)
        self._zeros("head.bias", classes)

    def _forward(self, x):
        return _affine(x, self.params["head.weight"], self.params["head.bias"]), x

    def _backward(self, dlogits, x):
        _, dw, db = _affine_back(dlogits, x, self.params["head.weight"])
        return {"head.weight": dw, "head.bias": db}


class PlainMLP(Model):
    def __init__(self, spec, in_dim, classes):
        super().__init__(spec, in_dim, classes)
        fan = in_dim
        for i in range(spec.depth):
            self._weight(f"blocks.{i}.fc.weight", spec.width, fan, gain=2.0)
            self._zeros(f"blocks.{i}.fc.bias", spec.width)
            fan = spec.width
        self._weight("head.weight", classes, fan)
        self._zeros("head.bias", classes)

    def _forward(self, x):
        p = self.params
        acts = []
        h = x
        for i in range(self.spec.depth):
            a = _affine(h, p[f"blocks.{i}.fc.weight"], p[f"blocks.{i}.fc.bias"])
            acts.append((h, a))
            h = np.maximum(a, 0.0)
        return _affine(h, p["head.weight"], p["head.bias"]), (acts, h)

    def _kinks(self, cache):
        return [a for _, a in cache[0]]

    def _backward(self, dlogits, cache):
        p = self.params
        acts, h = cache
        g = {}
        dh, g["head.weight"], g["head.bias"] = _affine_back(dlogits, h, p["head.weight"])
        for i in reversed(range(self.spec.depth)):
            hin, a = acts[i]
            da = dh * (a > 0)
            w = f"blocks.{i}.fc.weight"
            dh, g[w], g[f"blocks.{i}.fc.bias"] = _affine_back(da, hin, p[w])
        return g


class ResMLP(Model):
    def __init__(self, spec, in_dim, classes):
        super().__init__(spec, in_dim, classes)
        w = spec.width
        self._weight("stem.weight", w, in_dim)
        self._zeros("stem.bias", w)
        for i in range(spec.depth):
            self._ones(f"blocks.{i}.ln.gain", w)
            self._zeros(f"blocks.{i}.ln.bias", w)
            self._weight(f"blocks.{i}.fc1.weight", w, w, gain=2.0)
            self._zeros(f"blocks.{i}.fc1.bias", w)
            self._weight(f"blocks.{i}.fc2.weight", w, w)
            self._zeros(f"blocks.{i}.fc2.bias", w)
        self._weight("head.weight", classes, w)
        self._zeros("head.bias", classes)

    @staticmethod
    def shape_param_count(depth, width, in_dim, classes):
        block = 2 * width + 2 * (width * width + width)
        return in_dim * width + width + depth * block + width * classes + classes

    def _forward(self, x):
        p = self.params
        h = _affine(x, p["stem.weight"], p["stem.bias"])
        blocks = []
        for i in range(self.spec.depth):
            pre = f"blocks.{i}."
            u, ln = _layernorm(h, p[pre + "ln.gain"], p[pre + "ln.bias"])
            a = _affine(u, p[pre + "fc1.weight"], p[pre + "fc1.bias"])
            r = np.maximum(a, 0.0)
            blocks.append((u, ln, a, r))
            h = h + _affine(r, p[pre + "fc2.weight"], p[pre + "fc2.bias"])
        return _affine(h, p["head.weight"], p["head.bias"]), (x, blocks, h)

    def _kinks(self, cache):
        return [b[2] for b in cache[1]]

    def _backward(self, dlogits, cache):
        p = self.params
        x, blocks, h = cache
        g = {}
        dh, g["head.weight"], g["head.bias"] = _affine_back(dlogits, h, p["head.weight"])
        for i in reversed(range(self.spec.depth)):
            pre = f"blocks.{i}."
            u, ln, a, r = blocks[i]
            dr, g[pre + "fc2.weight"], g[pre + "fc2.bias"] = _affine_back(dh, r, p[pre + "fc2.weight"])
            da = dr * (a > 0)
            du, g[pre + "fc1.weight"], g[pre + "fc1.bias"] = _affine_back(da, u, p[pre + "fc1.weight"])
            dx, g[pre + "ln.gain"], g[pre + "ln.bias"] = _layernorm_back(du, ln, p[pre + "ln.gain"])
            dh = dh + dx
        _, g["stem.weight"], g["stem.bias"] = _affine_back(dh, x, p["stem.weight"])
        return g


class PatchMixer(Model):
    def __init__(self, spec, in_dim, classes):
        if in_dim != IMAGE_SIDE * IMAGE_SIDE:
            raise ConfigError(
                f"patch_mixer needs {IMAGE_SIDE}x{IMAGE_SIDE} inputs, dataset has {in_dim} features"
            )
        super().__init__(spec, in_dim, classes)
        w = spec.width
        self._weight("embed.weight", w, PATCH * PATCH)
        self._zeros("embed.bias", w)
        for i in range(spec.depth):
            pre = f"blocks.{i}."
            self._ones(pre + "token_ln.gain", w)
            self._zeros(pre + "token_ln.bias", w)
            self._weight(pre + "token_mix.weight", TOKENS, TOKENS)
            self._zeros(pre + "token_mix.bias", TOKENS)
            self._ones(pre + "channel_ln.gain", w)
            self._zeros(pre + "channel_ln.bias", w)
            self._weight(pre + "fc1.weight", w, w, gain=2.0)
            self._zeros(pre + "fc1.bias", w)
            self._weight(pre + "fc2.weight", w, w)
            self._zeros(pre + "fc2.bias", w)
        self._weight("head.weight", classes, w)
        self._zeros("head.bias", classes)

    def _forward(self, x):
        p = self.params
        patches = patchify(x)
        h = _affine(patches, p["embed.weight"], p["embed.bias"])
        blocks = []
        for i in range(self.spec.depth):
            pre = f"blocks.{i}."
            u, ln1 = _layernorm(h, p[pre + "token_ln.gain"], p[pre + "token_ln.bias"])
            z = _token_mix(p[pre + "token_mix.weight"], u)
            h = h + z + p[pre + "token_mix.bias"][None, :, None]
            v, ln2 = _layernorm(h, p[pre + "channel_ln.gain"], p[pre + "channel_ln.bias"])
            a = _affine(v, p[pre + "fc1.weight"], p[pre + "fc1.bias"])
            r = np.maximum(a, 0.0)
            h = h + _affine(r, p[pre + "fc2.weight"], p[pre + "fc2.bias"])
            blocks.append((u, ln1, v, ln2, a, r))
        pooled = h.mean(axis=1)
        return _affine(pooled, p["head.weight"], p["head.bias"]), (patches, blocks, pooled)

    def _kinks(self, cache):
        return [b[4] for b in cache[1]]

    def _backward(self, dlogits, cache):
        p = self.params
        patches, blocks, pooled = cache
        g = {}
        dpool, g["head.weight"], g["head.bias"] = _affine_back(dlogits, pooled, p["head.weight"])
        dh = np.repeat(dpool[:, None, :] / TOKENS, TOKENS, axis=1)
        for i in reversed(range(self.spec.depth)):
            pre = f"blocks.{i}."
            u, ln1, v, ln2, a, r = blocks[i]
            dr, g[pre + "fc2.weight"], g[pre + "fc2.bias"] = _affine_back(dh, r, p[pre + "fc2.weight"])
            da = dr * (a > 0)
            dv, g[pre + "fc1.weight"], g[pre + "fc1.bias"] = _affine_back(da, v, p[pre + "fc1.weight"])
            dx, g[pre + "channel_ln.gain"], g[pre + "channel_ln.bias"] = _layernorm_back(
                dv, ln2, p[pre + "channel_ln.gain"]
            )
            dh = dh + dx
            g[pre + "token_mix.weight"] = np.tensordot(dh, u, axes=([0, 2], [0, 2]))
            g[pre + "token_mix.bias"] = dh.sum(axis=(0, 2))
            du = p[pre + "token_mix.weight"].T @ dh
            dx, g[pre + "token_ln.gain"], g[pre + "token_ln.bias"] = _layernorm_back(
                du, ln1, p[pre + "token_ln.gain"]
            )
            dh = dh + dx
        _, g["embed.weight"], g["embed.bias"] = _affine_back(dh, patches, p["embed.weight"])
        return g


class QuadBowl(Model):
    """``f(theta) = 0.5 * theta^T diag(a) theta`` with ``a`` geometric in [1, cond]."""

    def __init__(self, spec, in_dim=None, classes=None):
        super().__init__(spec, in_dim, classes)
        self.curvature = np.geomspace(1.0, spec.cond, spec.dims)
        self.params["theta"] = self._rng.normal(spec.dims)

    def forward_loss(self, batch=None):
        self.check_finite()
        th = self.params["theta"]
        self._cache = True
        return float(0.5 * np.dot(self.curvature * th, th)), None

    def backward(self, batch=None):
        if self._cache is None:
            raise StaleCacheError("backward called without a matching forward_loss")
        self._cache = None
        return OrderedDict(theta=self.curvature * self.params["theta"])

    def _wide_eval(self, batch=None):
        th = self.params["theta"]
        return 0.5 * np.sum(self.curvature * th * th), []

    def hessian_diag(self):
        return OrderedDict(theta=self.curvature.copy())

    def logits(self, x):
        raise ConfigError("quad_bowl has no classifier output")


_CLASSES = {
    "linear": LinearModel,
    "plain_mlp": PlainMLP,
    "res_mlp": ResMLP,
    "patch_mixer": PatchMixer,
    "quad_bowl": QuadBowl,
}


def build_model(spec, in_dim=None, classes=None):
    """Instantiate ``spec``; classification families need ``in_dim`` and ``classes``."""
    if spec.family == "quad_bowl":
        if in_dim is not None:
            raise ConfigError("quad_bowl is analytic and takes no dataset")
        return QuadBowl(spec)
    if in_dim is None or classes is None:
        raise ConfigError(f"{spec.family} needs a classification dataset")
    return _CLASSES[spec.family](spec, int(in_dim), int(classes))


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradcheck(model, batch=None, h=1e-6, seed=0, max_coords=512, grad_hook=None):
    """Max relative error between analytic and central-difference gradients.

    Checks a random subsample of at most ``max_coords`` coordinates; the
    relative error is ``|a - n| / max(1e-8, |a| + |n|)``. Perturbed losses are
    evaluated in extended precision (``np.longdouble``) so cancellation in
    ``L(+h) - L(-h)`` does not swamp small gradients. When a perturbation
    flips the sign of any ReLU pre-activation the step is shrunk tenfold (up
    to three times); coordinates still straddling a kink are skipped.
    ``grad_hook`` may alter the analytic gradients (negative-control testing).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    model.forward_loss(batch)
    grads = model.backward(batch)
    if grad_hook is not None:
        grads = grad_hook(grads)
    coords = [(name, i) for name, p in model.params.items() for i in range(p.size)]
    rng = RandomStream(seed)
    if len(coords) > max_coords:
        pick = rng.permutation(len(coords))[:max_coords]
        coords = [coords[i] for i in sorted(pick)]

    saved = model.params
    wide = OrderedDict((k, v.astype(np.longdouble)) for k, v in saved.items())
    if batch is not None:
        batch = (np.asarray(batch[0], dtype=np.longdouble), batch[1])
    quad = isinstance(model, QuadBowl)
    if quad:
        saved_curv = model.curvature
        model.curvature = saved_curv.astype(np.longdouble)
    model.params = wide
    worst = 0.0
    try:
        _, base = model._wide_eval(batch)
        for name, i in coords:
            flat = wide[name].reshape(-1)
            orig = flat[i]
            step = np.longdouble(h)
            numeric = None
            for _ in range(4):
                flat[i] = orig + step
                lp, kp = model._wide_eval(batch)
                flat[i] = orig - step
                lm, km = model._wide_eval(batch)
                flat[i] = orig
                if _same_pattern(kp, base) and _same_pattern(km, base):
                    numeric = float((lp - lm) / (2 * step))
                    break
                step = step / 10
            if numeric is None:
                continue
            analytic = float(grads[name].reshape(-1)[i])
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    finally:
        model.params = saved
        if quad:
            model.curvature = saved_curv
        model._cache = None
    return worst
