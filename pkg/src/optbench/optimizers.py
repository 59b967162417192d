"""Twenty gradient-based update rules behind one four-step interface.

Every family follows the same loop per parameter tensor ("layer"):

1. take the gradient ``g`` (coupled weight decay adds ``wd * theta`` here),
2. update the family's running statistics (momentum, second moments, ...),
3. turn them into a per-coordinate step size,
4. apply ``theta <- theta - step``; decoupled decay shrinks ``theta`` by
   ``lr * wd * theta`` outside the statistics.

Families are tagged with their category:

a  fixed learning rate with momentum         SGD-M, SGDP, LION
b  adaptive learning rate with momentum      Adam, Adamax, NAdam, AdamW, LAMB,
                                             RAdam, AdamP, Adan
c  estimated learning rate with momentum     AdaBound, LARS, AdaFactor,
                                             AdaBelief, NovoGrad, Sophia
d  adaptive learning rate without momentum   AdaGrad, AdaDelta, RMSProp
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .models import QuadBowl, softmax

FAMILY_NAMES = (
    "SGD-M", "SGDP", "LION",
    "Adam", "Adamax", "NAdam", "AdamW", "LAMB", "RAdam", "AdamP", "Adan",
    "AdaBound", "LARS", "AdaFactor", "AdaBelief", "NovoGrad", "Sophia",
    "AdaGrad", "AdaDelta", "RMSProp",
)

CATEGORY = {
    **dict.fromkeys(["SGD-M", "SGDP", "LION"], "a"),
    **dict.fromkeys(["Adam", "Adamax", "NAdam", "AdamW", "LAMB", "RAdam", "AdamP", "Adan"], "b"),
    **dict.fromkeys(["AdaBound", "LARS", "AdaFactor", "AdaBelief", "NovoGrad", "Sophia"], "c"),
    **dict.fromkeys(["AdaGrad", "AdaDelta", "RMSProp"], "d"),
}

# weight-decay placement per family: True = decoupled, False = added to g
DECOUPLED = {
    "SGD-M": False, "SGDP": True, "LION": True,
    "Adam": False, "Adamax": False, "NAdam": False, "AdamW": True, "LAMB": True,
    "RAdam": True, "AdamP": True, "Adan": True,
    "AdaBound": True, "LARS": True, "AdaFactor": True, "AdaBelief": True,
    "NovoGrad": True, "Sophia": True,
    "AdaGrad": False, "AdaDelta": False, "RMSProp": False,
}

# rules that act coordinate-wise, so one flat vector gives the same result as per-tensor calls
ELEMENTWISE = frozenset({
    "SGD-M", "LION", "Adam", "Adamax", "NAdam", "AdamW", "RAdam", "Adan",
    "AdaBound", "AdaBelief", "Sophia", "AdaGrad", "AdaDelta", "RMSProp",
})

DEFAULTS = {
    "SGD-M": dict(momentum=0.9),
    "SGDP": dict(momentum=0.9, eps=1e-8, extras=dict(delta=0.1)),
    "LION": dict(betas=(0.9, 0.99)),
    "Adam": dict(betas=(0.9, 0.999), eps=1e-8),
    "Adamax": dict(betas=(0.9, 0.999), eps=1e-8),
    "NAdam": dict(betas=(0.9, 0.999), eps=1e-8),
    "AdamW": dict(betas=(0.9, 0.999), eps=1e-8),
    "LAMB": dict(betas=(0.9, 0.999), eps=1e-6, extras=dict(trust_clip=10.0)),
    "RAdam": dict(betas=(0.9, 0.999), eps=1e-8),
    "AdamP": dict(betas=(0.9, 0.999), eps=1e-8, extras=dict(delta=0.1)),
    "Adan": dict(betas=(0.98, 0.92, 0.99), eps=1e-8),
    "AdaBound": dict(betas=(0.9, 0.999), eps=1e-8, extras=dict(final_lr_ratio=0.1, gamma=1e-3)),
    "LARS": dict(momentum=0.9, eps=1e-12),
    "AdaFactor": dict(eps=1e-30, extras=dict(decay_rate=-0.8, clip_threshold=1.0)),
    "AdaBelief": dict(betas=(0.9, 0.999), eps=1e-16),
    "NovoGrad": dict(betas=(0.95, 0.98), eps=1e-8),
    "Sophia": dict(betas=(0.965, 0.99), eps=1e-12, extras=dict(rho=0.01, interval=10)),
    "AdaGrad": dict(eps=1e-10),
    "AdaDelta": dict(betas=(0.9,), eps=1e-6),
    "RMSProp": dict(betas=(0.99,), eps=1e-8),
}

# default learning-rate centre relative to the base grid centre (1e-3)
LR_SCALE = {name: 1.0 for name in FAMILY_NAMES}
LR_SCALE.update({"SGD-M": 10.0, "SGDP": 10.0, "LION": 10.0, "LARS": 10.0, "AdaGrad": 10.0, "AdaDelta": 1000.0})

_ALIASES = {"sgd": "SGD-M", "sgdm": "SGD-M", "novograd": "NovoGrad"}
_LOOKUP = {n.lower(): n for n in FAMILY_NAMES}


class OptimizerError(ValueError):
    pass


def canonical_family(name):
    key = str(name).strip().lower()
    if key in _LOOKUP:
        return _LOOKUP[key]
    if key in _ALIASES:
        return _ALIASES[key]
    raise OptimizerError(f"unknown optimizer family {name!r}")


@dataclass
class HyperParams:
    lr: float
    weight_decay: float = 0.0
    decoupled_wd: bool = None
    betas: tuple = None
    momentum: float = None
    eps: float = None
    extras: dict = field(default_factory=dict)

    def resolved(self, family):
        """Copy with family defaults filled in for every unset field."""
        d = DEFAULTS[family]
        extras = dict(d.get("extras", {}))
        extras.update(self.extras)
        return HyperParams(
            lr=self.lr,
            weight_decay=self.weight_decay,
            decoupled_wd=DECOUPLED[family] if self.decoupled_wd is None else self.decoupled_wd,
            betas=tuple(self.betas) if self.betas is not None else d.get("betas", ()),
            momentum=self.momentum if self.momentum is not None else d.get("momentum", 0.0),
            eps=self.eps if self.eps is not None else d.get("eps", 1e-8),
            extras=extras,
        )

    def validate(self):
        if not self.lr > 0:
            raise OptimizerError("learning rate must be positive")
        if not self.weight_decay >= 0:
            raise OptimizerError("weight decay must be non-negative")
        if any(not 0.0 <= b < 1.0 for b in self.betas):
            raise OptimizerError(f"betas {self.betas} must lie in [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise OptimizerError("momentum must lie in [0, 1)")
        if not self.eps > 0:
            raise OptimizerError("eps must be positive")


@dataclass
class OptimizerState:
    family: str
    category: str
    hyper: HyperParams
    shapes: dict
    step_count: int = 0
    buffers: dict = field(default_factory=dict)
    diverged: bool = False

    def needs_hessian(self):
        """Sophia refreshes its curvature estimate on step 1, 1+k, 1+2k, ..."""
        if self.family != "Sophia":
            return False
        return self.step_count % int(self.hyper.extras["interval"]) == 0

    def merge_hessian(self, h):
        beta2 = self.hyper.betas[1]
        for name, est in h.items():
            buf = self.buffers[name]
            buf["h"] = beta2 * buf["h"] + (1.0 - beta2) * est


def _init_buffers(family, shape):
    z = lambda: np.zeros(shape)  # noqa: E731
    if family in ("SGD-M", "SGDP", "LARS"):
        return {"momentum": z()}
    if family == "LION":
        return {"m": z()}
    if family in ("Adam", "AdamW", "AdamP", "NAdam", "RAdam", "LAMB", "AdaBound"):
        return {"m": z(), "v": z()}
    if family == "Adamax":
        return {"m": z(), "u": z()}
    if family == "AdaBelief":
        return {"m": z(), "s": z()}
    if family == "Adan":
        return {"m": z(), "v": z(), "n": z(), "prev_grad": z()}
    if family == "AdaFactor":
        if len(shape) == 2:
            return {"row": np.zeros(shape[0]), "col": np.zeros(shape[1])}
        return {"v": z()}
    if family == "NovoGrad":
        return {"m": z(), "v_layer": np.zeros(())}
    if family == "Sophia":
        return {"m": z(), "h": z()}
    if family == "AdaGrad":
        return {"sum_sq": z()}
    if family == "AdaDelta":
        return {"sq_avg": z(), "acc_delta": z()}
    if family == "RMSProp":
        return {"sq_avg": z()}
    raise OptimizerError(f"unknown optimizer family {family!r}")


def create_optimizer(family, hyper, shapes):
    """Fresh state for ``family`` over parameters ``{name: shape}``."""
    family = canonical_family(family)
    hp = hyper.resolved(family)
    hp.validate()
    shapes = {k: tuple(v) for k, v in shapes.items()}
    buffers = {k: _init_buffers(family, s) for k, s in shapes.items()}
    return OptimizerState(family, CATEGORY[family], hp, shapes, buffers=buffers)


# -- update rules -----------------------------------------------------------
# signature: rule(buf, theta, g, lr, wd, hp, t) -> new theta
#   g already carries coupled decay; wd is nonzero only in decoupled mode.

def _norm(x):
    return float(np.sqrt(np.sum(x * x)))


def _radial_project(theta, d, g, delta, eps):
    """Remove the radial component of ``d`` when ``theta`` and ``g`` are near-orthogonal."""
    tn = _norm(theta)
    gn = _norm(g)
    if tn == 0.0 or gn == 0.0:
        return d
    cos = abs(float(np.sum(theta * g))) / (tn * gn + eps)
    if cos < delta / math.sqrt(theta.size):
        unit = theta / tn
        return d - float(np.sum(unit * d)) * unit
    return d


def _decay(theta, lr, wd):
    return theta - lr * wd * theta if wd else theta


def _sgdm(buf, theta, g, lr, wd, hp, t):
    b = buf["momentum"] = hp.momentum * buf["momentum"] + g
    return _decay(theta, lr, wd) - lr * b


def _sgdp(buf, theta, g, lr, wd, hp, t):
    b = buf["momentum"] = hp.momentum * buf["momentum"] + g
    d = _radial_project(theta, b, g, hp.extras["delta"], hp.eps)
    return _decay(theta, lr, wd) - lr * d


def _lion(buf, theta, g, lr, wd, hp, t):
    b1, b2 = hp.betas[:2]
    u = np.sign(b1 * buf["m"] + (1.0 - b1) * g)
    buf["m"] = b2 * buf["m"] + (1.0 - b2) * g
    return _decay(theta, lr, wd) - lr * u


def _moments(buf, g, hp):
    b1, b2 = hp.betas[:2]
    buf["m"] = b1 * buf["m"] + (1.0 - b1) * g
    buf["v"] = b2 * buf["v"] + (1.0 - b2) * g * g
    return buf["m"], buf["v"]


def _adam_direction(buf, g, hp, t):
    b1, b2 = hp.betas[:2]
    m, v = _moments(buf, g, hp)
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    return mhat / (np.sqrt(vhat) + hp.eps)


def _adam(buf, theta, g, lr, wd, hp, t):
    return _decay(theta, lr, wd) - lr * _adam_direction(buf, g, hp, t)


def _adamp(buf, theta, g, lr, wd, hp, t):
    d = _radial_project(theta, _adam_direction(buf, g, hp, t), g, hp.extras["delta"], hp.eps)
    return _decay(theta, lr, wd) - lr * d


def _adamax(buf, theta, g, lr, wd, hp, t):
    b1, b2 = hp.betas[:2]
    buf["m"] = b1 * buf["m"] + (1.0 - b1) * g
    buf["u"] = np.maximum(b2 * buf["u"], np.abs(g))
    step = lr / (1.0 - b1**t)
    return _decay(theta, lr, wd) - step * buf["m"] / (buf["u"] + hp.eps)


def _nadam(buf, theta, g, lr, wd, hp, t):
    b1, b2 = hp.betas[:2]
    m, v = _moments(buf, g, hp)
    mhat = b1 * m / (1.0 - b1 ** (t + 1)) + (1.0 - b1) * g / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    return _decay(theta, lr, wd) - lr * mhat / (np.sqrt(vhat) + hp.eps)


def _radam(buf, theta, g, lr, wd, hp, t):
    b1, b2 = hp.betas[:2]
    m, v = _moments(buf, g, hp)
    mhat = m / (1.0 - b1**t)
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2**t / (1.0 - b2**t)
    theta = _decay(theta, lr, wd)
    if rho_t > 4.0:
        r = math.sqrt(
            (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
        vhat = v / (1.0 - b2**t)
        return theta - lr * r * mhat / (np.sqrt(vhat) + hp.eps)
    return theta - lr * mhat


def _lamb(buf, theta, g, lr, wd, hp, t):
    r = _adam_direction(buf, g, hp, t)
    u = r + wd * theta if wd else r
    w_norm = min(max(_norm(theta), 0.0), hp.extras["trust_clip"])
    u_norm = _norm(u)
    ratio = w_norm / u_norm if w_norm > 0.0 and u_norm > 0.0 else 1.0
    return theta - lr * ratio * u


def _adan(buf, theta, g, lr, wd, hp, t):
    b1, b2, b3 = hp.betas[:3]
    diff = g - buf["prev_grad"] if t > 1 else np.zeros_like(g)
    buf["prev_grad"] = g.copy()
    buf["m"] = b1 * buf["m"] + (1.0 - b1) * g
    buf["v"] = b2 * buf["v"] + (1.0 - b2) * diff
    nudged = g + b2 * diff
    buf["n"] = b3 * buf["n"] + (1.0 - b3) * nudged * nudged
    mhat = buf["m"] / (1.0 - b1**t)
    vhat = buf["v"] / (1.0 - b2**t)
    nhat = buf["n"] / (1.0 - b3**t)
    stepped = theta - lr * (mhat + b2 * vhat) / (np.sqrt(nhat) + hp.eps)
    return stepped / (1.0 + lr * wd) if wd else stepped


def adabound_bounds(lr, t, hp):
    final_lr = hp.extras["final_lr_ratio"] * lr
    gamma = hp.extras["gamma"]
    return final_lr * (1.0 - 1.0 / (gamma * t + 1.0)), final_lr * (1.0 + 1.0 / (gamma * t))


def _adabound(buf, theta, g, lr, wd, hp, t):
    b1, b2 = hp.betas[:2]
    m, v = _moments(buf, g, hp)
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    lower, upper = adabound_bounds(lr, t, hp)
    rate = np.clip(lr / (np.sqrt(vhat) + hp.eps), lower, upper)
    buf["rate"] = rate
    return _decay(theta, lr, wd) - rate * mhat


def _adabelief(buf, theta, g, lr, wd, hp, t):
    b1, b2 = hp.betas[:2]
    buf["m"] = b1 * buf["m"] + (1.0 - b1) * g
    dev = g - buf["m"]
    buf["s"] = b2 * buf["s"] + (1.0 - b2) * dev * dev + hp.eps
    mhat = buf["m"] / (1.0 - b1**t)
    shat = buf["s"] / (1.0 - b2**t)
    return _decay(theta, lr, wd) - lr * mhat / (np.sqrt(shat) + hp.eps)


def _adafactor(buf, theta, g, lr, wd, hp, t):
    beta2 = 1.0 - t ** hp.extras["decay_rate"]
    sq = g * g + hp.eps
    if "row" in buf:
        buf["row"] = beta2 * buf["row"] + (1.0 - beta2) * sq.mean(axis=1)
        buf["col"] = beta2 * buf["col"] + (1.0 - beta2) * sq.mean(axis=0)
        vhat = np.outer(buf["row"], buf["col"]) / buf["row"].mean()
    else:
        buf["v"] = beta2 * buf["v"] + (1.0 - beta2) * sq
        vhat = buf["v"]
    u = g / np.sqrt(vhat)
    rms = math.sqrt(float(np.mean(u * u)))
    u = u / max(1.0, rms / hp.extras["clip_threshold"])
    return _decay(theta, lr, wd) - lr * u


def lars_trust_ratio(theta, g, wd):
    tn = _norm(theta)
    gn = _norm(g)
    if tn == 0.0 or gn == 0.0:
        return 1.0
    return tn / (gn + wd * tn)


def _lars(buf, theta, g, lr, wd, hp, t):
    ratio = lars_trust_ratio(theta, g, wd)
    d = g + wd * theta if wd else g
    b = buf["momentum"] = hp.momentum * buf["momentum"] + ratio * d
    return theta - lr * b


def _novograd(buf, theta, g, lr, wd, hp, t):
    b1, b2 = hp.betas[:2]
    gsq = float(np.sum(g * g))
    v = gsq if t == 1 else b2 * float(buf["v_layer"]) + (1.0 - b2) * gsq
    buf["v_layer"] = np.asarray(v)
    d = g / math.sqrt(v + hp.eps)
    if wd:
        d = d + wd * theta
    buf["m"] = b1 * buf["m"] + d
    return theta - lr * buf["m"]


def _sophia(buf, theta, g, lr, wd, hp, t):
    b1 = hp.betas[0]
    buf["m"] = b1 * buf["m"] + (1.0 - b1) * g
    denom = np.maximum(hp.extras["rho"] * buf["h"], hp.eps)
    return _decay(theta, lr, wd) - lr * np.clip(buf["m"] / denom, -1.0, 1.0)


def _adagrad(buf, theta, g, lr, wd, hp, t):
    buf["sum_sq"] = buf["sum_sq"] + g * g
    return _decay(theta, lr, wd) - lr * g / (np.sqrt(buf["sum_sq"]) + hp.eps)


def _adadelta(buf, theta, g, lr, wd, hp, t):
    rho = hp.betas[0]
    buf["sq_avg"] = rho * buf["sq_avg"] + (1.0 - rho) * g * g
    delta = -np.sqrt(buf["acc_delta"] + hp.eps) / np.sqrt(buf["sq_avg"] + hp.eps) * g
    buf["acc_delta"] = rho * buf["acc_delta"] + (1.0 - rho) * delta * delta
    return _decay(theta, lr, wd) + lr * delta


def _rmsprop(buf, theta, g, lr, wd, hp, t):
    rho = hp.betas[0]
    buf["sq_avg"] = rho * buf["sq_avg"] + (1.0 - rho) * g * g
    return _decay(theta, lr, wd) - lr * g / (np.sqrt(buf["sq_avg"]) + hp.eps)


RULES = {
    "SGD-M": _sgdm, "SGDP": _sgdp, "LION": _lion,
    "Adam": _adam, "AdamW": _adam, "AdamP": _adamp, "Adamax": _adamax,
    "NAdam": _nadam, "RAdam": _radam, "LAMB": _lamb, "Adan": _adan,
    "AdaBound": _adabound, "AdaBelief": _adabelief, "AdaFactor": _adafactor,
    "LARS": _lars, "NovoGrad": _novograd, "Sophia": _sophia,
    "AdaGrad": _adagrad, "AdaDelta": _adadelta, "RMSProp": _rmsprop,
}


def step(state, params, grads, lr_t):
    """Apply one update to ``params`` in place; returns True if any parameter diverged.

    Divergence (non-finite parameters after the update) is flagged on the
    state rather than raised.
    """
    if not lr_t > 0:
        raise OptimizerError("scheduled learning rate must be positive")
    hp = state.hyper
    state.step_count += 1
    t = state.step_count
    rule = RULES[state.family]
    wd = hp.weight_decay
    coupled = wd if (wd and not hp.decoupled_wd) else 0.0
    decoupled = wd if (wd and hp.decoupled_wd) else 0.0
    diverged = False
    for name, theta in params.items():
        g = grads[name]
        if coupled:
            g = g + coupled * theta
        new = rule(state.buffers[name], theta, g, lr_t, decoupled, hp, t)
        theta[...] = new
        if not np.isfinite(theta).all():
            diverged = True
    state.diverged = state.diverged or diverged
    return diverged


def gnb_hessian_estimate(model, batch, stream):
    """Gauss-Newton-Bartlett diagonal: ``B * g~ * g~`` with labels drawn from the model.

    ``quad_bowl`` returns its exact Hessian diagonal.
    """
    if isinstance(model, QuadBowl):
        return model.hessian_diag()
    if not hasattr(model, "classes") or model.classes is None:
        raise OptimizerError("Gauss-Newton-Bartlett estimate needs a softmax classifier")
    x = batch[0]
    probs = softmax(model.logits(x))
    sampled = stream.choice_from_probs(probs)
    sbatch = (x, sampled)
    model.forward_loss(sbatch)
    g = model.backward(sbatch)
    n = x.shape[0]
    return {k: n * v * v for k, v in g.items()}


def cosine_lr(lr0, epoch, total, warmup=0):
    """Linear warmup over ``warmup`` epochs, then half-cosine decay to zero at ``total``."""
    if epoch < warmup:
        return lr0 * (epoch + 1) / (warmup + 1)
    span = total - warmup
    progress = (epoch - warmup) / span if span > 0 else 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


