"""In-place optimizers over a :class:`~miv.numerics.ParamStore`."""

from __future__ import annotations

import numpy as np

from .errors import NumericalFailure
from .numerics import ParamStore


def _grad(params: ParamStore, name: str) -> np.ndarray:
    g = params.grads[name]
    if not np.all(np.isfinite(g)):
        raise NumericalFailure(f"non-finite gradient in slot {name!r}")
    return g


class RMSprop:
    """``s <- alpha*s + (1-alpha)*g^2``, ``w <- w - lr*g/(sqrt(s)+eps)``."""

    def __init__(self, params: ParamStore, alpha: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.alpha = alpha
        self.eps = eps
        self.square_avg = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, lr: float) -> None:
        grads = {k: _grad(self.params, k) for k in self.params}
        for name, g in grads.items():
            s = self.square_avg[name]
            s *= self.alpha
            s += (1.0 - self.alpha) * g * g
            self.params.values[name] -= lr * g / (np.sqrt(s) + self.eps)


def trust_ratio(w_norm: float, g_norm: float, eta: float = 1e-3, weight_decay: float = 0.0) -> float:
    """LARS local learning-rate multiplier; 1 when either norm vanishes."""
    if w_norm > 0 and g_norm > 0:
        return eta * w_norm / (g_norm + weight_decay * w_norm)
    return 1.0


class LARS:
    """Momentum SGD with a per-slot trust ratio.

    Slots in ``params.no_decay`` (biases, normalization parameters) skip both
    weight decay and the trust ratio, so they move by plain momentum SGD.
    """

    def __init__(self, params: ParamStore, weight_decay: float = 1e-6, momentum: float = 0.9,
                 eta: float = 1e-3):
        self.params = params
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.eta = eta
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, lr: float) -> None:
        grads = {k: _grad(self.params, k) for k in self.params}
        for name, g in grads.items():
            w = self.params.values[name]
            if name in self.params.no_decay:
                local, update = 1.0, g
            else:
                local = trust_ratio(float(np.linalg.norm(w)), float(np.linalg.norm(g)),
                                    self.eta, self.weight_decay)
                update = g + self.weight_decay * w
            v = self.velocity[name]
            v *= self.momentum
            v += lr * local * update
            w -= v


class AdamW:
    """Bias-corrected Adam with decoupled weight decay (skipped for ``no_decay`` slots)."""

    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, lr: float) -> None:
        grads = {k: _grad(self.params, k) for k in self.params}
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            w = self.params.values[name]
            if name not in self.params.no_decay and self.weight_decay:
                w -= lr * self.weight_decay * w
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            w -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
