"""Dense layer primitives with hand-written gradients.

Everything here works on float64 ``numpy`` arrays. Forward functions are
pure; each one has a matching ``*_backward`` that takes the upstream
gradient plus whatever the forward needed and returns input gradients.
Layers that need more than their inputs for the backward pass return a
cache alongside the output.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import DegenerateInputError, NumericalFailure, ParameterError, ShapeError

BCE_EPS = 1e-7
BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator on PCG64, numpy's fixed, platform-stable bit generator."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit sub-seed for a tuple of non-negative integer keys."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalFailure("non-finite value in layer input")


class ParamStore:
    """Named parameter slots, each with a gradient buffer of the same shape.

    Slots flagged ``no_decay`` (biases, normalization scales and shifts) are
    skipped by weight decay and LARS trust scaling.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.no_decay: set[str] = set()

    def add(self, name: str, value, no_decay: bool = False) -> np.ndarray:
        if name in self.values:
            raise ParameterError(f"duplicate parameter slot {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        if no_decay:
            self.no_decay.add(name)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def items(self):
        return self.values.items()

    def accumulate(self, name: str, grad) -> None:
        g = self.grads[name]
        if np.shape(grad) != g.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {np.shape(grad)}, slot is {g.shape}"
            )
        g += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        return copy.deepcopy(self)

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite slot values in place; names and shapes must match exactly."""
        if set(values) != set(self.values):
            unknown = sorted(set(values) - set(self.values))
            missing = sorted(set(self.values) - set(values))
            raise ShapeError(f"slot mismatch: unknown={unknown} missing={missing}")
        for name, v in values.items():
            if np.shape(v) != self.values[name].shape:
                raise ShapeError(
                    f"slot {name!r}: expected shape {self.values[name].shape}, got {np.shape(v)}"
                )
            self.values[name][...] = v

    def num_parameters(self) -> int:
        return sum(v.size for v in self.values.values())


# ----------------------------------------------------------------------------
# affine


def affine(x, W, b):
    """``x @ W + b`` with ``b`` broadcast over rows."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: cannot multiply x{x.shape} by W{W.shape}")
    if b.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: bias {b.shape} does not match W{W.shape}")
    _check_finite(x)
    return x @ W + b.reshape(1, -1)


def affine_backward(dy, x, W):
    """Returns ``(dx, dW, db)``; ``db`` has shape ``(m,)``."""
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


# ----------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def softmax_rows(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(dy, y, axis: int = -1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def softplus(x):
    return np.logaddexp(0.0, x)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax_rows": softmax_rows}


def activation(x, kind: str):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}") from None
    _check_finite(x)
    return fn(x)


def activation_backward(dy, x, y, kind: str):
    if kind == "relu":
        return relu_backward(dy, x)
    if kind == "sigmoid":
        return sigmoid_backward(dy, y)
    if kind == "softmax_rows":
        return softmax_backward(dy, y)
    raise ParameterError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------------------
# normalization


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def zeros(cls, d: int) -> "RunningStats":
        return cls(np.zeros(d), np.ones(d))


def batch_norm(x, gamma, beta, mode: str = "train", running: RunningStats | None = None,
               eps: float = NORM_EPS):
    """Per-column normalization; returns ``(y, cache)``.

    Train mode uses population statistics of the batch and, when ``running``
    is given, updates it in place with momentum. Eval mode uses ``running``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise DegenerateInputError(f"batch norm needs at least 2 rows in train mode, got {n}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        if running is not None:
            m = running.momentum
            running.mean[...] = (1 - m) * running.mean + m * mu
            running.var[...] = (1 - m) * running.var + m * var
    elif mode == "eval":
        if running is None:
            raise ParameterError("eval-mode batch norm needs running statistics")
        mu, var = running.mean, running.var
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    std = np.sqrt(var + eps)
    xhat = (x - mu) / std
    y = xhat * gamma.reshape(1, -1) + beta.reshape(1, -1)
    return y, (xhat, std, gamma, mode)


def batch_norm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, std, gamma, mode = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma.reshape(1, -1)
    if mode == "eval":
        return dxhat / std, dgamma, dbeta
    n = dy.shape[0]
    dx = (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)) / (n * std)
    return dx, dgamma, dbeta


def default_groups(d: int) -> int:
    return 32 if d >= 32 else 1


def group_norm(x, gamma, beta, groups: int, eps: float = NORM_EPS):
    """Per-row normalization over contiguous channel groups; returns ``(y, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if groups < 1 or d % groups:
        raise ShapeError(f"group count {groups} does not divide width {d}")
    xg = x.reshape(n, groups, d // groups)
    mu = xg.mean(axis=-1, keepdims=True)
    std = np.sqrt(xg.var(axis=-1, keepdims=True) + eps)
    xhat = ((xg - mu) / std).reshape(n, d)
    y = xhat * gamma.reshape(1, -1) + beta.reshape(1, -1)
    return y, (xhat, std, gamma, groups)


def group_norm_backward(dy, cache):
    xhat, std, gamma, groups = cache
    n, d = dy.shape
    m = d // groups
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = (dy * gamma.reshape(1, -1)).reshape(n, groups, m)
    xh = xhat.reshape(n, groups, m)
    dx = (m * dxhat - dxhat.sum(axis=-1, keepdims=True)
          - xh * (dxhat * xh).sum(axis=-1, keepdims=True)) / (m * std)
    return dx.reshape(n, d), dgamma, dbeta


def normalize_layer(x, kind: str, gamma, beta, mode: str = "train", eps: float = NORM_EPS,
                    groups: int | None = None, running: RunningStats | None = None):
    """Dispatch to :func:`batch_norm` or :func:`group_norm`; returns ``(y, cache)``."""
    if kind == "batch":
        return batch_norm(x, gamma, beta, mode=mode, running=running, eps=eps)
    if kind == "group":
        if groups is None:
            groups = default_groups(np.shape(x)[1])
        return group_norm(x, gamma, beta, groups, eps=eps)
    raise ParameterError(f"unknown normalization {kind!r}")


def normalize_layer_backward(dy, cache, kind: str):
    if kind == "batch":
        return batch_norm_backward(dy, cache)
    return group_norm_backward(dy, cache)


# ----------------------------------------------------------------------------
# dropout, l2 normalization, loss


def dropout(x, rate: float, mode: str, rng: np.random.Generator | None):
    """Inverted dropout; returns ``(y, mask)`` where ``mask`` already carries the rescale."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if mode == "eval" or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def l2_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("cannot l2-normalize a zero row")
    return x / norms


def l2_normalize_backward(dy, x, y):
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norms


def bce_loss(p, y) -> float:
    """Mean binary cross-entropy with probabilities clamped to ``[eps, 1 - eps]``."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: {p.shape[0]} probabilities vs {y.shape[0]} labels")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def bce_loss_backward(p, y):
    """Gradient of :func:`bce_loss` w.r.t. ``p``, zero where the clamp is active."""
    shape = np.shape(p)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = p.shape[0]
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    g = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    return (g * inside).reshape(shape)


# ----------------------------------------------------------------------------
# finite-difference gradient checking


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


@dataclass
class GradCheckReport:
    tol: float
    per_slot: dict[str, float] = field(default_factory=dict)
    nonfinite: list[str] = field(default_factory=list)
    checked_entries: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_slot.values(), default=0.0)

    @property
    def worst_slot(self) -> str | None:
        if not self.per_slot:
            return None
        return max(self.per_slot, key=self.per_slot.get)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_err <= self.tol

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        msg = (f"{status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e}) "
               f"over {self.checked_entries} entries")
        if self.worst_slot:
            msg += f", worst slot {self.worst_slot}"
        if self.nonfinite:
            msg += f", non-finite probes in {self.nonfinite}"
        return msg


def _central_difference(f, params, flat, i, step):
    orig = flat[i]
    flat[i] = orig + step
    fp = f(params)
    flat[i] = orig - step
    fm = f(params)
    flat[i] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        return None
    return (fp - fm) / (2.0 * step)


def grad_check(f: Callable[[ParamStore], float], params: ParamStore, h: float = 1e-5,
               tol: float = 1e-6, slots: Iterable[str] | None = None,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f(params)`` must return the scalar objective and, as a side effect,
    accumulate its analytic gradient into ``params.grads``. It is called
    once on a zeroed gradient store to collect the analytic gradient, then
    twice per probed entry. With ``max_entries`` set, that many entries per
    slot are sampled instead of probing every one.

    An entry that misses ``tol`` is probed again at ``h / 10`` and keeps the
    smaller error: a genuine gradient bug survives the smaller step, a
    probe that happened to straddle a relu kink does not.
    """
    params.zero_grad()
    f(params)
    analytic = {k: g.copy() for k, g in params.grads.items()}
    rng = make_rng(seed)
    report = GradCheckReport(tol=tol)
    for name in (params.names() if slots is None else list(slots)):
        value = params.values[name]
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            err = None
            # a probe that straddles a relu/abs/max kink is retried at a smaller step
            for step in (h, h / 10.0):
                fd = _central_difference(f, params, flat, i, step)
                if fd is None:
                    break
                e = float(rel_error(ga[i], fd))
                err = e if err is None else min(err, e)
                if err <= tol:
                    break
            if err is None:
                report.nonfinite.append(name)
                break
            worst = max(worst, err)
        report.per_slot[name] = worst
        report.checked_entries += len(idx)
    params.zero_grad()
    return report
