"""Cross-attention pooling of a target bag, conditioned on a query.

All kernels run batched: queries arrive as ``(B, D)`` and bags as
``(B, n, D)``. After :func:`split_heads` the per-head tensors are
``(B, h, dh)`` and ``(B, h, n, dh)``.

Bags are put into a canonical row order (lexicographic on the row values)
before pooling, so every kernel is invariant to bag order bit-for-bit and
not just up to floating-point summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import ParamStore, relu, sigmoid, softmax_backward, softmax_rows

KINDS = ("mean", "max", "vema", "dba_l1", "dba_l2", "mhsce")
BASELINE_KINDS = ("mean", "max")
HEAD_GRID = (1, 2, 4, 8, 16)
SE_REDUCTION = 4
MODEL_DIM = 512
VEMA_S_JITTER = 0.1


@dataclass(frozen=True)
class AttentionConfig:
    kind: str
    heads: int = 1
    model_dim: int = MODEL_DIM

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide model_dim={self.model_dim}")
        if self.kind == "mhsce" and self.head_dim % SE_REDUCTION:
            raise ConfigError(
                f"mhsce needs head width {self.head_dim} divisible by reduction {SE_REDUCTION}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def label(self) -> str:
        if self.kind in BASELINE_KINDS:
            return f"No attention({self.kind})"
        name = {"vema": "VEMA", "dba_l1": "DBA L1", "dba_l2": "DBA L2", "mhsce": "MHSCE"}[self.kind]
        return f"{name}(h={self.heads})"


@dataclass
class PoolResult:
    v_t: np.ndarray
    v_q: np.ndarray
    weights: np.ndarray | None


def default_grid(model_dim: int = MODEL_DIM, include_mhsce: bool = False) -> list[AttentionConfig]:
    """The 17-row experiment grid: two baselines plus VEMA/DBA-L1/DBA-L2 over five head counts."""
    grid = [AttentionConfig(k, 1, model_dim) for k in BASELINE_KINDS]
    kinds = ["vema", "dba_l1", "dba_l2"] + (["mhsce"] if include_mhsce else [])
    for kind in kinds:
        grid += [AttentionConfig(kind, h, model_dim) for h in HEAD_GRID]
    return grid


def split_heads(v, heads: int):
    """``(..., D) -> (..., h, D/h)`` by contiguous channel slices."""
    v = np.asarray(v)
    d = v.shape[-1]
    if heads < 1 or d % heads:
        raise ShapeError(f"{heads} heads do not divide width {d}")
    return v.reshape(*v.shape[:-1], heads, d // heads)


def merge_heads(v):
    return v.reshape(*v.shape[:-2], v.shape[-2] * v.shape[-1])


def dba_constant(head_dim: int, norm: str) -> float:
    """Expected distance between two independent standard-normal vectors."""
    if norm == "l2":
        return math.sqrt(2.0 * head_dim)
    return 2.0 * head_dim / math.sqrt(math.pi)


def init_attention_params(config: AttentionConfig, params: ParamStore, rng: np.random.Generator,
                          prefix: str = "attn.") -> None:
    h, dh = config.heads, config.head_dim
    if config.kind in ("dba_l1", "dba_l2"):
        # softplus(log(e - 1)) == 1
        params.add(prefix + "beta_raw", np.full(h, math.log(math.e - 1.0)), no_decay=True)
    elif config.kind == "vema":
        params.add(prefix + "R", rng.normal(0.0, 1.0 / math.sqrt(dh), (h, dh, dh)))
        params.add(prefix + "bR", np.zeros((h, dh)), no_decay=True)
        # S starts near the identity so the gated query begins in the same
        # basis as the bag it is compared with; a fully random S scrambles
        # that correspondence and training stalls near chance.
        jitter = rng.normal(0.0, 1.0 / math.sqrt(dh), (h, dh, dh))
        params.add(prefix + "S", np.eye(dh)[None] + VEMA_S_JITTER * jitter)
    elif config.kind == "mhsce":
        dr = dh // SE_REDUCTION
        params.add(prefix + "W1", rng.normal(0.0, 1.0 / math.sqrt(dh), (h, dr, dh)))
        params.add(prefix + "W2", rng.normal(0.0, 1.0 / math.sqrt(dr), (h, dh, dr)))


# ----------------------------------------------------------------------------
# kernels on head-split tensors: q (B, h, dh), t (B, h, n, dh)


def _weighted_sum(w, t):
    return np.einsum("bhn,bhnd->bhd", w, t)


def _pool_backward(dvt, w, t):
    """Backward of ``vt = sum_n w_n t_n``; returns ``(dw, dt)``."""
    dw = np.einsum("bhd,bhnd->bhn", dvt, t)
    dt = w[..., None] * dvt[:, :, None, :]
    return dw, dt


def _mean_forward(q, t, params, prefix):
    return t.mean(axis=2), q, None, None


def _mean_backward(dvt, dvq, cache, q, t, params, prefix):
    n = t.shape[2]
    return dvq, np.broadcast_to(dvt[:, :, None, :] / n, t.shape).copy()


def _max_forward(q, t, params, prefix):
    idx = t.argmax(axis=2)
    return np.take_along_axis(t, idx[:, :, None, :], axis=2)[:, :, 0, :], q, None, idx


def _max_backward(dvt, dvq, idx, q, t, params, prefix):
    dt = np.zeros_like(t)
    np.put_along_axis(dt, idx[:, :, None, :], dvt[:, :, None, :], axis=2)
    return dvq, dt


def _dba_forward(norm):
    def forward(q, t, params, prefix):
        dh = q.shape[-1]
        diff = t - q[:, :, None, :]
        dist = np.sqrt((diff * diff).sum(-1)) if norm == "l2" else np.abs(diff).sum(-1)
        beta_raw = params[prefix + "beta_raw"]
        beta = np.logaddexp(0.0, beta_raw)
        scale = (beta * dba_constant(dh, norm))[None, :, None]
        w = softmax_rows(-dist / scale)
        return _weighted_sum(w, t), q, w, (diff, dist, scale, beta, w)
    return forward


def _dba_backward(norm):
    def backward(dvt, dvq, cache, q, t, params, prefix):
        diff, dist, scale, beta, w = cache
        dw, dt = _pool_backward(dvt, w, t)
        dscores = softmax_backward(dw, w)
        ddist = -dscores / scale
        # d(score)/d(beta) = dist / (beta^2 c) = dist / (beta * scale)
        dbeta = (dscores * dist / (scale * beta[None, :, None])).sum(axis=(0, 2))
        beta_raw = params[prefix + "beta_raw"]
        params.accumulate(prefix + "beta_raw", dbeta * sigmoid(beta_raw))
        if norm == "l2":
            safe = np.where(dist > 0, dist, 1.0)
            ddiff = np.where(dist[..., None] > 0, ddist[..., None] * diff / safe[..., None], 0.0)
        else:
            ddiff = ddist[..., None] * np.sign(diff)
        return dvq - ddiff.sum(axis=2), dt + ddiff
    return backward


def _vema_forward(q, t, params, prefix):
    n, dh = t.shape[2], q.shape[-1]
    R, bR, S = params[prefix + "R"], params[prefix + "bR"], params[prefix + "S"]
    centered = t - t.mean(axis=2, keepdims=True)
    var = (centered * centered).mean(axis=2)
    gate = sigmoid(np.einsum("bhi,hij->bhj", var, R) + bR[None])
    g = q * gate
    qp = np.einsum("bhi,hij->bhj", g, S)
    w = softmax_rows(np.einsum("bhd,bhnd->bhn", qp, t) / math.sqrt(dh))
    return _weighted_sum(w, t), qp, w, (centered, var, gate, g, qp, w, n)


def _vema_backward(dvt, dvq, cache, q, t, params, prefix):
    centered, var, gate, g, qp, w, n = cache
    dh = q.shape[-1]
    R, S = params[prefix + "R"], params[prefix + "S"]
    dw, dt = _pool_backward(dvt, w, t)
    dscores = softmax_backward(dw, w) / math.sqrt(dh)
    dqp = dvq + np.einsum("bhn,bhnd->bhd", dscores, t)
    dt = dt + dscores[..., None] * qp[:, :, None, :]
    params.accumulate(prefix + "S", np.einsum("bhi,bhj->hij", g, dqp))
    dg = np.einsum("bhj,hij->bhi", dqp, S)
    dq = dg * gate
    dz = dg * q * gate * (1.0 - gate)
    params.accumulate(prefix + "R", np.einsum("bhi,bhj->hij", var, dz))
    params.accumulate(prefix + "bR", dz.sum(axis=0))
    dvar = np.einsum("bhj,hij->bhi", dz, R)
    dt = dt + dvar[:, :, None, :] * 2.0 * centered / n
    return dq, dt


def _mhsce_forward(q, t, params, prefix):
    dh = q.shape[-1]
    W1, W2 = params[prefix + "W1"], params[prefix + "W2"]
    w = softmax_rows(np.einsum("bhd,bhnd->bhn", q, t) / math.sqrt(dh))
    a = _weighted_sum(w, t)
    u = np.einsum("bhi,hki->bhk", a, W1)
    r = relu(u)
    e = sigmoid(np.einsum("bhk,hjk->bhj", r, W2))
    return a * e, q * e, w, (w, a, u, r, e)


def _mhsce_backward(dvt, dvq, cache, q, t, params, prefix):
    w, a, u, r, e = cache
    dh = q.shape[-1]
    W1, W2 = params[prefix + "W1"], params[prefix + "W2"]
    da = dvt * e
    dq = dvq * e
    dv = (dvt * a + dvq * q) * e * (1.0 - e)
    params.accumulate(prefix + "W2", np.einsum("bhj,bhk->hjk", dv, r))
    du = np.einsum("bhj,hjk->bhk", dv, W2) * (u > 0)
    params.accumulate(prefix + "W1", np.einsum("bhk,bhi->hki", du, a))
    da = da + np.einsum("bhk,hki->bhi", du, W1)
    dw, dt = _pool_backward(da, w, t)
    dscores = softmax_backward(dw, w) / math.sqrt(dh)
    dq = dq + np.einsum("bhn,bhnd->bhd", dscores, t)
    dt = dt + dscores[..., None] * q[:, :, None, :]
    return dq, dt


_KERNELS = {
    "mean": (_mean_forward, _mean_backward),
    "max": (_max_forward, _max_backward),
    "vema": (_vema_forward, _vema_backward),
    "dba_l1": (_dba_forward("l1"), _dba_backward("l1")),
    "dba_l2": (_dba_forward("l2"), _dba_backward("l2")),
    "mhsce": (_mhsce_forward, _mhsce_backward),
}


# ----------------------------------------------------------------------------
# cap_pool


def canonical_order(bag):
    """Row permutation of each bag that sorts rows lexicographically; ``(B, n)`` int array."""
    bag = np.asarray(bag)
    order = np.empty(bag.shape[:2], dtype=np.intp)
    for i, rows in enumerate(bag):
        order[i] = np.lexsort(rows.T[::-1])
    return order


def cap_pool_forward(config: AttentionConfig, params: ParamStore, query, bag, prefix: str = "attn."):
    """Batched pooling. ``query`` is ``(B, D)``, ``bag`` is ``(B, n, D)``.

    Returns ``(PoolResult, cache)``; weights are ``(B, h, n)`` in the
    caller's bag order, or ``None`` for the baselines.
    """
    query = np.asarray(query, dtype=np.float64)
    bag = np.asarray(bag, dtype=np.float64)
    if query.ndim != 2 or bag.ndim != 3 or bag.shape[0] != query.shape[0] \
            or bag.shape[2] != query.shape[1] or bag.shape[1] < 1:
        raise ShapeError(f"cap_pool: query {query.shape} incompatible with bag {bag.shape}")
    if query.shape[1] != config.model_dim:
        raise ShapeError(f"cap_pool: width {query.shape[1]} != model_dim {config.model_dim}")
    forward, _ = _KERNELS[config.kind]
    order = canonical_order(bag)
    sbag = np.take_along_axis(bag, order[:, :, None], axis=1)
    h = config.heads
    qh = split_heads(query, h)
    th = split_heads(sbag, h).transpose(0, 2, 1, 3)
    vt, vq, w, kcache = forward(qh, th, params, prefix)
    weights = None
    if w is not None:
        weights = np.empty_like(w)
        np.put_along_axis(weights, np.broadcast_to(order[:, None, :], w.shape), w, axis=2)
    result = PoolResult(merge_heads(vt), merge_heads(vq), weights)
    return result, (config, order, qh, th, kcache, prefix)


def cap_pool_backward(dvt, dvq, cache, params: ParamStore):
    """Accumulates parameter gradients; returns ``(dquery, dbag)`` in input order."""
    config, order, qh, th, kcache, prefix = cache
    _, backward = _KERNELS[config.kind]
    h = config.heads
    dq, dt = backward(split_heads(dvt, h), split_heads(dvq, h), kcache, qh, th, params, prefix)
    dsbag = merge_heads(dt.transpose(0, 2, 1, 3))
    dbag = np.empty_like(dsbag)
    np.put_along_axis(dbag, order[:, :, None], dsbag, axis=1)
    return merge_heads(dq), dbag


def cap_pool(config: AttentionConfig, params: ParamStore, query, bag, prefix: str = "attn.") -> PoolResult:
    """Pool one bag (``(n, D)``) against one query (``(D,)`` or ``(1, D)``).

    Batched inputs (``(B, D)`` with ``(B, n, D)``) are passed through as is.
    """
    query = np.asarray(query, dtype=np.float64)
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim == 2:
        res, _ = cap_pool_forward(config, params, query.reshape(1, -1), bag[None], prefix)
        w = None if res.weights is None else res.weights[0]
        return PoolResult(res.v_t, res.v_q, w)
    return cap_pool_forward(config, params, query, bag, prefix)[0]


# ----------------------------------------------------------------------------
# single-head conveniences


def pool_baseline(bag, kind: str):
    bag = np.asarray(bag, dtype=np.float64)
    if bag.shape[0] < 1:
        raise ShapeError("empty bag")
    if kind == "mean":
        return bag.mean(axis=0, keepdims=True)
    if kind == "max":
        return bag.max(axis=0, keepdims=True)
    raise ConfigError(f"pool_baseline: unknown kind {kind!r}")


def _single_head(kind, q, bag, params):
    q = np.asarray(q, dtype=np.float64).reshape(1, 1, -1)
    t = np.asarray(bag, dtype=np.float64)[None, None]
    forward, _ = _KERNELS[kind]
    vt, vq, w, _ = forward(q, t, params, "")
    return w[0, 0], vt[0], vq[0]


def dba_pool(q, bag, beta: float, norm: str = "l2"):
    """One head of distance-based attention; returns ``(weights, pooled)``."""
    if beta <= 0:
        raise ConfigError("beta must be positive")
    params = ParamStore()
    params.add("beta_raw", [beta + math.log(-math.expm1(-beta))])
    w, vt, _ = _single_head("dba_" + norm, q, bag, params)
    return w, vt


def vema_pool(q, bag, R, S, bR=None):
    """One head of variance-excited attention; returns ``(weights, pooled, gated_query)``."""
    R = np.asarray(R, dtype=np.float64)
    params = ParamStore()
    params.add("R", R[None])
    params.add("S", np.asarray(S, dtype=np.float64)[None])
    params.add("bR", (np.zeros(R.shape[1]) if bR is None else np.asarray(bR))[None])
    return _single_head("vema", q, bag, params)


def mhsce_pool(q, bag, W1, W2):
    """One head of squeeze-excitation pooling; returns ``(weights, v_t, v_q)``."""
    W1 = np.asarray(W1, dtype=np.float64)
    W2 = np.asarray(W2, dtype=np.float64)
    dh = np.shape(q)[-1]
    if W1.shape[1] != dh or W2.shape != (dh, W1.shape[0]):
        raise ShapeError(f"mhsce_pool: W1{W1.shape}, W2{W2.shape} do not fit width {dh}")
    params = ParamStore()
    params.add("W1", W1[None])
    params.add("W2", W2[None])
    return _single_head("mhsce", q, bag, params)
