"""Siamese multi-instance verification network.

The forward pass pushes the query and the four bag embeddings through one
shared feature transform, pools the bag against the query, and scores the
pair with a small comparison head::

    x -> affine -> batch norm -> relu -> affine -> group norm   (shared, width 512)
    (V_Q, V_T) = cap_pool(query, bag)
    [|V_Q - V_T|, V_Q * V_T] -> affine -> relu -> dropout -> affine -> sigmoid

Dropout sits in the comparison head rather than in the shared transform: a
dropout layer feeding the group norm makes the normalizer see a noisier
signal in training than in evaluation, and the resulting scale shift throws
eval-mode probabilities off the 0.5 threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import AttentionConfig, canonical_order, cap_pool_backward, cap_pool_forward, \
    init_attention_params
from .errors import ParameterError, ShapeError

HIDDEN = 1024
HEAD_HIDDEN = 256
DROPOUT = 0.3
BACKBONE_DIMS = {"vit": 768, "resnet50": 2048, "efficientnet_b5": 2048, "convnext": 1024}


@dataclass
class MIVModel:
    config: AttentionConfig
    input_dim: int
    params: nx.ParamStore
    bn: nx.RunningStats
    hidden: int = HIDDEN
    head_hidden: int = HEAD_HIDDEN
    dropout: float = DROPOUT
    meta: dict = field(default_factory=dict)

    @property
    def model_dim(self) -> int:
        return self.config.model_dim

    @property
    def gn_groups(self) -> int:
        return nx.default_groups(self.model_dim)

    def copy(self) -> "MIVModel":
        return MIVModel(self.config, self.input_dim, self.params.copy(),
                        nx.RunningStats(self.bn.mean.copy(), self.bn.var.copy(), self.bn.momentum),
                        self.hidden, self.head_hidden, self.dropout, dict(self.meta))


def init_model(input_dim: int, config: AttentionConfig, seed: int = 0, hidden: int = HIDDEN,
               head_hidden: int = HEAD_HIDDEN, dropout: float = DROPOUT) -> MIVModel:
    """Variance-scaled random initialization, deterministic given ``seed``."""
    if input_dim <= 0 or hidden <= 0 or head_hidden <= 0:
        raise ParameterError("layer widths must be positive")
    if not 0.0 <= dropout < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {dropout}")
    rng = nx.make_rng(seed)
    m = config.model_dim
    p = nx.ParamStore()
    p.add("ft.W1", rng.normal(0.0, math.sqrt(2.0 / input_dim), (input_dim, hidden)))
    p.add("ft.b1", np.zeros(hidden), no_decay=True)
    p.add("ft.bn_gamma", np.ones(hidden), no_decay=True)
    p.add("ft.bn_beta", np.zeros(hidden), no_decay=True)
    p.add("ft.W2", rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, m)))
    p.add("ft.b2", np.zeros(m), no_decay=True)
    p.add("ft.gn_gamma", np.ones(m), no_decay=True)
    p.add("ft.gn_beta", np.zeros(m), no_decay=True)
    init_attention_params(config, p, rng)
    p.add("head.W1", rng.normal(0.0, math.sqrt(2.0 / (2 * m)), (2 * m, head_hidden)))
    p.add("head.b1", np.zeros(head_hidden), no_decay=True)
    p.add("head.W2", rng.normal(0.0, math.sqrt(1.0 / head_hidden), (head_hidden, 1)))
    p.add("head.b2", np.zeros(1), no_decay=True)
    return MIVModel(config, input_dim, p, nx.RunningStats.zeros(hidden), hidden, head_hidden, dropout)


# ----------------------------------------------------------------------------
# feature transform


def _transform_forward(model: MIVModel, x, mode: str, rng):
    p = model.params
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"feature transform expects (n, {model.input_dim}), got {x.shape}")
    z1 = nx.affine(x, p["ft.W1"], p["ft.b1"])
    n1, bn_cache = nx.batch_norm(z1, p["ft.bn_gamma"], p["ft.bn_beta"], mode, model.bn)
    a1 = nx.relu(n1)
    z2 = nx.affine(a1, p["ft.W2"], p["ft.b2"])
    out, gn_cache = nx.group_norm(z2, p["ft.gn_gamma"], p["ft.gn_beta"], model.gn_groups)
    return out, (x, bn_cache, n1, a1, gn_cache)


def _transform_backward(model: MIVModel, dout, cache):
    p = model.params
    x, bn_cache, n1, a1, gn_cache = cache
    dz2, dg, db = nx.group_norm_backward(dout, gn_cache)
    p.accumulate("ft.gn_gamma", dg)
    p.accumulate("ft.gn_beta", db)
    da1, dW2, db2 = nx.affine_backward(dz2, a1, p["ft.W2"])
    p.accumulate("ft.W2", dW2)
    p.accumulate("ft.b2", db2)
    dn1 = nx.relu_backward(da1, n1)
    dz1, dg, db = nx.batch_norm_backward(dn1, bn_cache)
    p.accumulate("ft.bn_gamma", dg)
    p.accumulate("ft.bn_beta", db)
    dx, dW1, db1 = nx.affine_backward(dz1, x, p["ft.W1"])
    p.accumulate("ft.W1", dW1)
    p.accumulate("ft.b1", db1)
    return dx


def feature_transform(model: MIVModel, x, mode: str = "eval", rng=None):
    """Map ``(n, input_dim)`` embeddings to ``(n, 512)``."""
    return _transform_forward(model, x, mode, rng)[0]


# ----------------------------------------------------------------------------
# full network


@dataclass
class ForwardTrace:
    probs: np.ndarray
    weights: np.ndarray | None
    caches: tuple


def stack_exemplars(exemplars):
    """``(queries (B, D), bags (B, n, D), labels (B,))`` from a list of exemplars."""
    if len(exemplars) == 0:
        raise ParameterError("empty exemplar batch")
    queries = np.stack([np.asarray(e.query, dtype=np.float64).reshape(-1) for e in exemplars])
    bags = np.stack([np.asarray(e.bag, dtype=np.float64) for e in exemplars])
    labels = np.array([float(e.label) for e in exemplars])
    return queries, bags, labels


def forward_arrays(model: MIVModel, queries, bags, mode: str = "eval", rng=None):
    """Batched forward pass; returns ``(probabilities (B,), ForwardTrace)``."""
    queries = np.asarray(queries, dtype=np.float64)
    bags = np.asarray(bags, dtype=np.float64)
    if queries.ndim != 2 or bags.ndim != 3 or bags.shape[0] != queries.shape[0] \
            or bags.shape[2] != queries.shape[1]:
        raise ShapeError(f"forward: queries {queries.shape} incompatible with bags {bags.shape}")
    if mode == "train" and model.dropout > 0 and rng is None:
        raise ParameterError("train mode with dropout needs an rng")
    B, n, D = bags.shape
    # canonical bag order up front keeps every downstream reduction order-free
    order = canonical_order(bags)
    sbags = np.take_along_axis(bags, order[:, :, None], axis=1)
    x = np.concatenate([queries, sbags.reshape(B * n, D)], axis=0)
    f, ft_cache = _transform_forward(model, x, mode, rng)
    fq, fb = f[:B], f[B:].reshape(B, n, -1)
    pool, pool_cache = cap_pool_forward(model.config, model.params, fq, fb)
    diff = pool.v_q - pool.v_t
    feats = np.concatenate([np.abs(diff), pool.v_q * pool.v_t], axis=1)
    p = model.params
    h1 = nx.affine(feats, p["head.W1"], p["head.b1"])
    r1 = nx.relu(h1)
    r1d, hmask = nx.dropout(r1, model.dropout, mode, rng)
    logit = nx.affine(r1d, p["head.W2"], p["head.b2"])
    probs = nx.sigmoid(logit)[:, 0]
    weights = None
    if pool.weights is not None:
        weights = np.empty_like(pool.weights)
        idx = np.broadcast_to(order[:, None, :], weights.shape)
        np.put_along_axis(weights, idx, pool.weights, axis=2)
    caches = (order, ft_cache, pool_cache, pool, diff, feats, h1, r1d, hmask, probs, (B, n, D))
    return probs, ForwardTrace(probs, weights, caches)


def backward(model: MIVModel, trace: ForwardTrace, dprobs):
    """Accumulate parameter gradients for upstream ``dprobs``; returns ``(dqueries, dbags)``."""
    order, ft_cache, pool_cache, pool, diff, feats, h1, r1, hmask, probs, (B, n, D) = trace.caches
    p = model.params
    dlogit = (np.asarray(dprobs, dtype=np.float64) * probs * (1.0 - probs))[:, None]
    dr1, dW, db = nx.affine_backward(dlogit, r1, p["head.W2"])
    p.accumulate("head.W2", dW)
    p.accumulate("head.b2", db)
    dh1 = nx.relu_backward(nx.dropout_backward(dr1, hmask), h1)
    dfeats, dW, db = nx.affine_backward(dh1, feats, p["head.W1"])
    p.accumulate("head.W1", dW)
    p.accumulate("head.b1", db)
    m = pool.v_q.shape[1]
    dabs, dprod = dfeats[:, :m], dfeats[:, m:]
    ddiff = dabs * np.sign(diff)
    dvq = ddiff + dprod * pool.v_t
    dvt = -ddiff + dprod * pool.v_q
    dfq, dfb = cap_pool_backward(dvt, dvq, pool_cache, p)
    df = np.concatenate([dfq, dfb.reshape(B * n, -1)], axis=0)
    dx = _transform_backward(model, df, ft_cache)
    dq = dx[:B]
    dsb = dx[B:].reshape(B, n, D)
    dbags = np.empty_like(dsb)
    np.put_along_axis(dbags, order[:, :, None], dsb, axis=1)
    return dq, dbags


def forward(model: MIVModel, exemplar, mode: str = "eval", rng=None):
    """Probability that ``exemplar.query`` matches some instance of ``exemplar.bag``."""
    q, bags, _ = stack_exemplars([exemplar])
    probs, trace = forward_arrays(model, q, bags, mode, rng)
    return float(probs[0]), trace


def loss_arrays(model: MIVModel, queries, bags, labels, mode: str = "train", rng=None) -> float:
    """Mean BCE over the batch; gradients are accumulated into ``model.params``."""
    probs, trace = forward_arrays(model, queries, bags, mode, rng)
    loss = nx.bce_loss(probs, labels)
    if not np.isfinite(loss):
        raise nx.NumericalFailure("non-finite training loss")
    backward(model, trace, nx.bce_loss_backward(probs, labels))
    return loss


def loss_batch(model: MIVModel, exemplars, mode: str = "train", rng=None) -> float:
    if len(exemplars) == 0:
        raise ParameterError("empty exemplar batch")
    if mode == "train" and len(exemplars) < 2:
        raise ParameterError("train-mode batches need at least 2 exemplars")
    q, bags, labels = stack_exemplars(exemplars)
    return loss_arrays(model, q, bags, labels, mode, rng)


def predict_proba(model: MIVModel, queries, bags, chunk: int = 512):
    """Eval-mode probabilities for many exemplars, in chunks."""
    out = [forward_arrays(model, queries[i:i + chunk], bags[i:i + chunk], "eval")[0]
           for i in range(0, len(queries), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def predict(probability, threshold: float = 0.5):
    """Thresholded decision; ties at the threshold count as a match."""
    p = np.asarray(probability, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ParameterError("probabilities must lie in [0, 1]")
    out = p >= threshold
    return bool(out) if out.ndim == 0 else out
