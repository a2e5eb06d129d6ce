"""Contrastive pretraining of an embedding space on vector-valued views.

A projection head (affine -> batch norm -> relu -> affine -> l2 normalize)
is trained so that two randomly perturbed copies of the same source vector
land close together on the unit sphere while copies of different sources
are pushed apart, via the NT-Xent loss. The perturbations here act on
embedding vectors (jitter, channel masking, rescaling) rather than pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .errors import InsufficientDataError, ParameterError, ShapeError, ValidationError
from .optim import LARS, AdamW
from .training import epochs_since_improvement

PROJ_HIDDEN = 2048
PROJ_DIM = 512
REFERENCE_BATCH = 64
UNIT_TOL = 1e-6


# ----------------------------------------------------------------------------
# configuration and schedule


@dataclass(frozen=True)
class SimCLRConfig:
    """Pretraining hyperparameters.

    ``temperature`` defaults to 0.1: at 0.5 the loss floor for 64 views is
    above half of a typical starting loss, so halving it is out of reach.
    """

    optimizer: str = "lars"
    base_lr: float = 0.3
    weight_decay: float = 1e-6
    momentum: float = 0.9
    trust_eta: float = 1e-3
    warmup_epochs: int = 10
    total_epochs: int = 200
    min_lr: float = 1e-5
    batch_size: int = 64
    temperature: float = 0.1
    patience: int = 20
    min_delta: float = 1e-5
    seed: int = 0
    jitter: float = 0.1
    mask_fraction: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    hidden: int = PROJ_HIDDEN
    out_dim: int = PROJ_DIM

    def __post_init__(self):
        if self.optimizer not in ("lars", "adamw"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ParameterError("warmup_epochs must lie in [0, total_epochs)")
        if self.total_epochs > 200:
            raise ParameterError("total_epochs is capped at 200")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ParameterError("batch_size must be even and at least 2 (paired views)")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ParameterError("need 0 <= min_lr <= base_lr and base_lr > 0")
        if self.patience < 1:
            raise ParameterError("patience must be positive")
        _check_strengths(self.jitter, self.mask_fraction, self.scale_range)

    @classmethod
    def for_backbone(cls, backbone: str, **overrides) -> "SimCLRConfig":
        """AdamW for the transformer preset, LARS for the convolutional ones."""
        if backbone == "vit":
            base = cls(optimizer="adamw", base_lr=3e-4, weight_decay=0.05)
        else:
            base = cls()
        return replace(base, **overrides)

    @property
    def scaled_lr(self) -> float:
        """Base rate scaled linearly with batch size relative to 64."""
        return self.base_lr * self.batch_size / REFERENCE_BATCH

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimCLRConfig":
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


def warmup_cosine_lr(epoch: int, config: SimCLRConfig) -> float:
    """Linear warmup to the (batch-scaled) base rate, then cosine decay to ``min_lr``.

    Warmup epoch ``e`` gets ``base * (e + 1) / warmup`` so the last warmup
    epoch sits exactly on the base rate; the cosine is indexed so the last
    epoch sits exactly on ``min_lr``.
    """
    total, warm = config.total_epochs, config.warmup_epochs
    if not 0 <= epoch < total:
        raise ParameterError(f"epoch {epoch} outside [0, {total})")
    base = config.scaled_lr
    if epoch < warm:
        return base * (epoch + 1) / warm
    span = total - warm - 1
    if span == 0:
        return config.min_lr
    cos = 0.5 * (1.0 + math.cos(math.pi * (epoch - warm) / span))
    return config.min_lr + (base - config.min_lr) * cos


# ----------------------------------------------------------------------------
# augmentation


def _check_strengths(jitter, mask_fraction, scale_range):
    if jitter < 0 or mask_fraction < 0:
        raise ParameterError("augmentation strengths must be non-negative")
    if mask_fraction >= 1:
        raise ParameterError("mask fraction must be below 1")
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ParameterError("scale range must satisfy 0 < low <= high")


@dataclass
class ViewPair:
    source_id: int
    first: np.ndarray
    second: np.ndarray


def _augment(x, rng, jitter, mask_fraction, scale_range):
    """Independent augmentation of each row of ``x``."""
    n, d = x.shape
    out = x.copy()
    if jitter:
        out += jitter * rng.standard_normal((n, d))
    n_mask = int(round(mask_fraction * d))
    if n_mask:
        for i in range(n):
            out[i, rng.choice(d, n_mask, replace=False)] = 0.0
    lo, hi = scale_range
    if hi > lo:
        out *= rng.uniform(lo, hi, (n, 1))
    elif lo != 1.0:
        out *= lo
    return out


def augment_views(x, rng, jitter: float = 0.1, mask_fraction: float = 0.1,
                  scale_range=(0.9, 1.1), source_id: int = 0) -> ViewPair:
    """Two independently perturbed copies of one embedding.

    Each copy gets Gaussian jitter of std ``jitter``, then exactly
    ``round(mask_fraction * d)`` channels zeroed (chosen without
    replacement), then a uniform rescaling from ``scale_range``.
    """
    _check_strengths(jitter, mask_fraction, scale_range)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    both = _augment(np.repeat(x, 2, axis=0), rng, jitter, mask_fraction, scale_range)
    return ViewPair(source_id, both[0], both[1])


def make_views(sources, rng, config: SimCLRConfig) -> np.ndarray:
    """Rows ``2i`` and ``2i+1`` are the two views of source row ``i``."""
    sources = np.asarray(sources, dtype=np.float64)
    return _augment(np.repeat(sources, 2, axis=0), rng, config.jitter, config.mask_fraction,
                    config.scale_range)


# ----------------------------------------------------------------------------
# loss


def _check_unit_rows(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise ShapeError(f"expected an even number (>= 2) of rows, got shape {z.shape}")
    norms = np.linalg.norm(z, axis=1)
    if np.max(np.abs(norms - 1.0)) > UNIT_TOL:
        raise ValidationError("NT-Xent inputs must be unit-norm rows")
    return z


def nt_xent_with_grad(z, tau: float = 0.1):
    """NT-Xent loss over view pairs ``(2i, 2i+1)`` and its gradient w.r.t. ``z``.

    For anchor ``a`` with partner ``p``, the loss term is the cross-entropy of
    picking ``p`` among all other rows under logits ``z_a . z_b / tau``; the
    result is the mean over all anchors.
    """
    if tau <= 0:
        raise ParameterError("temperature must be positive")
    return nt_xent_core(_check_unit_rows(z), tau)


def nt_xent_core(z, tau: float):
    """:func:`nt_xent_with_grad` without the unit-norm precondition.

    The formula and its gradient are well defined for any rows; finite
    differences need this form since a perturbed row is no longer unit-norm.
    """
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    partner = np.arange(m) ^ 1
    logits = z @ z.T / tau
    np.fill_diagonal(logits, -np.inf)
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    denom = e.sum(axis=1, keepdims=True)
    log_prob = logits - shift - np.log(denom)
    loss = -float(np.mean(log_prob[np.arange(m), partner]))
    g = e / denom
    g[np.arange(m), partner] -= 1.0
    g /= m
    dz = (g + g.T) @ z / tau
    return loss, dz


def nt_xent(z, tau: float = 0.1) -> float:
    return nt_xent_with_grad(z, tau)[0]


# ----------------------------------------------------------------------------
# projection head


@dataclass
class ProjectionHead:
    input_dim: int
    params: nx.ParamStore
    bn: nx.RunningStats
    hidden: int = PROJ_HIDDEN
    out_dim: int = PROJ_DIM
    meta: dict = field(default_factory=dict)


def init_projection_head(input_dim: int, seed: int = 0, hidden: int = PROJ_HIDDEN,
                         out_dim: int = PROJ_DIM) -> ProjectionHead:
    if min(input_dim, hidden, out_dim) <= 0:
        raise ParameterError("layer widths must be positive")
    rng = nx.make_rng(seed)
    p = nx.ParamStore()
    p.add("proj.W1", rng.normal(0.0, math.sqrt(2.0 / input_dim), (input_dim, hidden)))
    p.add("proj.b1", np.zeros(hidden), no_decay=True)
    p.add("proj.bn_gamma", np.ones(hidden), no_decay=True)
    p.add("proj.bn_beta", np.zeros(hidden), no_decay=True)
    p.add("proj.W2", rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, out_dim)))
    p.add("proj.b2", np.zeros(out_dim), no_decay=True)
    return ProjectionHead(input_dim, p, nx.RunningStats.zeros(hidden), hidden, out_dim)


def project_forward(head: ProjectionHead, x, mode: str = "eval"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.input_dim:
        raise ShapeError(f"projection head expects (n, {head.input_dim}), got {x.shape}")
    p = head.params
    z1 = nx.affine(x, p["proj.W1"], p["proj.b1"])
    n1, bn_cache = nx.batch_norm(z1, p["proj.bn_gamma"], p["proj.bn_beta"], mode, head.bn)
    a1 = nx.relu(n1)
    z2 = nx.affine(a1, p["proj.W2"], p["proj.b2"])
    out = nx.l2_normalize(z2)
    return out, (x, bn_cache, n1, a1, z2, out)


def project_backward(head: ProjectionHead, dout, cache):
    """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
    x, bn_cache, n1, a1, z2, out = cache
    p = head.params
    dz2 = nx.l2_normalize_backward(dout, z2, out)
    da1, dW, db = nx.affine_backward(dz2, a1, p["proj.W2"])
    p.accumulate("proj.W2", dW)
    p.accumulate("proj.b2", db)
    dz1, dg, dbeta = nx.batch_norm_backward(nx.relu_backward(da1, n1), bn_cache)
    p.accumulate("proj.bn_gamma", dg)
    p.accumulate("proj.bn_beta", dbeta)
    dx, dW, db = nx.affine_backward(dz1, x, p["proj.W1"])
    p.accumulate("proj.W1", dW)
    p.accumulate("proj.b1", db)
    return dx


def project(head: ProjectionHead, x, mode: str = "eval") -> np.ndarray:
    """Unit-norm ``(n, out_dim)`` projections of ``(n, input_dim)`` embeddings."""
    return project_forward(head, x, mode)[0]


def embed_with_head(head: ProjectionHead, x, chunk: int = 1024) -> np.ndarray:
    """Eval-mode projections, computed in chunks; these become MIV inputs."""
    x = np.asarray(x, dtype=np.float64)
    parts = [project(head, x[i:i + chunk], "eval") for i in range(0, len(x), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, head.out_dim))


def contrastive_loss(head: ProjectionHead, views, tau: float, mode: str = "train") -> float:
    """Project paired views, score them with NT-Xent and accumulate gradients."""
    z, cache = project_forward(head, views, mode)
    loss, dz = nt_xent_with_grad(z, tau)
    project_backward(head, dz, cache)
    return loss


# ----------------------------------------------------------------------------
# training loop


@dataclass
class PretrainResult:
    head: ProjectionHead
    history: list
    learning_rates: list
    stopped_early: bool

    def to_dict(self) -> dict:
        return {"history": self.history, "learning_rates": self.learning_rates,
                "stopped_early": self.stopped_early, "epochs_run": len(self.history)}


def make_optimizer(params: nx.ParamStore, config: SimCLRConfig):
    if config.optimizer == "lars":
        return LARS(params, config.weight_decay, config.momentum, config.trust_eta)
    return AdamW(params, weight_decay=config.weight_decay)


def pretrain(embeddings, config: SimCLRConfig = SimCLRConfig(), head: ProjectionHead | None = None,
             progress=None) -> PretrainResult:
    """Train a projection head with NT-Xent on augmented view pairs.

    Each epoch shuffles the sources, cuts them into groups of
    ``batch_size // 2`` (a trailing partial group is dropped), builds two
    views per source and takes one optimizer step per group. Training stops
    early once the epoch-mean loss has not improved for ``patience`` epochs.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected an (n, d) embedding matrix, got {x.shape}")
    if len(x) < config.batch_size:
        raise InsufficientDataError(f"need at least {config.batch_size} sources, got {len(x)}")
    if head is None:
        head = init_projection_head(x.shape[1], nx.derive_seed(config.seed, 0), config.hidden,
                                    config.out_dim)
    rng = nx.make_rng(nx.derive_seed(config.seed, 1))
    opt = make_optimizer(head.params, config)
    per_batch = config.batch_size // 2
    history, lrs = [], []
    stopped = False
    for epoch in range(config.total_epochs):
        lr = warmup_cosine_lr(epoch, config)
        perm = rng.permutation(len(x))
        losses = []
        for i in range(0, len(x) - per_batch + 1, per_batch):
            views = make_views(x[perm[i:i + per_batch]], rng, config)
            head.params.zero_grad()
            loss = contrastive_loss(head, views, config.temperature)
            if not np.isfinite(loss):
                raise nx.NumericalFailure(f"non-finite contrastive loss at epoch {epoch}")
            opt.step(lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        lrs.append(lr)
        if progress:
            progress(epoch, history[-1], lr)
        if epochs_since_improvement(history, config.min_delta) >= config.patience:
            stopped = True
            break
    return PretrainResult(head, history, lrs, stopped)


def clustered_sources(n: int = 512, dim: int = 256, clusters: int = 16, spread: float = 0.5,
                      seed: int = 0) -> np.ndarray:
    """Synthetic source embeddings: Gaussian blobs around random unit-scale centres."""
    if n < 1 or dim < 1 or clusters < 1 or spread < 0:
        raise ParameterError("invalid clustered-source settings")
    rng = nx.make_rng(seed)
    centres = rng.standard_normal((clusters, dim))
    labels = rng.integers(0, clusters, n)
    return centres[labels] + spread * rng.standard_normal((n, dim))
