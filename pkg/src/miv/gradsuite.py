"""Finite-difference verification of every hand-written backward pass.

Three tiers, each with its own tolerance on the relative error
``|analytic - numeric| / max(1, |analytic|, |numeric|)``:

* single layers and losses (1e-6),
* every pooling kernel at every head count (1e-6),
* composed networks: the full verification model per pooling kind and
  head count, and the projection head under NT-Xent (1e-4).

Each check reads its inputs out of a :class:`~miv.numerics.ParamStore`
so that inputs and weights are probed alike.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import HEAD_GRID, KINDS, AttentionConfig, cap_pool_backward, cap_pool_forward, \
    init_attention_params
from .contrastive import contrastive_loss, init_projection_head, make_views, nt_xent_core, \
    SimCLRConfig
from .model import init_model, loss_arrays

LAYER_TOL = 1e-6
COMPOSED_TOL = 1e-4


@dataclass
class SuiteEntry:
    name: str
    report: nx.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def __str__(self):
        return f"{self.name:<28} {self.report}"


def _store(rng, **arrays) -> nx.ParamStore:
    p = nx.ParamStore()
    for k, v in arrays.items():
        p.add(k, v)
    return p


def _readout(shape, rng):
    return rng.standard_normal(shape)


def layer_checks(seed: int = 0):
    """``(name, f, params)`` triples for every single layer and loss."""
    rng = nx.make_rng(seed)
    checks = []

    def away_from_zero(shape):
        x = rng.standard_normal(shape)
        return x + 0.2 * np.sign(x)

    # affine
    p = _store(rng, x=rng.standard_normal((5, 4)), W=rng.standard_normal((4, 3)), b=rng.standard_normal(3))
    R = _readout((5, 3), rng)

    def f_affine(p, R=R):
        y = nx.affine(p["x"], p["W"], p["b"])
        dx, dW, db = nx.affine_backward(R, p["x"], p["W"])
        p.accumulate("x", dx), p.accumulate("W", dW), p.accumulate("b", db)
        return float((y * R).sum())
    checks.append(("affine", f_affine, p))

    # pointwise activations
    for kind in ("relu", "sigmoid", "softmax_rows"):
        p = _store(rng, x=away_from_zero((4, 6)))
        R = _readout((4, 6), rng)

        def f_act(p, R=R, kind=kind):
            y = nx.activation(p["x"], kind)
            p.accumulate("x", nx.activation_backward(R, p["x"], y, kind))
            return float((y * R).sum())
        checks.append((kind, f_act, p))

    # batch norm (training statistics)
    p = _store(rng, x=rng.standard_normal((6, 5)), gamma=1 + 0.1 * rng.standard_normal(5),
               beta=rng.standard_normal(5))
    R = _readout((6, 5), rng)

    def f_bn(p, R=R):
        y, cache = nx.batch_norm(p["x"], p["gamma"], p["beta"], "train", nx.RunningStats.zeros(5))
        dx, dg, db = nx.batch_norm_backward(R, cache)
        p.accumulate("x", dx), p.accumulate("gamma", dg), p.accumulate("beta", db)
        return float((y * R).sum())
    checks.append(("batch_norm", f_bn, p))

    # group norm
    p = _store(rng, x=rng.standard_normal((3, 8)), gamma=1 + 0.1 * rng.standard_normal(8),
               beta=rng.standard_normal(8))
    R = _readout((3, 8), rng)

    def f_gn(p, R=R):
        y, cache = nx.group_norm(p["x"], p["gamma"], p["beta"], 2)
        dx, dg, db = nx.group_norm_backward(R, cache)
        p.accumulate("x", dx), p.accumulate("gamma", dg), p.accumulate("beta", db)
        return float((y * R).sum())
    checks.append(("group_norm", f_gn, p))

    # dropout with a frozen mask
    p = _store(rng, x=rng.standard_normal((4, 5)))
    R = _readout((4, 5), rng)

    def f_drop(p, R=R):
        y, mask = nx.dropout(p["x"], 0.3, "train", nx.make_rng(seed + 1))
        p.accumulate("x", nx.dropout_backward(R, mask))
        return float((y * R).sum())
    checks.append(("dropout", f_drop, p))

    # l2 normalization
    p = _store(rng, x=rng.standard_normal((4, 5)))
    R = _readout((4, 5), rng)

    def f_l2(p, R=R):
        y = nx.l2_normalize(p["x"])
        p.accumulate("x", nx.l2_normalize_backward(R, p["x"], y))
        return float((y * R).sum())
    checks.append(("l2_normalize", f_l2, p))

    # binary cross-entropy
    labels = rng.integers(0, 2, 7).astype(float)
    p = _store(rng, p=rng.uniform(0.05, 0.95, 7))

    def f_bce(p, y=labels):
        p.accumulate("p", nx.bce_loss_backward(p["p"], y))
        return nx.bce_loss(p["p"], y)
    checks.append(("bce_loss", f_bce, p))

    # NT-Xent on raw rows, and composed with the unit-norm projection
    for tau in (0.1, 0.5):
        p = _store(rng, z=rng.standard_normal((8, 6)))

        def f_nt(p, tau=tau):
            loss, dz = nt_xent_core(p["z"], tau)
            p.accumulate("z", dz)
            return loss
        checks.append((f"nt_xent(tau={tau})", f_nt, p))

        p = _store(rng, x=rng.standard_normal((8, 6)))

        def f_nt_unit(p, tau=tau):
            z = nx.l2_normalize(p["x"])
            loss, dz = nt_xent_core(z, tau)
            p.accumulate("x", nx.l2_normalize_backward(dz, p["x"], z))
            return loss
        checks.append((f"l2+nt_xent(tau={tau})", f_nt_unit, p))
    return checks


def kernel_checks(seed: int = 0, model_dim: int = 64, batch: int = 3, bag: int = 4):
    """One check per pooling kind and head count, probing query, bag and kernel weights."""
    checks = []
    for kind in KINDS:
        for heads in HEAD_GRID:
            cfg = AttentionConfig(kind, heads, model_dim)
            rng = nx.make_rng(nx.derive_seed(seed, KINDS.index(kind), heads))
            p = _store(rng, query=rng.standard_normal((batch, model_dim)),
                       bag=rng.standard_normal((batch, bag, model_dim)))
            init_attention_params(cfg, p, rng)
            if kind in ("dba_l1", "dba_l2"):
                p.values["attn.beta_raw"] += 0.3 * rng.standard_normal(heads)
            Rt, Rq = _readout((batch, model_dim), rng), _readout((batch, model_dim), rng)

            def f(p, cfg=cfg, Rt=Rt, Rq=Rq):
                res, cache = cap_pool_forward(cfg, p, p["query"], p["bag"])
                dq, db = cap_pool_backward(Rt, Rq, cache, p)
                p.accumulate("query", dq)
                p.accumulate("bag", db)
                return float((res.v_t * Rt).sum() + (res.v_q * Rq).sum())
            checks.append((f"pool {kind}(h={heads})", f, p))
    return checks


def model_checks(seed: int = 0, heads=HEAD_GRID, model_dim: int = 64):
    """Full verification model (train mode, frozen dropout masks) per kind and head count."""
    checks = []
    for kind in KINDS:
        for h in heads:
            cfg = AttentionConfig(kind, h, model_dim)
            s = nx.derive_seed(seed, 100 + KINDS.index(kind), h)
            rng = nx.make_rng(s)
            m = init_model(12, cfg, seed=s, hidden=16, head_hidden=8, dropout=0.3)
            Q = rng.standard_normal((6, 12))
            B = rng.standard_normal((6, 4, 12))
            y = np.array([1, 0, 1, 0, 1, 0], dtype=float)

            def f(p, m=m, Q=Q, B=B, y=y, s=s):
                return loss_arrays(m, Q, B, y, "train", nx.make_rng(s))
            checks.append((f"model {kind}(h={h})", f, m.params))
    return checks


def projection_checks(seed: int = 0):
    rng = nx.make_rng(seed)
    head = init_projection_head(6, seed=seed, hidden=16, out_dim=8)
    cfg = SimCLRConfig(temperature=0.2)
    views = make_views(rng.standard_normal((4, 6)), rng, cfg)

    def f(p):
        return contrastive_loss(head, views, cfg.temperature)
    return [("projection+nt_xent", f, head.params)]


def run_suite(seed: int = 0, max_entries: int | None = 24, heads=HEAD_GRID, progress=None):
    """Run every tier; returns ``(entries, seconds)``.

    ``max_entries`` caps the probed entries per slot in the composed tier;
    the layer and kernel tiers are always probed exhaustively.
    """
    start = time.perf_counter()
    entries = []
    tiers = [(layer_checks(seed), LAYER_TOL, None), (kernel_checks(seed), LAYER_TOL, None),
             (model_checks(seed, heads), COMPOSED_TOL, max_entries),
             (projection_checks(seed), COMPOSED_TOL, max_entries)]
    for checks, tol, cap in tiers:
        for name, f, params in checks:
            entry = SuiteEntry(name, nx.grad_check(f, params, tol=tol, max_entries=cap, seed=seed))
            entries.append(entry)
            if progress:
                progress(entry)
    return entries, time.perf_counter() - start
