"""Fold training, cross-validation over an attention grid, and evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .attention import KINDS, AttentionConfig
from .bagdata import SplitExemplars, SplitPlan, validate_split
from .errors import ParameterError, ValidationError
from .model import MIVModel, init_model, loss_arrays, predict_proba, stack_exemplars
from .optim import RMSprop

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr0: float = 1e-4
    patience: int = 10
    k: int = 10
    batch_size: int = 64
    threshold: float = 0.5
    seed: int = 0
    lr_factor: float = 0.5
    lr_patience: int = 5
    min_lr: float = 1e-6
    min_delta: float = 1e-5

    def __post_init__(self):
        for name in ("epochs", "patience", "k", "batch_size", "lr_patience"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.epochs > 50:
            raise ParameterError("epochs is capped at 50")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be at least 2")
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError("threshold must lie in (0, 1)")
        if self.lr0 <= 0 or self.min_lr <= 0 or not 0 < self.lr_factor < 1:
            raise ParameterError("invalid learning-rate settings")


# ----------------------------------------------------------------------------
# metrics


def compute_auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ParameterError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC is undefined without both positive and negative labels")
    ranks = rankdata(scores)  # midranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int

    def confusion_matrix(self) -> np.ndarray:
        """Rows are the true label (match, no match), columns the prediction."""
        return np.array([[self.tp, self.fn], [self.fp, self.tn]])

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "auc": self.auc, "tp": self.tp, "fp": self.fp,
                "tn": self.tn, "fn": self.fn, "n": self.n}

    def __str__(self):
        return (f"acc {100 * self.accuracy:.2f}%  AUC {self.auc:.3f}  "
                f"TP {self.tp}  FN {self.fn}  FP {self.fp}  TN {self.tn}")


def metrics_from_scores(scores, labels, threshold: float = 0.5) -> Metrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.size == 0:
        raise ParameterError("cannot score an empty set")
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    tn = int(np.sum(~pred & ~labels))
    fn = int(np.sum(~pred & labels))
    try:
        auc = compute_auc(scores, labels)
    except ValidationError:
        auc = float("nan")
    return Metrics((tp + tn) / scores.size, auc, tp, fp, tn, fn, int(scores.size))


def evaluate(model: MIVModel, exemplars, threshold: float = 0.5) -> Metrics:
    """Eval-mode scoring of ``exemplars`` at a fixed threshold."""
    if len(exemplars) == 0:
        raise ParameterError("empty test set")
    q, bags, y = stack_exemplars(exemplars)
    return metrics_from_scores(predict_proba(model, q, bags), y, threshold)


# ----------------------------------------------------------------------------
# schedules


def epochs_since_improvement(history, min_delta: float = 1e-5) -> int:
    best = np.inf
    bad = 0
    for loss in history:
        if loss < best - min_delta:
            best = loss
            bad = 0
        else:
            bad += 1
    return bad


def schedule_lr(history, lr: float, factor: float = 0.5, patience: int = 5,
                min_lr: float = 1e-6, min_delta: float = 1e-5) -> float:
    """Plateau rule: shrink ``lr`` by ``factor`` after every ``patience`` epochs without improvement."""
    if len(history) == 0:
        raise ParameterError("empty loss history")
    bad = epochs_since_improvement(history, min_delta)
    if bad and bad % patience == 0:
        return max(lr * factor, min_lr)
    return lr


# ----------------------------------------------------------------------------
# training


@dataclass
class FoldResult:
    fold: int
    best_val_loss: float
    best_epoch: int
    val_accuracy: float
    val_auc: float
    checkpoint: MIVModel = field(repr=False)
    history: list = field(default_factory=list, repr=False)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"fold": self.fold, "seed": self.seed, "best_val_loss": self.best_val_loss, "best_epoch": self.best_epoch,
                "val_accuracy": self.val_accuracy, "val_auc": self.val_auc,
                "epochs_run": len(self.history), "history": self.history}


def _val_loss(model, q, bags, y) -> float:
    return nx.bce_loss(predict_proba(model, q, bags), y)


def train_fold(model: MIVModel, train_exemplars, val_exemplars, config: TrainConfig,
               fold: int = 0, seed: int | None = None) -> FoldResult:
    """RMSprop with plateau LR decay and early stopping on validation loss.

    The returned checkpoint is the model at the lowest validation loss seen;
    the patience counter only resets on improvements of at least
    ``config.min_delta``.
    """
    seed = config.seed if seed is None else seed
    rng = nx.make_rng(seed)
    tq, tb, ty = stack_exemplars(train_exemplars)
    vq, vb, vy = stack_exemplars(val_exemplars)
    opt = RMSprop(model.params)
    lr = config.lr0
    best_loss, best_epoch, best_model = np.inf, -1, model.copy()
    val_history, history = [], []
    n = len(ty)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        batches = [perm[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2] = np.concatenate([batches[-2], batches.pop()])
        train_loss = 0.0
        for idx in batches:
            model.params.zero_grad()
            train_loss += loss_arrays(model, tq[idx], tb[idx], ty[idx], "train", rng) * len(idx)
            opt.step(lr)
        val_loss = _val_loss(model, vq, vb, vy)
        if not np.isfinite(val_loss):
            raise nx.NumericalFailure(f"fold {fold}: non-finite validation loss at epoch {epoch}")
        val_history.append(val_loss)
        history.append({"epoch": epoch, "train_loss": train_loss / n, "val_loss": val_loss, "lr": lr})
        log.debug("fold %d epoch %d train %.4f val %.4f lr %.2e", fold, epoch, train_loss / n,
                  val_loss, lr)
        if val_loss < best_loss:
            best_loss, best_epoch, best_model = val_loss, epoch, model.copy()
        if epochs_since_improvement(val_history, config.min_delta) >= config.patience:
            break
        lr = schedule_lr(val_history, lr, config.lr_factor, config.lr_patience, config.min_lr,
                         config.min_delta)
    m = metrics_from_scores(predict_proba(best_model, vq, vb), vy, config.threshold)
    return FoldResult(fold, float(best_loss), best_epoch, m.accuracy, m.auc, best_model, history,
                      seed)


def config_seed(base: int, config: AttentionConfig, fold: int) -> int:
    return nx.derive_seed(base, KINDS.index(config.kind), config.heads, fold)


@dataclass
class ConfigResult:
    config: AttentionConfig
    folds: list
    best_fold: int
    test: Metrics | None

    @property
    def selected(self) -> FoldResult:
        return self.folds[self.best_fold]

    def summary(self) -> dict:
        acc = np.array([f.val_accuracy for f in self.folds])
        auc = np.array([f.val_auc for f in self.folds])
        ddof = 1 if len(self.folds) > 1 else 0
        return {"val_acc_mean": float(acc.mean()), "val_acc_std": float(acc.std(ddof=ddof)),
                "val_auc_mean": float(np.mean(auc)), "val_auc_std": float(np.std(auc, ddof=ddof))}

    def row(self) -> str:
        s = self.summary()
        t = self.test
        test = f"{100 * t.accuracy:6.2f} | {t.auc:.3f}" if t else "   n/a | n/a"
        return (f"{self.config.label:<20} | {100 * s['val_acc_mean']:5.2f}±{100 * s['val_acc_std']:4.2f}"
                f" | {s['val_auc_mean']:.3f}±{s['val_auc_std']:.3f} | {test}")


def select_best_fold(folds) -> int:
    """Index of the fold whose checkpoint has the least validation loss."""
    return int(np.argmin([f.best_val_loss for f in folds]))


def cross_validate(data: SplitExemplars, plan: SplitPlan, config: TrainConfig, grid,
                   input_dim: int, model_kwargs: dict | None = None, folds=None,
                   progress=None) -> list[ConfigResult]:
    """Train every fold for every attention configuration, then test the best fold's model.

    ``folds`` restricts training to a subset of fold indices (all by default).
    """
    report = validate_split(plan, data.all())
    if not report.ok:
        raise ValidationError(f"split leaks patients across boundaries: {report}")
    if len(data.folds) != plan.k:
        raise ParameterError("exemplar folds do not match the split plan")
    for group, exemplars in [("test", data.test), *enumerate(data.folds)]:
        stray = sorted({e.patient_id for e in exemplars if plan.group_of(e.patient_id) != group})
        if stray:
            raise ValidationError(f"exemplars filed under {group!r} belong to other groups: {stray}")
    model_kwargs = model_kwargs or {}
    fold_ids = list(range(plan.k)) if folds is None else list(folds)
    results = []
    for cfg in grid:
        fold_results = []
        for j in fold_ids:
            seed = config_seed(config.seed, cfg, j)
            model = init_model(input_dim, cfg, seed=seed, **model_kwargs)
            res = train_fold(model, data.train(j), data.folds[j], config, fold=j, seed=seed)
            fold_results.append(res)
            if progress:
                progress(cfg, res)
        best = select_best_fold(fold_results)
        test = evaluate(fold_results[best].checkpoint, data.test, config.threshold) if data.test else None
        results.append(ConfigResult(cfg, fold_results, best, test))
    return results
