"""Training loop: batch-mean BCE, Adam, plateau learning-rate decay, 80/20 split."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateMetricError, DivergenceError, NonFiniteError, StateCorruptionError
from .graph import HeteroGraph, VariantRecord
from .layers import ModelConfig, VEGNModel
from .metrics import auroc

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    """Training recipe. ``model`` holds optional :class:`ModelConfig` overrides."""

    epochs: int = 50
    batch_size: int = 20480
    initial_lr: float = 0.01
    plateau_patience_epochs: int = 2
    plateau_factor: float = 0.1
    min_delta: float = 1e-5
    dropout: float = 0.2
    seed: int = 0
    mode: str = "given"
    eval_fraction: float = 0.2
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("initial_lr", "plateau_factor"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ContractError(f"{name} must be in (0, 1], got {v}")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ContractError(f"eval_fraction must be in [0, 1), got {self.eval_fraction}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.plateau_patience_epochs < 1:
            raise ContractError("plateau_patience_epochs must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")

    def model_config(self, feature_dim):
        overrides = dict(self.model)
        overrides.setdefault("dropout", self.dropout)
        overrides.setdefault("seed", self.seed)
        return ModelConfig(mode=self.mode, feature_dim=feature_dim, **overrides)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    eval_loss: Optional[float]
    eval_auroc: Optional[float]
    lr: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


# ---------------------------------------------------------------------------
# loss


def bce_loss(predictions, labels):
    """Mean binary cross-entropy with predictions clamped to ``[1e-7, 1 - 1e-7]``."""
    y = ad.as_tensor(predictions)
    c = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.isin(c, (0.0, 1.0)).all():
        raise ContractError("bce_loss labels must be 0 or 1")
    if y.size != c.size:
        raise ContractError(f"{y.size} predictions for {c.size} labels")
    c = c.reshape(y.shape)
    y = ad.clip(y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = Tensor(c) * ad.log(y) + Tensor(1.0 - c) * ad.log(1.0 - y)
    return -ad.mean(terms)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update applied in place; returns ``state``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g in zip(params, grads):
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        if m.shape != p.data.shape or v.shape != p.data.shape or g.shape != p.data.shape:
            raise StateCorruptionError(
                f"Adam moments for {p.name!r} have shape {m.shape}, parameter {p.data.shape}, gradient {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    def __init__(self, params, lr=0.01, **kwargs):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kwargs)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        ad.zero_grad(self.params)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when its loss is below ``best - min_delta``. The counter
    resets after each improvement and after each reduction.
    """

    def __init__(self, lr, factor=0.1, patience=2, min_delta=1e-5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss):
        if loss < self.best - self.min_delta:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler(history, lr=0.01, factor=0.1, patience=2, min_delta=1e-5):
    """Learning rate after replaying ``history`` of evaluation losses."""
    sched = PlateauScheduler(lr, factor, patience, min_delta)
    for loss in history:
        sched.step(loss)
    return sched.lr


# ---------------------------------------------------------------------------
# split and training


def split_indices(n, eval_fraction=0.2, seed=0):
    if n < 2:
        raise ContractError(f"need at least 2 variants to split, got {n}")
    n_eval = int(math.floor(eval_fraction * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[: n - n_eval]), np.sort(perm[n - n_eval:])


def split_train_eval(variants: Sequence, eval_fraction=0.2, seed=0):
    """Random ``ceil((1 - eval_fraction) n)`` / remainder partition, file order kept."""
    variants = list(variants)
    tr, ev = split_indices(len(variants), eval_fraction, seed)
    return [variants[i] for i in tr], [variants[i] for i in ev]


def minibatches(indices, batch_size, rng):
    """Shuffle ``indices`` with ``rng`` and cut them into consecutive batches."""
    order = rng.permutation(indices)
    return [order[start:start + batch_size] for start in range(0, len(order), batch_size)]


def training_labels(graph: HeteroGraph):
    """Labels with unlabeled variants mapped to pathogenic (proxy for the rare set)."""
    return graph.labels_or(1.0)


def _eval_metrics(model, graph, idx, y):
    if len(idx) == 0:
        return None, None
    pred = model.forward(graph).data[idx, 0]
    loss = bce_loss(pred, y[idx]).item()
    try:
        score = auroc(pred, y[idx].astype(int))
    except DegenerateMetricError:
        score = None
    return loss, score


def train(graph: HeteroGraph, variants: Optional[Sequence[VariantRecord]] = None,
          config: Optional[TrainConfig] = None, *, model: Optional[VEGNModel] = None,
          evaluator: Optional[Callable] = None, on_epoch: Optional[Callable] = None):
    """Fit a model on ``variants`` (default: every variant in ``graph``).

    The forward pass always covers the whole graph; each step's loss covers
    one mini-batch of training variants. ``evaluator(model, epoch)``, if
    given, replaces the held-out evaluation and returns ``(loss, auroc)``.
    """
    config = config or TrainConfig()
    if model is None:
        model = VEGNModel(config.model_config(graph.feature_dim), graph.gene_count)
    vindex = graph.variant_index()
    if variants is None:
        labelled = np.arange(graph.variant_count)
    else:
        labelled = np.array([vindex[r.variant_id] for r in variants], dtype=np.intp)
    y = training_labels(graph)

    reports: list[EpochReport] = []
    if config.epochs == 0:
        return model, reports
    tr_pos, ev_pos = split_indices(len(labelled), config.eval_fraction, config.seed)
    train_idx, eval_idx = labelled[tr_pos], labelled[ev_pos]

    params = model.parameters()
    opt = Adam(params, lr=config.initial_lr)
    sched = PlateauScheduler(config.initial_lr, config.plateau_factor,
                             config.plateau_patience_epochs, config.min_delta)

    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        total = 0.0
        for b, batch in enumerate(minibatches(train_idx, config.batch_size, rng)):
            opt.zero_grad()
            try:
                with ad.Tape() as tape:
                    pred = model.forward(graph, training=True, rng=rng)
                    loss = bce_loss(ad.take_rows(pred, batch), y[batch])
                ad.backward(loss, tape)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value) or not all(np.isfinite(p.grad).all() for p in params):
                raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            opt.step()
            total += value * len(batch)
        opt.zero_grad()
        train_loss = total / max(len(train_idx), 1)

        if evaluator is not None:
            eval_loss, eval_auc = evaluator(model, epoch)
        else:
            eval_loss, eval_auc = _eval_metrics(model, graph, eval_idx, y)
        opt.lr = sched.step(eval_loss if eval_loss is not None else train_loss)
        report = EpochReport(epoch, train_loss, eval_loss, eval_auc, opt.lr)
        log.debug("epoch %d train %.5f eval %s lr %g", epoch, train_loss, eval_loss, opt.lr)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report)
    return model, reports
