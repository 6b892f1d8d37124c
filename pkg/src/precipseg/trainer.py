"""Adam training loop with early stopping, checkpoint selection, and history.

The optimizer is Adam with coupled L2 weight decay (decay folded into the
gradient) and the canonical moment constants. Epoch batch order, dropout
masks, and everything else stochastic derive from the run seed, so a
(seed, data, config) triple fixes the final checkpoint bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import rng
from .losses import LossConfig, combined_loss
from .model import ModelParams, forward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EARLY_STOP_MIN_DELTA = 1e-5

# stream namespaces for seed derivation
_SHUFFLE = 1
_DROPOUT = 2

HISTORY_HEADER = "epoch,train_total,train_focal,train_dice,val_total,val_focal,val_dice"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 50
    early_stop_patience: int = 10
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        self.loss.validate()


class AdamState:
    """First/second moment estimates mirroring the parameter map."""

    def __init__(self, params: ModelParams):
        self.m = {name: np.zeros_like(t.data) for name, t in params.named()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.named()}
        self.t = 0


def adam_step(params: ModelParams, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """One in-place Adam update; grads must cover every parameter."""
    state.t += 1
    lr = np.float32(config.learning_rate)
    wd = np.float32(config.weight_decay)
    b1, b2 = np.float32(ADAM_BETA1), np.float32(ADAM_BETA2)
    c1 = np.float32(1.0 - ADAM_BETA1 ** state.t)
    c2 = np.float32(1.0 - ADAM_BETA2 ** state.t)
    for name, p in params.named():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.data.shape} for {name!r}")
        g = g.astype(np.float32, copy=False)
        if wd:
            g = g + wd * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + np.float32(ADAM_EPS))


@dataclass
class EpochStats:
    total: float
    focal: float
    dice: float


@dataclass
class Batches:
    """Patch tensors, labels, and validity masks ready for the model."""

    x: np.ndarray          # [P,C,z,z] float32
    labels: np.ndarray     # [P,z,z] uint8, 255 = invalid
    mask: np.ndarray       # [P,z,z] bool

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "Batches":
        return Batches(self.x[idx], self.labels[idx], self.mask[idx])


def _weighted_stats(parts) -> EpochStats:
    w = np.array([p[3] for p in parts], dtype=np.float64)
    tot = np.array([p[0] for p in parts], dtype=np.float64)
    foc = np.array([p[1] for p in parts], dtype=np.float64)
    dic = np.array([p[2] for p in parts], dtype=np.float64)
    ws = w.sum()
    return EpochStats(float((tot * w).sum() / ws), float((foc * w).sum() / ws),
                      float((dic * w).sum() / ws))


def train_epoch(params: ModelParams, state: AdamState, data: Batches,
                config: TrainConfig, epoch: int) -> EpochStats:
    """One pass over the training patches: one adam_step per batch.

    Losses are averaged over batches weighted by their valid-cell counts.
    """
    config.validate()
    if len(data) == 0:
        raise ValueError("empty training set")
    order = rng.permutation(rng.derive(config.seed, _SHUFFLE, epoch), 0, len(data))
    parts = []
    for step, lo in enumerate(range(0, len(data), config.batch_size)):
        idx = order[lo:lo + config.batch_size]
        xb = ad.Tensor(data.x[idx])
        yb, mb = data.labels[idx], data.mask[idx]
        drop_seed = rng.derive(config.seed, _DROPOUT, epoch, step)
        try:
            with ad.Tape() as tape:
                probs = forward(params, xb, "train", dropout_seed=drop_seed)
                loss, comps = combined_loss(probs, yb, mb, config.loss)
            total = float(loss.data)
            if not np.isfinite(total):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
            tape.backward(loss)
        except ad.NonFiniteError as exc:
            raise DivergenceError(str(exc)) from exc
        grads = {name: t.grad for name, t in params.named()}
        adam_step(params, grads, state, config)
        n_valid = int((mb & (yb != 255)).sum())
        parts.append((total, comps.focal, comps.dice, n_valid))
    return _weighted_stats(parts)


def evaluate_loss(params: ModelParams, data: Batches, config: TrainConfig) -> EpochStats:
    """Combined loss over a split in eval mode (no dropout, running stats)."""
    parts = []
    for lo in range(0, len(data), config.batch_size):
        sl = slice(lo, lo + config.batch_size)
        xb = ad.Tensor(data.x[sl])
        probs = forward(params, xb, "eval")
        loss, comps = combined_loss(probs, data.labels[sl], data.mask[sl], config.loss)
        n_valid = int((data.mask[sl] & (data.labels[sl] != 255)).sum())
        parts.append((float(loss.data), comps.focal, comps.dice, n_valid))
    return _weighted_stats(parts)


@dataclass
class EpochRecord:
    epoch: int
    train: EpochStats
    val: EpochStats


@dataclass
class FitResult:
    best_params: ModelParams
    best_epoch: int
    best_val_loss: float
    history: list


class EarlyStopper:
    """Stop after `patience` epochs without improvement beyond min_delta."""

    def __init__(self, patience: int, min_delta: float = EARLY_STOP_MIN_DELTA):
        self.patience = patience
        self.min_delta = min_delta
        self.best: Optional[float] = None
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one epoch's monitored value; True means stop now."""
        if self.best is None or self.best - value > self.min_delta:
            self.best = value
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def fit(params: ModelParams, train_data: Batches, val_data: Batches,
        config: TrainConfig) -> FitResult:
    """Train with early stopping on validation combined loss.

    Keeps the parameter/running-statistics snapshot of the best epoch and
    returns it with the per-epoch loss history.
    """
    config.validate()
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation sets must be non-empty")
    state = AdamState(params)
    stopper = EarlyStopper(config.early_stop_patience)
    history: list[EpochRecord] = []
    best = params.clone()
    best_epoch = 0
    best_val = float("inf")

    for epoch in range(1, config.max_epochs + 1):
        train_stats = train_epoch(params, state, train_data, config, epoch)
        val_stats = evaluate_loss(params, val_data, config)
        if not np.isfinite(val_stats.total):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochRecord(epoch, train_stats, val_stats))
        if val_stats.total < best_val:
            best_val = val_stats.total
            best_epoch = epoch
            best = params.clone()
        if stopper.update(val_stats.total):
            break
    return FitResult(best, best_epoch, best_val, history)


def history_csv(history) -> str:
    """History as CSV text: one row per epoch, '.' decimals, LF endings."""
    lines = [HISTORY_HEADER]
    for rec in history:
        lines.append(f"{rec.epoch},{rec.train.total:.6f},{rec.train.focal:.6f},"
                     f"{rec.train.dice:.6f},{rec.val.total:.6f},{rec.val.focal:.6f},"
                     f"{rec.val.dice:.6f}")
    return "\n".join(lines) + "\n"
