"""Training loop, evaluation, and batch-norm statistics recalibration."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from ..device import SimClock
from ..hybridweight import NOISY, UpdateStats
from ..metrics import MetricsRecord
from .layers import CALIBRATE, EVAL, TRAIN
from .network import Network


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``records`` holds the metrics emitted so far."""

    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


@dataclass
class TrainingConfig:
    learning_rate: float = 0.05
    lr_decay_factor: float = 0.45
    lr_decay_epochs: list | None = None
    batch_size: int = 100
    epochs: int = 10
    refresh_interval_batches: int = 10
    width_multiplier: float = 1.0
    seconds_per_batch: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.refresh_interval_batches < 1:
            raise ValueError("refresh_interval_batches must be >= 1")

    def decay_epochs(self):
        if self.lr_decay_epochs is not None:
            return sorted(int(e) for e in self.lr_decay_epochs)
        return sorted({int(self.epochs * 0.5), int(self.epochs * 0.75)} - {0})

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (0-based)."""
        n = sum(1 for e in self.decay_epochs() if epoch >= e)
        return self.learning_rate * self.lr_decay_factor ** n


def evaluate(net: Network, x, y, t: float, mode: str = NOISY, batch_size: int = 500):
    """``(loss, accuracy)`` in inference mode at simulation time ``t``."""
    n = len(x)
    if n == 0:
        return float("nan"), float("nan")
    ctx = net.context(t=t, mode=mode, bn_mode=EVAL)
    loss_sum, correct = 0.0, 0
    for s in range(0, n, batch_size):
        xb, yb = x[s:s + batch_size], y[s:s + batch_size]
        loss_sum += net.forward(xb, yb, ctx) * len(xb)
        correct += int((net.logits.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n


def adabs_calibrate(net: Network, x_cal, t: float, mode: str = NOISY, batch_size: int = 1000):
    """Replace every batch-norm running mean/variance with statistics of ``x_cal``.

    Forward passes run at simulation time ``t`` (drifted weights); scale and
    shift parameters and the weights themselves are left untouched.
    """
    if len(x_cal) == 0:
        raise ValueError("calibration set is empty")
    bns = net.batchnorm_layers
    for bn in bns:
        bn.begin_calibration()
    ctx = net.context(t=t, mode=mode, bn_mode=CALIBRATE)
    try:
        for s in range(0, len(x_cal), batch_size):
            net.predict(x_cal[s:s + batch_size], ctx)
    finally:
        for bn in bns:
            bn.end_calibration()
    return [(bn.running_mean.copy(), bn.running_var.copy()) for bn in bns]


def calibration_subset(n_train: int, fraction: float = 0.05, seed: int = 0) -> np.ndarray:
    """Indices of a ``fraction`` sample of the training set (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError("calibration fraction must be in (0, 1]")
    k = max(1, int(round(n_train * fraction)))
    return np.sort(np.random.default_rng([seed, 77]).choice(n_train, k, replace=False))


def train(net: Network, data, cfg: TrainingConfig, clock: SimClock, *, mode: str = NOISY,
          run_id: str = "run", warmup_batches: int = 10, on_step=None, record_wall_clock=False):
    """Train on ``data = (x_train, y_train, x_test, y_test)``; returns the metrics records.

    One record per epoch, preceded by an epoch-0 evaluation of the initial
    network.  ``on_step(step, net)`` is called after every weight update.
    """
    x_tr, y_tr, x_te, y_te = data
    records = []
    t_start = time.perf_counter()
    totals = UpdateStats()

    def emit(epoch, step, lr, tr_loss, tr_acc):
        te_loss, te_acc = evaluate(net, x_te, y_te, clock.now, mode)
        rec = MetricsRecord(
            run_id=run_id, epoch=epoch, step=step, lr=lr, train_loss=tr_loss, train_acc=tr_acc,
            test_loss=te_loss, test_acc=te_acc, sim_time=clock.now,
            wall_clock=round(time.perf_counter() - t_start, 3) if record_wall_clock else 0.0,
            **{k: v for k, v in totals.as_dict().items()},
        )
        records.append(rec)
        return rec

    tr_loss, tr_acc = evaluate(net, x_tr, y_tr, clock.now, mode)
    emit(0, 0, cfg.lr_at(0), tr_loss, tr_acc)
    if cfg.epochs == 0:
        return records

    n = len(x_tr)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            ctx = net.context(t=clock.now, mode=mode, bn_mode=TRAIN)
            loss = net.forward(xb, yb, ctx)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}", records)
            loss_sum += loss * len(idx)
            correct += int((net.logits.argmax(axis=1) == yb).sum())
            seen += len(idx)
            net.backward(ctx)
            totals += net.apply_updates(lr, clock)
            clock.advance()
            step += 1
            if step == warmup_batches:
                net.freeze_converters()
            if step % cfg.refresh_interval_batches == 0:
                totals += net.refresh(clock)
            if on_step is not None:
                on_step(step, net)
        emit(epoch + 1, step, lr, loss_sum / seen, correct / seen)
    return records
