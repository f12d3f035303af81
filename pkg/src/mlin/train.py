"""Mini-batch training: Adamax, warmup, clipping, dropout, per-epoch logging."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .network import MlinModel, evaluate, forward, loss
from .optim import Adamax, Schedule, clip_gradients
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    epochs: int = 15
    batch_size: int = 32
    clip_norm: float = 0.25
    seed: int = 0
    schedule: Schedule = None  # type: ignore[assignment]
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = Schedule()


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    shuffle_ss, dropout_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_ss), np.random.default_rng(dropout_ss)


def train(
    model: MlinModel,
    train_set,
    settings: TrainSettings,
    val_set=None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Train in place; returns one record per epoch.

    Records carry ``epoch``, ``mean_loss`` (over training batches, dropout on),
    ``train_acc`` and ``val_acc`` (both re-measured with dropout off) and the
    last ``lr`` used.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    shuffle_rng, dropout_rng = _streams(settings.seed)
    params = model.parameters()
    opt = Adamax(params, settings.beta1, settings.beta2, settings.adam_eps)
    history = []
    step = 0
    lr = 0.0
    for epoch in range(settings.epochs):
        total, seen = 0.0, 0
        for R, E, labels in train_set.batches(settings.batch_size, shuffle_rng):
            step += 1
            lr = settings.schedule.lr(step, epoch)
            model.zero_grad()
            with Tape() as tape:
                logits, _ = forward(model, Tensor(R), Tensor(E), dropout_rng, training=True)
                batch_loss = loss(logits, labels)
            tape.backward(batch_loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            grads, _ = clip_gradients(grads, settings.clip_norm)
            opt.step(grads, lr)
            total += float(batch_loss.data) * len(labels)
            seen += len(labels)
        record = {
            "epoch": epoch + 1,
            "mean_loss": total / seen,
            "train_acc": evaluate(model, train_set),
            "val_acc": evaluate(model, val_set) if val_set is not None and len(val_set) else None,
            "lr": lr,
        }
        log.info("epoch %d loss %.4f train %.4f val %s", record["epoch"], record["mean_loss"],
                 record["train_acc"], record["val_acc"])
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    model.zero_grad()
    return history
