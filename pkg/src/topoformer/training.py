"""Mini-batch training: MAE loss, Adam, validation-monitored early stopping."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .checkpoint import save_checkpoint
from .data import DatasetSplit, ModelExample, stack_examples
from .errors import ConfigurationError, ContractError, DimensionError, DivergedTrainingError
from .layers import Module

log = logging.getLogger(__name__)


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean of |pred - target| over every element."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mae_loss: prediction {pred.shape} and target {target.shape} differ")
    return ag.mean(ag.absolute(pred - target))


class Adam:
    """Adam with bias correction; moment buffers mirror the parameter list."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ContractError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        missing = [i for i, g in enumerate(grads) if g is None]
        if missing:
            raise ContractError(f"parameters {missing} have no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def zero_grad(self) -> None:
        ag.zero_grads(self.params)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    learning_rate: float = 1e-3
    checkpoint_dir: str | None = None
    min_delta: float = 1e-6
    # split each batch into chunks whose gradients are summed; bounds memory only
    micro_batch_size: int | None = None
    # stop as soon as the epoch's training MAE drops below this (overfit smoke runs)
    target_train_mae: float | None = None

    def validate(self) -> None:
        for name in ("batch_size", "max_epochs", "patience", "learning_rate"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {self.seed}")
        if self.micro_batch_size is not None and self.micro_batch_size < 1:
            raise ConfigurationError(f"micro_batch_size must be positive, got {self.micro_batch_size}")


@dataclass
class EarlyStopping:
    patience: int
    min_delta: float = 1e-6
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    best_checkpoint: str | None = None

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True on a strict improvement by more than ``min_delta``."""
        if val_loss < self.best_val_loss - self.min_delta:
            self.best_val_loss = val_loss
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_improvement >= self.patience


@dataclass
class TrainingReport:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = math.inf
    stopped_early: bool = False
    checkpoint_path: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    @property
    def final_train_mae(self) -> float:
        return self.history[-1][1] if self.history else math.nan

    def write_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(("epoch", "train_mae", "val_mae"))
        for epoch, train, val in self.history:
            writer.writerow((epoch, repr(train), repr(val)))

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_mae": self.best_val_mae,
            "stopped_early": self.stopped_early,
            "epochs_run": self.epochs_run,
            "checkpoint_path": self.checkpoint_path,
            "config": self.config,
            "seed": self.config.get("seed"),
        }

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def evaluate_mae(model: Module, examples: Sequence[ModelExample], batch_size: int = 64) -> float:
    """MAE over every target element, in the examples' (normalized) units."""
    x, y = stack_examples(examples)
    if y is None:
        raise ContractError("evaluate_mae needs examples with targets")
    total = 0.0
    with ag.no_grad():
        for start in range(0, len(x), batch_size):
            pred = model(x[start:start + batch_size]).data
            total += float(np.abs(pred - y[start:start + batch_size]).sum())
    return total / y.size


def fit(model: Module, split: DatasetSplit, config: TrainConfig,
        checkpoint_extra: dict | None = None) -> TrainingReport:
    """Train ``model`` in place and leave it holding the best-validation parameters."""
    config.validate()
    x_train, y_train = stack_examples(split.train)
    if y_train is None or not split.val:
        raise ContractError("fit needs targets on the training split and a non-empty validation split")
    params = model.parameters()
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(params, learning_rate=config.learning_rate)
    stopper = EarlyStopping(config.patience, config.min_delta)
    report = TrainingReport(config=asdict(config))
    checkpoint_path = None
    if config.checkpoint_dir is not None:
        Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        checkpoint_path = Path(config.checkpoint_dir) / "best.ckpt"
    best_params = [p.data.copy() for p in params]
    n = len(x_train)
    chunk = config.micro_batch_size or config.batch_size

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            optimizer.zero_grad()
            batch_loss = 0.0
            for sub_start in range(0, len(batch), chunk):
                idx = batch[sub_start:sub_start + chunk]
                with Tape() as tape:
                    loss = mae_loss(model(x_train[idx]), y_train[idx])
                    weight = len(idx) / len(batch)
                    tape.backward(loss if weight == 1.0 else ag.scale(loss, weight))
                batch_loss += loss.item() * len(idx)
            if not math.isfinite(batch_loss):
                raise DivergedTrainingError(epoch)
            optimizer.step()
            total += batch_loss
        train_mae = total / n
        val_mae = evaluate_mae(model, split.val)
        if not math.isfinite(val_mae):
            raise DivergedTrainingError(epoch, f"validation MAE is non-finite at epoch {epoch}")
        report.history.append((epoch, train_mae, val_mae))
        if stopper.update(epoch, val_mae):
            best_params = [p.data.copy() for p in params]
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, extra=checkpoint_extra)
                stopper.best_checkpoint = str(checkpoint_path)
        log.debug("epoch %d train %.6f val %.6f", epoch, train_mae, val_mae)
        if config.target_train_mae is not None and train_mae < config.target_train_mae:
            break
        if stopper.should_stop:
            report.stopped_early = True
            break

    for p, best in zip(params, best_params):
        p.data = best
    report.best_epoch = stopper.best_epoch
    report.best_val_mae = stopper.best_val_loss
    report.checkpoint_path = stopper.best_checkpoint
    return report
