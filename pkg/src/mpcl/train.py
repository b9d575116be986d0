"""SGD training with per-parameter learning rates and validation-plateau
early stopping.

The optimizer is plain SGD: the per-parameter learning-rate vector is the
control surface for continual learning, and adaptive optimizers would
rescale exactly the steps that vector is meant to pin down. The mean and
the variance pre-parameter of a weight share one learning-rate element.
Training returns the parameter state of the best validation epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Task
from .elbo import KLWeights, PriorStore
from .grad import GradientSet, backward, one_hot
from .moments import MPModel
from .tensor import FLOAT, SeededRng, TensorError


class LearningRates:
    """Flat non-negative per-element step sizes."""

    def __init__(self, alpha: np.ndarray):
        alpha = np.ascontiguousarray(alpha, dtype=FLOAT)
        if np.any(alpha < 0):
            raise TensorError("learning rates must be non-negative")
        self.alpha = alpha

    @classmethod
    def uniform(cls, n_elements: int, alpha0: float) -> "LearningRates":
        return cls(np.full(n_elements, alpha0, dtype=FLOAT))


@dataclass
class TrainConfig:
    max_epochs: int = 250
    batch_size: int = 500
    patience: int = 5
    min_delta: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise TensorError("max_epochs, batch_size, patience must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("-inf")
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.records)


def sgd_step(model: MPModel, grads: GradientSet, alpha: LearningRates):
    """x <- x - alpha * g per coordinate; mu and rho share the element's alpha."""
    if alpha.alpha.size != model.n_elements:
        raise TensorError("learning-rate length mismatch")
    for e in model.entries:
        a = alpha.alpha[e.offset:e.offset + e.size]
        if e.gaussian:
            p = e.param
            a = a.reshape(p.mu.shape)
            p.mu -= a * grads.d_mu[e.name]
            p.rho -= a * grads.d_rho[e.name]
        else:
            e.param.value -= a.reshape(e.param.value.shape) * grads.d_plain[e.name]


def evaluate(model: MPModel, dataset, task: int, batch_size: int = 512) -> float:
    """Fraction of samples whose predictive-mean argmax matches the label."""
    n_classes = model.head_classes[task]
    if dataset.labels.max() >= n_classes:
        raise TensorError("dataset labels outside the task head's class range")
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        x = dataset.images[lo:lo + batch_size]
        pred = model.forward(x, task, train=False)
        hits += int((pred.mean.argmax(axis=1)
                     == dataset.labels[lo:lo + batch_size]).sum())
    return hits / len(dataset)


def run_training(model: MPModel, n_train: int, step_fn, eval_fn,
                 alpha: LearningRates, cfg: TrainConfig,
                 rng: SeededRng) -> TrainHistory:
    """Epoch loop shared by single-task and joint training.

    step_fn(batch_indices) -> (loss, GradientSet); eval_fn() -> accuracy.
    Stops at max_epochs or when accuracy fails to improve by min_delta for
    `patience` consecutive epochs; leaves the model at its best-epoch state.
    """
    history = TrainHistory()
    best_state = None
    since_improve = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_train)
        losses = []
        for lo in range(0, n_train, cfg.batch_size):
            loss, grads = step_fn(order[lo:lo + cfg.batch_size])
            sgd_step(model, grads, alpha)
            losses.append(loss)
        val_acc = eval_fn()
        history.records.append(EpochRecord(epoch, float(np.mean(losses)), val_acc))

        improved_plateau = val_acc > history.best_val_accuracy + cfg.min_delta
        if val_acc > history.best_val_accuracy:
            history.best_val_accuracy = val_acc
            history.best_epoch = epoch
            best_state = model.state()
        if epoch == 0 or improved_plateau:
            since_improve = 0
        else:
            since_improve += 1
        if since_improve >= cfg.patience:
            history.stopped_early = True
            break

    if best_state is not None:
        model.load_state(best_state)
    return history


def train_task(model: MPModel, task: Task, prior: PriorStore, weights: KLWeights,
               alpha: LearningRates, cfg: TrainConfig,
               rng: SeededRng | None = None,
               kl_mode: str = "standard") -> TrainHistory:
    """Shuffled minibatch SGD on one task until max_epochs or a validation
    plateau; the model ends at the state of the best validation epoch."""
    if len(task.train) == 0 or len(task.val) == 0:
        raise TensorError("empty train or validation split")
    rng = rng if rng is not None else SeededRng(cfg.seed)
    n_classes = task.n_classes

    def step_fn(idx):
        x = task.train.images[idx]
        y = one_hot(task.train.labels[idx], n_classes)
        return backward(model, x, y, task.task_id, prior, weights, mode=kl_mode)

    def eval_fn():
        return evaluate(model, task.val, task.task_id)

    return run_training(model, len(task.train), step_fn, eval_fn, alpha, cfg, rng)
