"""Uncertainty-guided continual learning over a task sequence.

After each task the trunk parameters are scored by importance (inverse
variance, or |mean|/variance for the signal-to-noise metric) and one of
two mitigations kicks in:

- learning-rate adaptation (lra): importance is affinely remapped onto
  [alpha_min, alpha_max] with the MOST important parameters receiving the
  LOWEST learning rate, so what the network relies on barely moves;
- per-parameter Bayesian inference (ppbi): importance maps onto
  [tau_min, tau_max] with the most important parameters receiving the
  HIGHEST KL weight, and the prior is replaced by the current posterior,
  so important parameters are anchored where the last task left them.

The literal remap equations, which invert both orientations, are kept
behind `remap_as_printed` for comparison. Baselines: fine-tuning (ft),
feature-freezing (ff, trunk frozen after task 0), and joint training
(jt, replaying all earlier tasks' data; the upper-bound reference).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import TaskSequence
from .elbo import KLWeights, PriorStore, gaussian_kl
from .grad import GradientSet, accumulate_batch, accumulate_kl, one_hot
from .metrics import ResultMatrix
from .moments import MPModel
from .tensor import FLOAT, SeededRng, TensorError
from .train import (
    LearningRates,
    TrainConfig,
    TrainHistory,
    evaluate,
    run_training,
    train_task,
)

METHODS = ("lra", "ppbi", "ft", "ff", "jt")
METRICS = ("variance", "snr")


@dataclass
class ImportanceVector:
    """Per-element importance over trunk Gaussian parameters only."""

    iota: np.ndarray
    index: np.ndarray  # positions in the model's flat element space
    metric: str

    def __post_init__(self):
        if np.any(self.iota < 0):
            raise TensorError("importance must be non-negative")


@dataclass
class CLConfig:
    method: str = "lra"
    metric: str = "variance"
    alpha0: float | None = None  # defaults to alpha_max
    alpha_min: float = 1e-12
    alpha_max: float = 1e-4
    tau0: float = 1e-5
    tau_min: float = 1e-12
    tau_max: float = 1e-4
    rho_init: float = -12.0
    kl_mode: str = "standard"
    remap_as_printed: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise TensorError(f"unknown method {self.method!r}")
        if self.metric not in METRICS:
            raise TensorError(f"unknown importance metric {self.metric!r}")
        if not (0 <= self.alpha_min <= self.alpha_max):
            raise TensorError("need 0 <= alpha_min <= alpha_max")
        if not (0 <= self.tau_min <= self.tau_max):
            raise TensorError("need 0 <= tau_min <= tau_max")
        if self.tau0 < 0:
            raise TensorError("tau0 must be non-negative")

    @property
    def alpha_start(self) -> float:
        return self.alpha_max if self.alpha0 is None else self.alpha0


def importance(model: MPModel, metric: str) -> ImportanceVector:
    """Score trunk parameters: 1/sigma2, or |mu|/sigma2 for snr."""
    if metric not in METRICS:
        raise TensorError(f"unknown importance metric {metric!r}")
    parts, idxs = [], []
    for e in model.gaussian_entries(trunk_only=True):
        s2 = e.param.sigma2.reshape(-1)
        if metric == "variance":
            parts.append(1.0 / s2)
        else:
            parts.append(np.abs(e.param.mu.reshape(-1)) / s2)
        idxs.append(np.arange(e.offset, e.offset + e.size))
    if not parts:
        raise TensorError("model has no trunk Gaussian parameters")
    return ImportanceVector(np.concatenate(parts), np.concatenate(idxs), metric)


def _affine_remap(iota: np.ndarray, lo_importance_value: float,
                  hi_importance_value: float) -> np.ndarray | None:
    """Map min(iota) -> lo_importance_value, max(iota) -> hi_importance_value.

    Returns None for a degenerate (constant) importance vector.
    """
    i_min, i_max = float(iota.min()), float(iota.max())
    if i_max <= i_min:
        return None
    return ((iota - i_min) * (hi_importance_value - lo_importance_value)
            / (i_max - i_min) + lo_importance_value)


def remap_lr(iota: ImportanceVector, alpha_min: float, alpha_max: float,
             n_elements: int, as_printed: bool = False) -> LearningRates:
    """Importance -> per-element learning rates.

    Most important -> alpha_min (frozen), least important -> alpha_max
    (free). Heads and any non-scored elements keep alpha_max. A constant
    importance vector degenerates to alpha_max everywhere, with a warning.
    The as_printed orientation maps most important -> alpha_max instead.
    """
    alpha = np.full(n_elements, alpha_max, dtype=FLOAT)
    hi = alpha_max if as_printed else alpha_min
    lo = alpha_min if as_printed else alpha_max
    mapped = _affine_remap(iota.iota, lo, hi)
    if mapped is None:
        warnings.warn("degenerate importance vector: all learning rates set "
                      "to alpha_max", stacklevel=2)
    else:
        alpha[iota.index] = mapped
    return LearningRates(alpha)


def remap_tau(iota: ImportanceVector, tau_min: float, tau_max: float,
              n_elements: int, as_printed: bool = False) -> KLWeights:
    """Importance -> per-element KL weights.

    Most important -> tau_max (anchored), least important -> tau_min
    (free). Heads keep tau_min. A constant importance vector degenerates
    to tau_min everywhere, with a warning. The as_printed orientation maps
    most important -> tau_min instead.
    """
    tau = np.full(n_elements, tau_min, dtype=FLOAT)
    hi = tau_min if as_printed else tau_max
    lo = tau_max if as_printed else tau_min
    mapped = _affine_remap(iota.iota, lo, hi)
    if mapped is None:
        warnings.warn("degenerate importance vector: all KL weights set to "
                      "tau_min", stacklevel=2)
    else:
        tau[iota.index] = mapped
    return KLWeights(tau)


@dataclass
class ContinualResult:
    matrix: ResultMatrix
    task_records: list[dict]
    histories: list[TrainHistory]
    error: str | None = None

    @property
    def completed_tasks(self) -> int:
        return len(self.histories)


def _summary(v: np.ndarray) -> dict:
    return {"min": float(v.min()), "median": float(np.median(v)),
            "max": float(v.max())}


def _importance_histogram(iota: np.ndarray, bins: int = 20) -> dict:
    # Log-spaced view; exact zeros are counted separately.
    positive = iota[iota > 0]
    zeros = int((iota == 0).sum())
    if positive.size == 0:
        return {"zeros": zeros, "log10_edges": [], "counts": []}
    logs = np.log10(positive)
    counts, edges = np.histogram(logs, bins=bins)
    return {"zeros": zeros, "log10_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts]}


def _joint_pool(tasks: TaskSequence, through: int):
    """Stack train/val splits of tasks 0..through with per-sample task ids."""
    xs, ys, ts = [], [], []
    for t in range(through + 1):
        task = tasks.tasks[t]
        xs.append(task.train.images)
        ys.append(task.train.labels)
        ts.append(np.full(len(task.train), t, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ts)


def _train_joint(model: MPModel, tasks: TaskSequence, through: int,
                 prior: PriorStore, weights: KLWeights, alpha: LearningRates,
                 cfg: CLConfig, rng: SeededRng) -> TrainHistory:
    """One joint pass over the union of tasks 0..through (replayed data)."""
    images, labels, task_ids = _joint_pool(tasks, through)
    seen = list(range(through + 1))

    def step_fn(idx):
        model.zero_grads()
        batch_tasks = task_ids[idx]
        total_ll = 0.0
        B = idx.shape[0]
        for t in seen:
            sel = idx[batch_tasks == t]
            if sel.size == 0:
                continue
            y = one_hot(labels[sel], tasks.tasks[t].n_classes)
            total_ll += accumulate_batch(model, images[sel], y, t,
                                         train=True, ll_scale=sel.size / B)
        kl = accumulate_kl(model, prior, weights, task=seen, mode=cfg.kl_mode)
        loss = -total_ll + kl
        if not np.isfinite(loss):
            raise TensorError("non-finite loss in joint training")
        return loss, GradientSet.from_model(model)

    def eval_fn():
        hits, total = 0.0, 0
        for t in seen:
            val = tasks.tasks[t].val
            hits += evaluate(model, val, t) * len(val)
            total += len(val)
        return hits / total

    return run_training(model, images.shape[0], step_fn, eval_fn, alpha,
                        cfg.train, rng)


def validate_model_heads(model: MPModel, tasks: TaskSequence):
    for t, task in enumerate(tasks):
        if t not in model.head_classes:
            raise TensorError(f"model has no head for task {t}")
        if model.head_classes[t] != task.n_classes:
            raise TensorError(f"head {t} has {model.head_classes[t]} classes, "
                              f"task has {task.n_classes}")


def run_continual(model: MPModel, tasks: TaskSequence, cfg: CLConfig,
                  rng: SeededRng | None = None,
                  on_task_complete=None) -> ContinualResult:
    """Sequential training over the task sequence with the chosen method.

    Starts from a standard-normal prior, uniform KL weights tau0 and
    uniform learning rates. A training failure stops the run and returns
    the partial result with `error` set.
    """
    if len(tasks) < 2:
        raise TensorError("need at least 2 tasks")
    validate_model_heads(model, tasks)
    rng = rng if rng is not None else SeededRng(cfg.train.seed)

    n = model.n_elements
    prior = PriorStore.standard_normal(n)
    weights = KLWeights.uniform(n, cfg.tau0)
    alpha = LearningRates.uniform(n, cfg.alpha_start)
    trunk_mask = model.element_mask(trunk_only=True)

    matrix = ResultMatrix(len(tasks))
    records: list[dict] = []
    histories: list[TrainHistory] = []

    for t, task in enumerate(tasks):
        if cfg.method == "ff" and t == 1:
            frozen = alpha.alpha.copy()
            frozen[trunk_mask] = 0.0
            alpha = LearningRates(frozen)
        task_rng = rng.spawn()
        try:
            if cfg.method == "jt":
                history = _train_joint(model, tasks, t, prior, weights, alpha,
                                       cfg, task_rng)
            else:
                history = train_task(model, task, prior, weights, alpha,
                                     cfg.train, rng=task_rng, kl_mode=cfg.kl_mode)
        except (TensorError, FloatingPointError) as err:
            return ContinualResult(matrix, records, histories,
                                   error=f"task {t}: {err}")
        histories.append(history)

        for i in range(t + 1):
            matrix.fill(i, t, evaluate(model, tasks.tasks[i].test, i))

        record = {
            "task": t,
            "method": cfg.method,
            "epochs_run": history.epochs_run,
            "best_epoch": history.best_epoch,
            "best_val_accuracy": history.best_val_accuracy,
            "alpha": _summary(alpha.alpha),
            "tau": _summary(weights.tau),
            "r_column": [matrix.get(i, t) for i in range(t + 1)],
        }

        if t < len(tasks) - 1:
            iota = importance(model, cfg.metric)
            record["importance_histogram"] = _importance_histogram(iota.iota)
            if cfg.method == "lra":
                alpha = remap_lr(iota, cfg.alpha_min, cfg.alpha_max, n,
                                 cfg.remap_as_printed)
            elif cfg.method == "ppbi":
                weights = remap_tau(iota, cfg.tau_min, cfg.tau_max, n,
                                    cfg.remap_as_printed)
                prior = PriorStore.from_posterior(model)
        records.append(record)
        if on_task_complete is not None:
            on_task_complete(TaskSwitchState(t, model, matrix, record, prior,
                                             weights, alpha))

    return ContinualResult(matrix, records, histories)


@dataclass
class TaskSwitchState:
    """Snapshot handed to on_task_complete after each task (post-remap)."""

    task: int
    model: MPModel
    matrix: ResultMatrix
    record: dict
    prior: PriorStore
    weights: KLWeights
    alpha: LearningRates


def baseline_ft(model: MPModel, tasks: TaskSequence, cfg: CLConfig,
                rng: SeededRng | None = None) -> ContinualResult:
    """Fine-tuning: uniform rates and weights, static prior, no mitigation."""
    return run_continual(model, tasks, _with_method(cfg, "ft"), rng)


def baseline_ff(model: MPModel, tasks: TaskSequence, cfg: CLConfig,
                rng: SeededRng | None = None) -> ContinualResult:
    """Feature freezing: trunk learning rates zeroed after the first task."""
    return run_continual(model, tasks, _with_method(cfg, "ff"), rng)


def baseline_jt(model: MPModel, tasks: TaskSequence, cfg: CLConfig,
                rng: SeededRng | None = None) -> ContinualResult:
    """Joint training over the union of all tasks seen so far (replay)."""
    return run_continual(model, tasks, _with_method(cfg, "jt"), rng)


def _with_method(cfg: CLConfig, method: str) -> CLConfig:
    import dataclasses
    return dataclasses.replace(cfg, method=method)


def total_prior_kl(model: MPModel, prior: PriorStore) -> float:
    """Sum of per-element KL(q || prior) over every Gaussian parameter."""
    total = 0.0
    for e in model.gaussian_entries():
        sl = slice(e.offset, e.offset + e.size)
        total += float(np.sum(gaussian_kl(
            e.param.mu.reshape(-1), e.param.sigma2.reshape(-1),
            prior.mu_p[sl], prior.sigma2_p[sl])))
    return total
