"""Reverse-mode differentiation of the full objective and a finite-difference
verification harness.

The loss is the negated closed-form objective (likelihood averaged over the
batch, KL added once per step), differentiated exactly through every
moment-propagation rule: both the mean path and the variance path of each
layer, the softplus variance parameterization, and the KL term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elbo import (
    KLWeights,
    PriorStore,
    batch_log_likelihood,
    gaussian_kl,
    gaussian_kl_grads,
    log_likelihood_grads,
)
from .moments import GaussianParameter, MPModel
from .tensor import FLOAT, TensorError


@dataclass
class GradientSet:
    """Loss gradients mirroring the model: d/d mu and d/d rho per Gaussian
    parameter, d/d value per deterministic parameter."""

    d_mu: dict[str, np.ndarray] = field(default_factory=dict)
    d_rho: dict[str, np.ndarray] = field(default_factory=dict)
    d_plain: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MPModel) -> "GradientSet":
        gs = cls()
        for e in model.entries:
            if e.gaussian:
                gs.d_mu[e.name] = e.param.g_mu.copy()
                gs.d_rho[e.name] = e.param.g_rho.copy()
            else:
                gs.d_plain[e.name] = e.param.g.copy()
        for name, g in list(gs.d_mu.items()) + list(gs.d_rho.items()) \
                + list(gs.d_plain.items()):
            if not np.isfinite(g).all():
                raise TensorError(f"non-finite gradient for {name}")
        return gs

    def scaled(self, a: float) -> "GradientSet":
        return GradientSet({k: a * v for k, v in self.d_mu.items()},
                           {k: a * v for k, v in self.d_rho.items()},
                           {k: a * v for k, v in self.d_plain.items()})


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise TensorError("label outside the head's class range")
    out = np.zeros((labels.shape[0], n_classes), dtype=FLOAT)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def accumulate_batch(model: MPModel, x: np.ndarray, y_onehot: np.ndarray,
                     task: int, train: bool = True, ll_scale: float = 1.0) -> float:
    """Forward + backward of the likelihood term; grads add onto the model.

    Returns ll_scale * mean log-likelihood over the batch.
    """
    pred = model.forward(x, task, train=train)
    ll = batch_log_likelihood(y_onehot, pred)
    B = x.shape[0]
    d_mean, d_var = log_likelihood_grads(y_onehot, pred)
    scale = -ll_scale / B  # loss is the negated batch mean
    model.backward(scale * d_mean, scale * d_var)
    return ll_scale * float(ll.mean())


def head_in_scope(head_task, scope) -> bool:
    """True when a parameter's head (or trunk: None) is covered by `scope`,
    an int task id, a collection of ids, or None for every head."""
    if head_task is None or scope is None:
        return True
    if isinstance(scope, (set, frozenset, list, tuple)):
        return head_task in scope
    return head_task == scope


def accumulate_kl(model: MPModel, prior: PriorStore, weights: KLWeights,
                  task, mode: str = "standard", scale: float = 1.0) -> float:
    """KL term of the loss; per-element tau-weighted grads add onto the model."""
    if weights.tau.size != model.n_elements:
        raise TensorError("KL weight length mismatch")
    total = 0.0
    for e in model.gaussian_entries():
        if not head_in_scope(e.head_task, task):
            continue
        sl = slice(e.offset, e.offset + e.size)
        tau = scale * weights.tau[sl].reshape(e.param.mu.shape)
        mu_q, s2_q = e.param.mu, e.param.sigma2
        mu_p = prior.mu_p[sl].reshape(mu_q.shape)
        s2_p = prior.sigma2_p[sl].reshape(mu_q.shape)
        total += float(np.sum(tau * gaussian_kl(mu_q, s2_q, mu_p, s2_p, mode)))
        d_mu, d_s2 = gaussian_kl_grads(mu_q, s2_q, mu_p, s2_p, mode)
        e.param.accumulate(tau * d_mu, tau * d_s2)
    return total


def compute_loss(model: MPModel, x: np.ndarray, y_onehot: np.ndarray, task: int,
                 prior: PriorStore, weights: KLWeights, mode: str = "standard",
                 train: bool = True, loss_scale: float = 1.0) -> float:
    """Loss value only (minimization convention: negated objective)."""
    pred = model.forward(x, task, train=train)
    ll = float(batch_log_likelihood(y_onehot, pred).mean())
    kl_total = 0.0
    for e in model.gaussian_entries():
        if not head_in_scope(e.head_task, task):
            continue
        sl = slice(e.offset, e.offset + e.size)
        tau = weights.tau[sl].reshape(e.param.mu.shape)
        kl_total += float(np.sum(tau * gaussian_kl(
            e.param.mu, e.param.sigma2,
            prior.mu_p[sl].reshape(e.param.mu.shape),
            prior.sigma2_p[sl].reshape(e.param.mu.shape), mode)))
    return loss_scale * (-ll + kl_total)


def backward(model: MPModel, x: np.ndarray, y_onehot: np.ndarray, task: int,
             prior: PriorStore, weights: KLWeights, mode: str = "standard",
             train: bool = True, loss_scale: float = 1.0):
    """Loss and exact gradients for one batch.

    loss = loss_scale * (KL term - mean batch log-likelihood).
    """
    if x.shape[0] == 0:
        raise TensorError("empty batch")
    model.zero_grads()
    ll = accumulate_batch(model, x, y_onehot, task, train, ll_scale=loss_scale)
    kl = accumulate_kl(model, prior, weights, task, mode, scale=loss_scale)
    loss = -ll + kl
    if not np.isfinite(loss):
        raise TensorError("non-finite loss")
    return loss, GradientSet.from_model(model)


@dataclass
class FDFailure:
    name: str
    coord: str  # "mu" | "rho" | "value"
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FDReport:
    max_rel_err: float
    n_checked: int
    failures: list[FDFailure]

    @property
    def passed(self) -> bool:
        return not self.failures


def finite_diff_check(model: MPModel, x: np.ndarray, y_onehot: np.ndarray,
                      task: int, prior: PriorStore, weights: KLWeights,
                      h: float = 1e-5, tol: float = 1e-4,
                      mode: str = "standard", train: bool = True) -> FDReport:
    """Central finite differences vs analytic gradients, every coordinate.

    Relative error is |analytic - numeric| / max(1, |numeric|). Guarded to
    models with at most 10^4 parameter elements.
    """
    if model.n_elements > 10_000:
        raise TensorError(f"finite_diff_check guard: {model.n_elements} > 10^4 "
                          "parameter elements")
    saved = model.state()
    _, grads = backward(model, x, y_onehot, task, prior, weights, mode, train)

    def loss_now():
        return compute_loss(model, x, y_onehot, task, prior, weights, mode, train)

    failures: list[FDFailure] = []
    max_err = 0.0
    n = 0

    def probe(arr, analytic, name, coord):
        nonlocal max_err, n
        flat = arr.reshape(-1)
        g = analytic.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_now()
            flat[i] = keep - h
            down = loss_now()
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            err = abs(g[i] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
            n += 1
            if err > tol:
                failures.append(FDFailure(name, coord, i, float(g[i]),
                                          float(numeric), float(err)))

    for e in model.entries:
        if e.head_task is not None and e.head_task != task:
            continue
        if e.gaussian:
            probe(e.param.mu, grads.d_mu[e.name], e.name, "mu")
            probe(e.param.rho, grads.d_rho[e.name], e.name, "rho")
        else:
            probe(e.param.value, grads.d_plain[e.name], e.name, "value")

    model.load_state(saved)
    return FDReport(max_rel_err=max_err, n_checked=n, failures=failures)
