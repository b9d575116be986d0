"""Closed-form training objective: Gaussian log-likelihood of the propagated
predictive distribution plus a per-parameter-weighted KL pull toward a prior.

The KL has two modes. `standard` is the actual Gaussian KL(q || p); the
`as_printed` variant divides the mean term by the posterior variance
instead of the prior variance. Both coincide when the variances agree;
`standard` is the default.
"""

from __future__ import annotations

import numpy as np

from .moments import MomentPair
from .tensor import FLOAT, TensorError

LOG_2PI = float(np.log(2.0 * np.pi))

KL_MODES = ("standard", "as_printed")


class PriorStore:
    """Per-element (mean, variance) prior mirroring the model's Gaussian
    parameters, kept as flat vectors over the model's element index space."""

    def __init__(self, mu_p: np.ndarray, sigma2_p: np.ndarray):
        if mu_p.shape != sigma2_p.shape:
            raise TensorError("prior mean/variance shapes differ")
        if np.any(sigma2_p <= 0):
            raise TensorError("prior variances must be positive")
        self.mu_p = np.ascontiguousarray(mu_p, dtype=FLOAT)
        self.sigma2_p = np.ascontiguousarray(sigma2_p, dtype=FLOAT)

    @classmethod
    def standard_normal(cls, n_elements: int) -> "PriorStore":
        return cls(np.zeros(n_elements), np.ones(n_elements))

    @classmethod
    def from_posterior(cls, model) -> "PriorStore":
        """Snapshot the current variational distribution as the new prior."""
        mu = np.zeros(model.n_elements)
        s2 = np.ones(model.n_elements)
        for e in model.gaussian_entries():
            mu[e.offset:e.offset + e.size] = e.param.mu.reshape(-1)
            s2[e.offset:e.offset + e.size] = e.param.sigma2.reshape(-1)
        return cls(mu, s2)


class KLWeights:
    """Flat per-element KL weights; non-negative."""

    def __init__(self, tau: np.ndarray):
        tau = np.ascontiguousarray(tau, dtype=FLOAT)
        if np.any(tau < 0):
            raise TensorError("KL weights must be non-negative")
        self.tau = tau

    @classmethod
    def uniform(cls, n_elements: int, tau0: float) -> "KLWeights":
        return cls(np.full(n_elements, tau0, dtype=FLOAT))


def _check_one_hot(y: np.ndarray):
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise TensorError("labels must be one-hot")


def gaussian_log_likelihood(y_onehot: np.ndarray, pred: MomentPair,
                            var_floor: float = 0.0) -> float:
    """Diagonal Gaussian log-density of a one-hot target under the prediction.

    -(N/2) ln 2pi - 1/2 sum ln sigma2_i - 1/2 sum (y_i - mu_i)^2 / sigma2_i
    """
    y = np.asarray(y_onehot, dtype=FLOAT)
    _check_one_hot(y)
    if np.any(pred.var < var_floor):
        raise TensorError("predictive variance below floor")
    n = y.shape[-1]
    resid = y - pred.mean
    return float(-0.5 * n * LOG_2PI
                 - 0.5 * np.sum(np.log(pred.var))
                 - 0.5 * np.sum(resid * resid / pred.var))


def batch_log_likelihood(y_onehot: np.ndarray, pred: MomentPair) -> np.ndarray:
    """Per-sample log-likelihood vector for a batched prediction."""
    y = np.asarray(y_onehot, dtype=FLOAT)
    _check_one_hot(y)
    n = y.shape[-1]
    resid = y - pred.mean
    return (-0.5 * n * LOG_2PI
            - 0.5 * np.sum(np.log(pred.var), axis=-1)
            - 0.5 * np.sum(resid * resid / pred.var, axis=-1))


def log_likelihood_grads(y_onehot: np.ndarray, pred: MomentPair):
    """d loglik / d mean and d loglik / d var, elementwise."""
    y = np.asarray(y_onehot, dtype=FLOAT)
    resid = y - pred.mean
    d_mean = resid / pred.var
    d_var = -0.5 / pred.var + 0.5 * resid * resid / (pred.var * pred.var)
    return d_mean, d_var


def gaussian_kl(mu_q, sigma2_q, mu_p, sigma2_p, mode: str = "standard") -> np.ndarray:
    """Per-element KL divergence between diagonal Gaussians q and p."""
    if mode not in KL_MODES:
        raise TensorError(f"unknown KL mode {mode!r}")
    mu_q, sigma2_q = np.asarray(mu_q, dtype=FLOAT), np.asarray(sigma2_q, dtype=FLOAT)
    mu_p, sigma2_p = np.asarray(mu_p, dtype=FLOAT), np.asarray(sigma2_p, dtype=FLOAT)
    if np.any(sigma2_q <= 0) or np.any(sigma2_p <= 0):
        raise TensorError("KL needs positive variances")
    d2 = (mu_q - mu_p) ** 2
    log_ratio = np.log(sigma2_p / sigma2_q)
    if mode == "standard":
        return 0.5 * (log_ratio + (sigma2_q + d2) / sigma2_p - 1.0)
    return 0.5 * (-1.0 + d2 / sigma2_q + log_ratio + sigma2_q / sigma2_p)


def gaussian_kl_grads(mu_q, sigma2_q, mu_p, sigma2_p, mode: str = "standard"):
    """d KL / d mu_q and d KL / d sigma2_q, elementwise."""
    if mode == "standard":
        d_mu = (mu_q - mu_p) / sigma2_p
        d_s2 = 0.5 * (1.0 / sigma2_p - 1.0 / sigma2_q)
    elif mode == "as_printed":
        d2 = (mu_q - mu_p) ** 2
        d_mu = (mu_q - mu_p) / sigma2_q
        d_s2 = 0.5 * (-d2 / (sigma2_q * sigma2_q) - 1.0 / sigma2_q + 1.0 / sigma2_p)
    else:
        raise TensorError(f"unknown KL mode {mode!r}")
    return d_mu, d_s2


def model_kl_terms(model, prior: PriorStore, task: int | None = None,
                   mode: str = "standard"):
    """Per-element KL over trunk plus (optionally) one task's head.

    Returns (kl values, element index) as flat arrays; inactive heads are
    excluded so they receive neither loss nor gradient.
    """
    kls, idxs = [], []
    for e in model.gaussian_entries():
        if e.head_task is not None and task is not None and e.head_task != task:
            continue
        sl = slice(e.offset, e.offset + e.size)
        kl = gaussian_kl(e.param.mu.reshape(-1), e.param.sigma2.reshape(-1),
                         prior.mu_p[sl], prior.sigma2_p[sl], mode)
        kls.append(kl)
        idxs.append(np.arange(e.offset, e.offset + e.size))
    return np.concatenate(kls), np.concatenate(idxs)


def elbo(loglik: float, model, prior: PriorStore, weights: KLWeights,
         task: int | None = None, mode: str = "standard") -> float:
    """loglik minus the tau-weighted per-element KL sum."""
    if weights.tau.size != model.n_elements:
        raise TensorError(f"KL weight length {weights.tau.size} != "
                          f"parameter element count {model.n_elements}")
    kl, idx = model_kl_terms(model, prior, task, mode)
    return float(loglik - np.sum(weights.tau[idx] * kl))
