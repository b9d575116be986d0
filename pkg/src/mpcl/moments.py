"""Moment-propagation layers: analytic (mean, variance) forward rules.

Every layer maps a MomentPair to a MomentPair, treating features as
diagonal Gaussians. Weights are Gaussian with learned mean and a softplus
variance pre-parameter; nonlinearities use the first-order Taylor rule
(mean through the function, variance scaled by the squared derivative).
Each layer also carries a hand-derived adjoint for both the mean path and
the variance path, so the closed-form training objective is exactly
differentiable end to end.

A MomentPair here is batched: the leading axis indexes samples, i.e. it
stands for a list of per-sample moment pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .tensor import (
    FLOAT,
    SeededRng,
    TensorError,
    assert_finite,
    col2im,
    conv_output_extent,
    im2col,
    matmul,
)

DEFAULT_VAR_FLOOR = 1e-6


def softplus(rho: np.ndarray) -> np.ndarray:
    """log(1 + e^rho), overflow-safe; strictly positive."""
    rho = np.asarray(rho, dtype=FLOAT)
    return np.where(rho > 30.0, rho, np.log1p(np.exp(np.minimum(rho, 30.0))))


def softplus_grad(rho: np.ndarray) -> np.ndarray:
    """d softplus / d rho = sigmoid(rho)."""
    rho = np.asarray(rho, dtype=FLOAT)
    out = np.empty_like(rho)
    pos = rho >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-rho[pos]))
    e = np.exp(rho[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def inv_softplus(y) -> np.ndarray:
    """Inverse of softplus for y > 0: log(e^y - 1)."""
    y = np.asarray(y, dtype=FLOAT)
    if np.any(y <= 0):
        raise TensorError("inv_softplus needs positive input")
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass
class GaussianParameter:
    """Weight distribution: mean plus variance pre-parameter (sigma2 = softplus(rho)).

    `mask`, when set, pins pruned coordinates: their gradients are zeroed
    exactly so they can never move again.
    """

    mu: np.ndarray
    rho: np.ndarray
    g_mu: np.ndarray = field(init=False)
    g_rho: np.ndarray = field(init=False)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=FLOAT)
        self.rho = np.ascontiguousarray(self.rho, dtype=FLOAT)
        if self.mu.shape != self.rho.shape:
            raise TensorError("mu and rho shapes differ")
        self.g_mu = np.zeros_like(self.mu)
        self.g_rho = np.zeros_like(self.rho)

    @property
    def sigma2(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def size(self) -> int:
        return self.mu.size

    def zero_grad(self):
        self.g_mu[...] = 0.0
        self.g_rho[...] = 0.0

    def accumulate(self, d_mu: np.ndarray, d_sigma2: np.ndarray):
        """Add gradients, chaining d sigma2 -> d rho; masked coordinates stay 0."""
        d_rho = d_sigma2 * softplus_grad(self.rho)
        if self.mask is not None:
            d_mu = d_mu * self.mask
            d_rho = d_rho * self.mask
        self.g_mu += d_mu
        self.g_rho += d_rho


@dataclass
class PlainParameter:
    """Deterministic learnable tensor (batch-norm scale/shift)."""

    value: np.ndarray
    g: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=FLOAT)
        self.g = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.g[...] = 0.0


@dataclass
class MomentPair:
    """A feature tensor carried as (mean, variance); leading axis = batch."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def checked(cls, mean: np.ndarray, var: np.ndarray) -> "MomentPair":
        if mean.shape != var.shape:
            raise TensorError(f"moment shapes differ: {mean.shape} vs {var.shape}")
        assert_finite(mean, "moment mean")
        assert_finite(var, "moment variance")
        if np.any(var < 0):
            raise TensorError("negative variance in MomentPair")
        return cls(mean, var)

    @classmethod
    def deterministic(cls, x: np.ndarray) -> "MomentPair":
        x = np.ascontiguousarray(x, dtype=FLOAT)
        assert_finite(x, "input")
        return cls(x, np.zeros_like(x))


# ---------------------------------------------------------------------------
# Pure moment rules (no parameterization, no caches); tests drive these
# directly, including with exactly-zero variances.
# ---------------------------------------------------------------------------

def linear_moments(x_mean, x_var, w_mu, w_sigma2, b_mu, b_sigma2):
    """Affine map of a diagonal Gaussian by Gaussian weights.

    mean_i  = w_mu[:,i] . x_mean + b_mu[i]
    var_i   = sum_j x_var_j w_sigma2_ji + sum_j x_mean_j^2 w_sigma2_ji
            + sum_j w_mu_ji^2 x_var_j + b_sigma2_i
    Batched over the leading axis of x_mean/x_var.
    """
    if np.any(x_var < 0):
        raise TensorError("negative input variance")
    mean = matmul(x_mean, w_mu) + b_mu
    var = (matmul(x_var + x_mean * x_mean, w_sigma2)
           + matmul(x_var, w_mu * w_mu) + b_sigma2)
    return mean, var


def relu_moments(mean, var):
    gate = (mean > 0).astype(FLOAT)
    return np.maximum(mean, 0.0), var * gate


def tanh_moments(mean, var):
    t = np.tanh(mean)
    d = 1.0 - t * t
    return t, var * d * d


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_moments(z_mean, z_var, var_floor=DEFAULT_VAR_FLOOR):
    """Softmax mean with full-Jacobian diagonal variance, floored.

    var_i = sum_j J_ij^2 z_var_j with J = diag(p) - p p^T, expanded to
    p_i^2 (z_var_i - 2 p_i z_var_i + sum_j p_j^2 z_var_j).
    """
    p = softmax_probs(z_mean)
    s = np.sum(p * p * z_var, axis=-1, keepdims=True)
    raw = p * p * (z_var - 2.0 * p * z_var + s)
    return p, np.maximum(raw, var_floor)


def batchnorm_moments(means, variances, batch_mean, batch_var, gamma, beta, eps):
    """Normalize a batch of moment pairs by given feature statistics, then affine."""
    s = batch_var + eps
    m_hat = (means - batch_mean) / np.sqrt(s)
    v_hat = variances / s
    return gamma * m_hat + beta, gamma * gamma * v_hat


# ---------------------------------------------------------------------------
# Layer objects: parameterized forward + cached adjoint.
# ---------------------------------------------------------------------------

LAYER_KINDS = ("linear", "conv2d", "batchnorm1d", "batchnorm2d", "relu", "tanh",
               "softmax_head", "flatten", "maxpool")


@dataclass
class LayerSpec:
    """Declarative layer description; adjacent specs must compose by shape."""

    kind: str
    in_features: int | None = None
    out_features: int | None = None
    filters: int | None = None
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    pad: tuple[int, int] | None = None
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise TensorError(f"unknown layer kind {self.kind!r}")
        if self.kernel is not None:
            self.kernel = tuple(self.kernel)
        if self.stride is not None:
            self.stride = tuple(self.stride)
        if self.pad is not None:
            self.pad = tuple(self.pad)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for k in ("in_features", "out_features", "filters", "kernel", "stride", "pad"):
            v = getattr(self, k)
            if v is not None:
                d[k] = list(v) if isinstance(v, tuple) else v
        if self.kind.startswith("batchnorm"):
            d["eps"] = self.eps
            d["momentum"] = self.momentum
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        kw = dict(d)
        for k in ("kernel", "stride", "pad"):
            if kw.get(k) is not None:
                kw[k] = tuple(kw[k])
        return cls(**kw)


def _init_gaussian(rng: SeededRng, shape, fan_in: int, rho_init: float) -> GaussianParameter:
    bound = 1.0 / np.sqrt(fan_in)
    mu = rng.uniform(-bound, bound, shape)
    rho = np.full(shape, rho_init, dtype=FLOAT)
    return GaussianParameter(mu, rho)


class LinearLayer:
    def __init__(self, in_features: int, out_features: int, rng: SeededRng,
                 rho_init: float):
        self.in_features = in_features
        self.out_features = out_features
        self.w = _init_gaussian(rng, (in_features, out_features), in_features, rho_init)
        self.b = GaussianParameter(np.zeros(out_features),
                                   np.full(out_features, rho_init, dtype=FLOAT))
        self._cache = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, mp: MomentPair, train: bool) -> MomentPair:
        w_sigma2 = self.w.sigma2
        b_sigma2 = self.b.sigma2
        mean, var = linear_moments(mp.mean, mp.var, self.w.mu, w_sigma2,
                                   self.b.mu, b_sigma2)
        self._cache = (mp, w_sigma2)
        return MomentPair.checked(mean, var)

    def backward(self, d_mean: np.ndarray, d_var: np.ndarray):
        mp, w_sigma2 = self._cache
        xm, xv = mp.mean, mp.var
        w_mu = self.w.mu
        d_wmu = matmul(xm.T, d_mean) + 2.0 * w_mu * matmul(xv.T, d_var)
        d_wsig = matmul((xv + xm * xm).T, d_var)
        self.w.accumulate(d_wmu, d_wsig)
        self.b.accumulate(d_mean.sum(axis=0), d_var.sum(axis=0))
        d_xm = matmul(d_mean, w_mu.T) + 2.0 * xm * matmul(d_var, w_sigma2.T)
        d_xv = matmul(d_var, (w_sigma2 + w_mu * w_mu).T)
        return d_xm, d_xv


class Conv2dLayer:
    """2-D convolution on (B, n1, n2, ch) moments via im2col + linear rule.

    Weights are stored vectorized per filter in (row, col, channel) patch
    order, shape (k1*k2*ch, filters).
    """

    def __init__(self, in_shape: tuple[int, int, int], filters: int,
                 kernel: tuple[int, int], stride: tuple[int, int],
                 pad: tuple[int, int], rng: SeededRng, rho_init: float):
        self.in_shape = tuple(in_shape)
        n1, n2, ch = self.in_shape
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.filters = filters
        k = kernel[0] * kernel[1] * ch
        self.out1 = conv_output_extent(n1, kernel[0], stride[0], pad[0])
        self.out2 = conv_output_extent(n2, kernel[1], stride[1], pad[1])
        if self.out1 < 1 or self.out2 < 1:
            raise TensorError("conv geometry yields empty output")
        self.w = _init_gaussian(rng, (k, filters), k, rho_init)
        self.b = GaussianParameter(np.zeros(filters),
                                   np.full(filters, rho_init, dtype=FLOAT))
        self._cache = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def out_shape(self):
        return (self.out1, self.out2, self.filters)

    def forward(self, mp: MomentPair, train: bool) -> MomentPair:
        if mp.mean.shape[1:] != self.in_shape:
            raise TensorError(f"conv expected {self.in_shape}, got {mp.mean.shape[1:]}")
        B = mp.mean.shape[0]
        w_sigma2 = self.w.sigma2
        b_sigma2 = self.b.sigma2
        means = np.empty((B, self.out1, self.out2, self.filters), dtype=FLOAT)
        variances = np.empty_like(means)
        cols = []
        for s in range(B):
            a_m = im2col(mp.mean[s], self.kernel, self.stride, self.pad).T.copy()
            a_v = im2col(mp.var[s], self.kernel, self.stride, self.pad).T.copy()
            m, v = linear_moments(a_m, a_v, self.w.mu, w_sigma2, self.b.mu, b_sigma2)
            means[s] = m.reshape(self.out1, self.out2, self.filters)
            variances[s] = v.reshape(self.out1, self.out2, self.filters)
            cols.append((a_m, a_v))
        self._cache = (cols, w_sigma2)
        return MomentPair.checked(means, variances)

    def backward(self, d_mean: np.ndarray, d_var: np.ndarray):
        cols, w_sigma2 = self._cache
        B = d_mean.shape[0]
        w_mu = self.w.mu
        n_out = self.out1 * self.out2
        d_wmu = np.zeros_like(w_mu)
        d_wsig = np.zeros_like(w_mu)
        d_bmu = np.zeros(self.filters, dtype=FLOAT)
        d_bsig = np.zeros(self.filters, dtype=FLOAT)
        d_xm = np.empty((B,) + self.in_shape, dtype=FLOAT)
        d_xv = np.empty((B,) + self.in_shape, dtype=FLOAT)
        for s in range(B):
            a_m, a_v = cols[s]
            dm = d_mean[s].reshape(n_out, self.filters)
            dv = d_var[s].reshape(n_out, self.filters)
            d_wmu += matmul(a_m.T, dm) + 2.0 * w_mu * matmul(a_v.T, dv)
            d_wsig += matmul((a_v + a_m * a_m).T, dv)
            d_bmu += dm.sum(axis=0)
            d_bsig += dv.sum(axis=0)
            d_am = matmul(dm, w_mu.T) + 2.0 * a_m * matmul(dv, w_sigma2.T)
            d_av = matmul(dv, (w_sigma2 + w_mu * w_mu).T)
            d_xm[s] = col2im(d_am.T.copy(), self.in_shape, self.kernel,
                             self.stride, self.pad)
            d_xv[s] = col2im(d_av.T.copy(), self.in_shape, self.kernel,
                             self.stride, self.pad)
        self.w.accumulate(d_wmu, d_wsig)
        self.b.accumulate(d_bmu, d_bsig)
        return d_xm, d_xv


class BatchNormLayer:
    """Feature-wise (1d) or channel-wise (2d) normalization of moments.

    Batch statistics are taken over the batch of means; the variance path
    is scaled by the same denominator. Scale/shift are deterministic
    parameters. Running statistics use an exponential moving average
    (momentum fraction of the new batch statistic).
    """

    def __init__(self, num_features: int, kind: str, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.num_features = num_features
        self.kind = kind
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = PlainParameter(np.ones(num_features))
        self.beta = PlainParameter(np.zeros(num_features))
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def _flatten(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(-1, self.num_features)

    def forward(self, mp: MomentPair, train: bool) -> MomentPair:
        shape = mp.mean.shape
        if shape[-1] != self.num_features:
            raise TensorError(f"batchnorm expected {self.num_features} features, "
                              f"got {shape[-1]}")
        xm = self._flatten(mp.mean)
        xv = self._flatten(mp.var)
        if train:
            if xm.shape[0] < 1:
                raise TensorError("empty batch in batch-norm train mode")
            mu_n = xm.mean(axis=0)
            var_n = ((xm - mu_n) ** 2).mean(axis=0)
            if self.running_mean is None:
                self.running_mean = mu_n.copy()
                self.running_var = var_n.copy()
            else:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mu_n
                self.running_var = (1 - m) * self.running_var + m * var_n
        else:
            if self.running_mean is None:
                raise TensorError("batch-norm eval before any train step")
            mu_n, var_n = self.running_mean, self.running_var
        out_m, out_v = batchnorm_moments(xm, xv, mu_n, var_n,
                                         self.gamma.value, self.beta.value, self.eps)
        s = var_n + self.eps
        self._cache = (xm, xv, mu_n, s, train, shape)
        return MomentPair.checked(out_m.reshape(shape), out_v.reshape(shape))

    def backward(self, d_mean: np.ndarray, d_var: np.ndarray):
        xm, xv, mu_n, s, train, shape = self._cache
        dm = self._flatten(d_mean)
        dv = self._flatten(d_var)
        gamma = self.gamma.value
        isd = 1.0 / np.sqrt(s)
        m_hat = (xm - mu_n) * isd
        v_hat = xv / s
        self.gamma.g += (dm * m_hat).sum(axis=0) + 2.0 * gamma * (dv * v_hat).sum(axis=0)
        self.beta.g += dm.sum(axis=0)
        d_mhat = dm * gamma
        d_vhat = dv * gamma * gamma
        d_xv = d_vhat / s
        d_xm = d_mhat * isd
        if train:
            B = xm.shape[0]
            # s and mu_n depend on the batch of means.
            d_s = (-(d_mhat * (xm - mu_n)).sum(axis=0) * 0.5 * isd / s
                   - (d_vhat * xv).sum(axis=0) / (s * s))
            d_mun = -(d_mhat.sum(axis=0)) * isd
            d_xm = d_xm + d_mun / B + d_s * 2.0 / B * (xm - mu_n)
        return d_xm.reshape(shape), d_xv.reshape(shape)


class ReluLayer:
    def __init__(self):
        self._gate = None

    def params(self):
        return []

    def forward(self, mp: MomentPair, train: bool) -> MomentPair:
        mean, var = relu_moments(mp.mean, mp.var)
        self._gate = (mp.mean > 0).astype(FLOAT)  # derivative at 0 defined as 0
        return MomentPair.checked(mean, var)

    def backward(self, d_mean, d_var):
        return d_mean * self._gate, d_var * self._gate


class TanhLayer:
    def __init__(self):
        self._cache = None

    def params(self):
        return []

    def forward(self, mp: MomentPair, train: bool) -> MomentPair:
        t = np.tanh(mp.mean)
        d = 1.0 - t * t
        self._cache = (t, d, mp.var)
        return MomentPair.checked(t, mp.var * d * d)

    def backward(self, d_mean, d_var):
        t, d, xv = self._cache
        d_xm = d_mean * d - d_var * xv * 4.0 * t * d * d
        d_xv = d_var * d * d
        return d_xm, d_xv


class SoftmaxHeadLayer:
    """Softmax output with full-Jacobian diagonal variance and a variance floor."""

    def __init__(self, var_floor: float = DEFAULT_VAR_FLOOR):
        self.var_floor = float(var_floor)
        self._cache = None

    def params(self):
        return []

    def forward(self, mp: MomentPair, train: bool) -> MomentPair:
        if mp.mean.shape[-1] < 2:
            raise TensorError("softmax head needs at least 2 classes")
        p, var = softmax_moments(mp.mean, mp.var, self.var_floor)
        s = np.sum(p * p * mp.var, axis=-1, keepdims=True)
        raw = p * p * (mp.var - 2.0 * p * mp.var + s)
        self._cache = (p, mp.var, s, raw > self.var_floor)
        return MomentPair.checked(p, var)

    def backward(self, d_mean, d_var):
        p, zv, s, gate = self._cache
        d_raw = d_var * gate
        t = np.sum(d_raw * p * p, axis=-1, keepdims=True)
        d_zv = d_raw * (p * p - 2.0 * p ** 3) + p * p * t
        dp = (d_mean + d_raw * (2.0 * p * zv - 6.0 * p * p * zv + 2.0 * p * s)
              + 2.0 * p * zv * t)
        d_zm = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        return d_zm, d_zv


class FlattenLayer:
    def __init__(self):
        self._shape = None

    def params(self):
        return []

    def forward(self, mp: MomentPair, train: bool) -> MomentPair:
        self._shape = mp.mean.shape
        B = self._shape[0]
        return MomentPair(mp.mean.reshape(B, -1), mp.var.reshape(B, -1))

    def backward(self, d_mean, d_var):
        return d_mean.reshape(self._shape), d_var.reshape(self._shape)


@numba.njit(cache=True)
def _maxpool_kernel(mean, var, k1, k2, s1, s2, out_m, out_v, idx):  # pragma: no cover
    B, H, W, C = mean.shape
    o1 = out_m.shape[1]
    o2 = out_m.shape[2]
    for b in range(B):
        for r in range(o1):
            for c in range(o2):
                for ch in range(C):
                    best = -np.inf
                    bi = 0
                    for kr in range(k1):
                        ir = r * s1 + kr
                        for kc in range(k2):
                            ic = c * s2 + kc
                            v = mean[b, ir, ic, ch]
                            if v > best:
                                best = v
                                bi = ir * W + ic
                    out_m[b, r, c, ch] = best
                    out_v[b, r, c, ch] = var[b, bi // W, bi % W, ch]
                    idx[b, r, c, ch] = bi


@numba.njit(cache=True)
def _maxpool_backward_kernel(d_out_m, d_out_v, idx, d_in_m, d_in_v):  # pragma: no cover
    B, o1, o2, C = d_out_m.shape
    W = d_in_m.shape[2]
    for b in range(B):
        for r in range(o1):
            for c in range(o2):
                for ch in range(C):
                    bi = idx[b, r, c, ch]
                    d_in_m[b, bi // W, bi % W, ch] += d_out_m[b, r, c, ch]
                    d_in_v[b, bi // W, bi % W, ch] += d_out_v[b, r, c, ch]


class MaxPoolLayer:
    """Max pooling on the mean; the variance of the argmax-mean element
    rides along. First maximum wins on ties."""

    def __init__(self, in_shape: tuple[int, int, int], kernel: tuple[int, int],
                 stride: tuple[int, int] | None = None):
        self.in_shape = tuple(in_shape)
        self.kernel = kernel
        self.stride = stride if stride is not None else kernel
        H, W, C = self.in_shape
        self.o1 = (H - kernel[0]) // self.stride[0] + 1
        self.o2 = (W - kernel[1]) // self.stride[1] + 1
        if self.o1 < 1 or self.o2 < 1:
            raise TensorError("maxpool geometry yields empty output")
        self._idx = None

    def params(self):
        return []

    def out_shape(self):
        return (self.o1, self.o2, self.in_shape[2])

    def forward(self, mp: MomentPair, train: bool) -> MomentPair:
        B = mp.mean.shape[0]
        C = self.in_shape[2]
        out_m = np.empty((B, self.o1, self.o2, C), dtype=FLOAT)
        out_v = np.empty_like(out_m)
        idx = np.empty((B, self.o1, self.o2, C), dtype=np.int64)
        _maxpool_kernel(mp.mean, mp.var, self.kernel[0], self.kernel[1],
                        self.stride[0], self.stride[1], out_m, out_v, idx)
        self._idx = idx
        return MomentPair.checked(out_m, out_v)

    def backward(self, d_mean, d_var):
        B = d_mean.shape[0]
        d_in_m = np.zeros((B,) + self.in_shape, dtype=FLOAT)
        d_in_v = np.zeros_like(d_in_m)
        _maxpool_backward_kernel(d_mean, d_var, self._idx, d_in_m, d_in_v)
        return d_in_m, d_in_v


# ---------------------------------------------------------------------------
# Model: shared trunk + per-task softmax heads.
# ---------------------------------------------------------------------------

@dataclass
class ParamEntry:
    """One learnable tensor and its slice of the flat per-element index space."""

    name: str
    param: GaussianParameter | PlainParameter
    offset: int
    size: int
    head_task: int | None  # None = trunk
    gaussian: bool


def _build_layer(spec: LayerSpec, in_shape, rng: SeededRng, rho_init: float,
                 var_floor: float):
    kind = spec.kind
    if kind == "linear":
        if len(in_shape) != 1:
            raise TensorError("linear layer needs flat input; add a flatten layer")
        n_in = spec.in_features if spec.in_features is not None else in_shape[0]
        if n_in != in_shape[0]:
            raise TensorError(f"linear in_features {n_in} != incoming {in_shape[0]}")
        layer = LinearLayer(n_in, spec.out_features, rng, rho_init)
        return layer, (spec.out_features,)
    if kind == "conv2d":
        if len(in_shape) != 3:
            raise TensorError("conv2d needs (n1, n2, ch) input")
        layer = Conv2dLayer(in_shape, spec.filters, spec.kernel,
                            spec.stride or (1, 1), spec.pad or (0, 0), rng, rho_init)
        return layer, layer.out_shape()
    if kind in ("batchnorm1d", "batchnorm2d"):
        want = 1 if kind == "batchnorm1d" else 3
        if len(in_shape) != want:
            raise TensorError(f"{kind} expects {want}-d features, got {in_shape}")
        layer = BatchNormLayer(in_shape[-1], kind, spec.eps, spec.momentum)
        return layer, in_shape
    if kind == "relu":
        return ReluLayer(), in_shape
    if kind == "tanh":
        return TanhLayer(), in_shape
    if kind == "flatten":
        return FlattenLayer(), (int(np.prod(in_shape)),)
    if kind == "maxpool":
        if len(in_shape) != 3:
            raise TensorError("maxpool needs (n1, n2, ch) input")
        layer = MaxPoolLayer(in_shape, spec.kernel, spec.stride)
        return layer, layer.out_shape()
    if kind == "softmax_head":
        raise TensorError("softmax_head is reserved for task heads")
    raise TensorError(f"unknown layer kind {kind!r}")


class MPModel:
    """Layer stack with a shared trunk and one (linear + softmax) head per task."""

    def __init__(self, trunk_specs: list[LayerSpec], input_shape: tuple[int, ...],
                 head_classes: dict[int, int], rng: SeededRng,
                 rho_init: float = -12.0, var_floor: float = DEFAULT_VAR_FLOOR):
        self.trunk_specs = list(trunk_specs)
        self.input_shape = tuple(input_shape)
        self.head_classes = dict(head_classes)
        self.rho_init = float(rho_init)
        self.var_floor = float(var_floor)

        self.trunk = []
        shape = self.input_shape
        for spec in self.trunk_specs:
            layer, shape = _build_layer(spec, shape, rng, rho_init, var_floor)
            self.trunk.append(layer)
        if len(shape) != 1:
            raise TensorError("trunk must end with flat features before the heads")
        self.feature_dim = shape[0]

        self.heads: dict[int, tuple[LinearLayer, SoftmaxHeadLayer]] = {}
        for task in sorted(self.head_classes):
            n_cls = self.head_classes[task]
            if n_cls < 2:
                raise TensorError("softmax head needs at least 2 classes")
            self.heads[task] = (LinearLayer(self.feature_dim, n_cls, rng, rho_init),
                                SoftmaxHeadLayer(var_floor))

        self.entries: list[ParamEntry] = []
        offset = 0
        for i, layer in enumerate(self.trunk):
            for pname, p in layer.params():
                self.entries.append(ParamEntry(
                    f"trunk.{i}.{pname}", p, offset, p.size, None,
                    isinstance(p, GaussianParameter)))
                offset += p.size
        for task in sorted(self.heads):
            head_linear, _ = self.heads[task]
            for pname, p in head_linear.params():
                self.entries.append(ParamEntry(
                    f"head.{task}.{pname}", p, offset, p.size, task, True))
                offset += p.size
        self.n_elements = offset
        self._active: list | None = None

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, task: int, train: bool = False) -> MomentPair:
        """Propagate a deterministic input batch through trunk and task head."""
        if task not in self.heads:
            raise TensorError(f"unknown task id {task}")
        if x.ndim == len(self.input_shape):  # single sample convenience
            x = x[None, ...]
        if x.shape[1:] != self.input_shape:
            raise TensorError(f"expected input {self.input_shape}, got {x.shape[1:]}")
        mp = MomentPair.deterministic(x)
        chain = list(self.trunk) + list(self.heads[task])
        for i, layer in enumerate(chain):
            try:
                mp = layer.forward(mp, train)
            except TensorError as err:
                raise TensorError(
                    f"{type(layer).__name__} at position {i}: {err}") from err
        self._active = chain
        return mp

    def backward(self, d_mean: np.ndarray, d_var: np.ndarray):
        if self._active is None:
            raise TensorError("backward before forward")
        for layer in reversed(self._active):
            d_mean, d_var = layer.backward(d_mean, d_var)
        return d_mean, d_var

    def zero_grads(self):
        for e in self.entries:
            e.param.zero_grad()

    # -- parameter bookkeeping ----------------------------------------------

    def gaussian_entries(self, trunk_only: bool = False) -> list[ParamEntry]:
        out = [e for e in self.entries if e.gaussian]
        if trunk_only:
            out = [e for e in out if e.head_task is None]
        return out

    def element_mask(self, *, trunk_only=False, gaussian_only=False,
                     task: int | None = None) -> np.ndarray:
        """Boolean mask over the flat per-element index space."""
        mask = np.zeros(self.n_elements, dtype=bool)
        for e in self.entries:
            if trunk_only and e.head_task is not None:
                continue
            if gaussian_only and not e.gaussian:
                continue
            if task is not None and e.head_task not in (None, task):
                continue
            mask[e.offset:e.offset + e.size] = True
        return mask

    def flat_mu_sigma2(self, entries=None):
        entries = self.entries if entries is None else entries
        mus, sig2s = [], []
        for e in entries:
            if not e.gaussian:
                continue
            mus.append(e.param.mu.reshape(-1))
            sig2s.append(e.param.sigma2.reshape(-1))
        return np.concatenate(mus), np.concatenate(sig2s)

    # -- state snapshot -----------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        st: dict[str, np.ndarray] = {}
        for e in self.entries:
            if e.gaussian:
                st[f"{e.name}.mu"] = e.param.mu.copy()
                st[f"{e.name}.rho"] = e.param.rho.copy()
                if e.param.mask is not None:
                    st[f"{e.name}.mask"] = e.param.mask.astype(FLOAT)
            else:
                st[f"{e.name}.value"] = e.param.value.copy()
        for i, layer in enumerate(self.trunk):
            if isinstance(layer, BatchNormLayer) and layer.running_mean is not None:
                st[f"trunk.{i}.running_mean"] = layer.running_mean.copy()
                st[f"trunk.{i}.running_var"] = layer.running_var.copy()
        return st

    def load_state(self, st: dict[str, np.ndarray]):
        for e in self.entries:
            if e.gaussian:
                e.param.mu[...] = st[f"{e.name}.mu"]
                e.param.rho[...] = st[f"{e.name}.rho"]
                key = f"{e.name}.mask"
                e.param.mask = (st[key] > 0.5) if key in st else None
            else:
                e.param.value[...] = st[f"{e.name}.value"]
        for i, layer in enumerate(self.trunk):
            if isinstance(layer, BatchNormLayer):
                key = f"trunk.{i}.running_mean"
                if key in st:
                    layer.running_mean = st[key].copy()
                    layer.running_var = st[f"trunk.{i}.running_var"].copy()

    def clone(self) -> "MPModel":
        twin = MPModel(self.trunk_specs, self.input_shape, self.head_classes,
                       SeededRng(0), self.rho_init, self.var_floor)
        twin.load_state(self.state())
        return twin
