"""Dense float64 tensors, fixed-order linear-algebra kernels, seeded randomness.

All numeric state in this package is a C-contiguous float64 ndarray. The
kernels here pin their floating-point reduction order (ascending inner
index, single accumulator), so a training run is bit-reproducible given a
seed and results match a naive loop transcription exactly. BLAS is
deliberately not used on any production path: its summation order is
unspecified and varies between libraries.

Randomness comes from numpy's Philox (4x64, counter-based) generator,
never the platform default. The same seed yields the same draw sequence
on every platform.
"""

from __future__ import annotations

import numba
import numpy as np

FLOAT = np.float64

RNG_ALGORITHM = "philox4x64"


class TensorError(ValueError):
    """Shape, domain, or finiteness violation in a tensor operation."""


def as_tensor(data, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(data, dtype=FLOAT)
    if shape is not None and arr.shape != tuple(shape):
        raise TensorError(f"expected shape {tuple(shape)}, got {arr.shape}")
    assert_finite(arr, "as_tensor input")
    return arr


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise TensorError(f"non-finite values in {what}")


class SeededRng:
    """Deterministic random source: one Philox stream per seed.

    Child streams (`spawn`) are derived through SeedSequence spawn keys, so
    a run's master seed fixes every subsidiary stream.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def spawn(self) -> "SeededRng":
        """Derive an independent child stream; advances the spawn counter."""
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        child._seq = self._seq.spawn(1)[0]
        child._gen = np.random.Generator(np.random.Philox(child._seq))
        return child

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size).astype(FLOAT)

    def standard_normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size, dtype=FLOAT)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


def gaussian_sample(rng: SeededRng, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Elementwise independent normal draws; var == 0 returns mean exactly.

    Test/oracle utility only: production forward passes are sampling-free.
    """
    mean = np.asarray(mean, dtype=FLOAT)
    var = np.asarray(var, dtype=FLOAT)
    if mean.shape != var.shape:
        raise TensorError(f"mean shape {mean.shape} != var shape {var.shape}")
    if np.any(var < 0):
        raise TensorError("negative variance in gaussian_sample")
    z = rng.standard_normal(mean.shape)
    return mean + np.sqrt(var) * z


@numba.njit(cache=True)
def _matmul_kernel(a, b, out):  # pragma: no cover - jitted
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for kk in range(k):
            aik = a[i, kk]
            for j in range(n):
                out[i, j] += aik * b[kk, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with sequential ascending-k accumulation per element.

    Bit-identical to `for i,j: sum over k of a[i,k]*b[k,j]` in that order.
    """
    a = np.ascontiguousarray(a, dtype=FLOAT)
    b = np.ascontiguousarray(b, dtype=FLOAT)
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=FLOAT)
    _matmul_kernel(a, b, out)
    assert_finite(out, "matmul output")
    return out


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


@numba.njit(cache=True)
def _im2col_kernel(x, k1, k2, s1, s2, p1, p2, out1, out2, cols):  # pragma: no cover
    ch = x.shape[2]
    for r in range(out1):
        for c in range(out2):
            o = r * out2 + c
            row = 0
            for kr in range(k1):
                ir = r * s1 + kr - p1
                for kc in range(k2):
                    ic = c * s2 + kc - p2
                    inside = 0 <= ir < x.shape[0] and 0 <= ic < x.shape[1]
                    for cc in range(ch):
                        cols[row, o] = x[ir, ic, cc] if inside else 0.0
                        row += 1


@numba.njit(cache=True)
def _col2im_kernel(cols, k1, k2, s1, s2, p1, p2, out1, out2, x):  # pragma: no cover
    ch = x.shape[2]
    for r in range(out1):
        for c in range(out2):
            o = r * out2 + c
            row = 0
            for kr in range(k1):
                ir = r * s1 + kr - p1
                for kc in range(k2):
                    ic = c * s2 + kc - p2
                    inside = 0 <= ir < x.shape[0] and 0 <= ic < x.shape[1]
                    for cc in range(ch):
                        if inside:
                            x[ir, ic, cc] += cols[row, o]
                        row += 1


def _check_geometry(shape, kernel, stride, pad):
    n1, n2, _ = shape
    (k1, k2), (s1, s2), (p1, p2) = kernel, stride, pad
    if k1 > n1 + 2 * p1 or k2 > n2 + 2 * p2:
        raise TensorError(f"kernel {kernel} larger than padded input {shape}")
    out1 = conv_output_extent(n1, k1, s1, p1)
    out2 = conv_output_extent(n2, k2, s2, p2)
    if out1 < 1 or out2 < 1:
        raise TensorError("convolution geometry yields empty output")
    return out1, out2


def im2col(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int] = (1, 1),
           pad: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Extract receptive-field patches of an (n1, n2, ch) image as columns.

    Column o (= r_out * out2 + c_out) holds the patch in (row, col, channel)
    order. Padding contributes zeros. Result is (k1*k2*ch, out1*out2).
    """
    x = np.ascontiguousarray(x, dtype=FLOAT)
    if x.ndim != 3:
        raise TensorError("im2col expects an (n1, n2, ch) tensor")
    out1, out2 = _check_geometry(x.shape, kernel, stride, pad)
    k1, k2 = kernel
    cols = np.empty((k1 * k2 * x.shape[2], out1 * out2), dtype=FLOAT)
    _im2col_kernel(x, k1, k2, stride[0], stride[1], pad[0], pad[1], out1, out2, cols)
    return cols


def col2im(cols: np.ndarray, image_shape: tuple[int, int, int],
           kernel: tuple[int, int], stride: tuple[int, int] = (1, 1),
           pad: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Adjoint of im2col: scatter-add columns back onto an image of zeros."""
    cols = np.ascontiguousarray(cols, dtype=FLOAT)
    out1, out2 = _check_geometry(image_shape, kernel, stride, pad)
    k1, k2 = kernel
    if cols.shape != (k1 * k2 * image_shape[2], out1 * out2):
        raise TensorError(f"col2im got {cols.shape}, geometry wants "
                          f"{(k1 * k2 * image_shape[2], out1 * out2)}")
    x = np.zeros(image_shape, dtype=FLOAT)
    _col2im_kernel(cols, k1, k2, stride[0], stride[1], pad[0], pad[1], out1, out2, x)
    return x
