"""Shared fixtures: random architectures for gradient sweeps and an offline
digit-image corpus standing in for MNIST (same shapes, same IDX pipeline)."""

import numpy as np

from mpcl.grad import one_hot
from mpcl.moments import BatchNormLayer, LayerSpec, MPModel
from mpcl.tensor import SeededRng


def make_digits_surrogate(n_train: int, n_test: int, seed: int):
    """Deterministic 28x28 grayscale digit images, byte-valued, 10 classes.

    Built offline from scikit-learn's bundled 8x8 digits: each output
    sample upscales a base digit 3x onto a 28x28 canvas with a seeded
    offset and pixel noise. Train and test draw from disjoint base images,
    so no underlying digit leaks across the boundary.

    Returns (train_images, train_labels, test_images, test_labels) with
    uint8 images shaped (n, 28, 28).
    """
    from sklearn.datasets import load_digits

    base = load_digits()
    images16 = base.images  # (1797, 8, 8), values 0..16
    labels = base.target
    rng = SeededRng(seed)

    train_pool, test_pool = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.shape[0])]
        cut = max(1, int(0.75 * idx.shape[0]))
        train_pool.append(idx[:cut])
        test_pool.append(idx[cut:])

    def render(pool, n):
        per_class = n // 10
        imgs = np.empty((per_class * 10, 28, 28), dtype=np.uint8)
        labs = np.empty(per_class * 10, dtype=np.uint8)
        k = 0
        for c in range(10):
            choices = pool[c]
            picks = rng.integers(0, choices.shape[0], per_class)
            offs = rng.integers(0, 5, (per_class, 2))
            noise = rng.standard_normal((per_class, 28, 28)) * 1.2
            for j in range(per_class):
                canvas = np.zeros((28, 28))
                big = np.kron(images16[choices[picks[j]]], np.ones((3, 3)))
                r, cc = offs[j]
                canvas[r:r + 24, cc:cc + 24] = big
                canvas += noise[j]
                imgs[k] = np.clip(canvas * (255.0 / 16.0), 0, 255).astype(np.uint8)
                labs[k] = c
                k += 1
        perm = rng.permutation(imgs.shape[0])
        return imgs[perm], labs[perm]

    tr_i, tr_l = render(train_pool, n_train)
    te_i, te_l = render(test_pool, n_test)
    return tr_i, tr_l, te_i, te_l


def random_architecture(seed: int):
    """A small random model (mix of layer kinds) plus a matching batch.

    Variance pre-parameters are initialized well away from the softmax
    variance floor and activations away from the ReLU kink, so central
    differences are trustworthy at h = 1e-5.
    """
    rng = SeededRng(seed)
    specs = []
    image = int(rng.integers(0, 2)) == 1
    if image:
        side = int(rng.integers(5, 8))
        ch = int(rng.integers(1, 3))
        in_shape = (side, side, ch)
        k = int(rng.integers(2, 4))
        pad = int(rng.integers(0, 2))
        specs.append(LayerSpec("conv2d", filters=int(rng.integers(2, 4)),
                               kernel=(k, k), stride=(1, 1), pad=(pad, pad)))
        if int(rng.integers(0, 2)) == 1:
            specs.append(LayerSpec("batchnorm2d"))
        specs.append(LayerSpec("tanh" if int(rng.integers(0, 2)) else "relu"))
        out = side + 2 * pad - k + 1
        if out >= 4 and int(rng.integers(0, 2)) == 1:
            specs.append(LayerSpec("maxpool", kernel=(2, 2)))
        specs.append(LayerSpec("flatten"))
    else:
        dim = int(rng.integers(3, 9))
        in_shape = (dim,)
    for _ in range(int(rng.integers(1, 3))):
        width = int(rng.integers(3, 9))
        specs.append(LayerSpec("linear", out_features=width))
        if not image and int(rng.integers(0, 4)) == 0:
            specs.append(LayerSpec("batchnorm1d"))
        specs.append(LayerSpec("tanh" if int(rng.integers(0, 2)) else "relu"))

    n_classes = int(rng.integers(2, 5))
    rho_init = float(rng.uniform(-3.0, -1.0, ()))
    # in_features inferred at build time from the incoming shape.
    shape = in_shape
    fixed = []
    for s in specs:
        if s.kind == "linear":
            s = LayerSpec("linear", in_features=shape[0], out_features=s.out_features)
            shape = (s.out_features,)
        elif s.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif s.kind == "conv2d":
            o1 = shape[0] + 2 * s.pad[0] - s.kernel[0] + 1
            o2 = shape[1] + 2 * s.pad[1] - s.kernel[1] + 1
            shape = (o1, o2, s.filters)
        elif s.kind == "maxpool":
            shape = ((shape[0] - 2) // 2 + 1, (shape[1] - 2) // 2 + 1, shape[2])
        fixed.append(s)

    model = MPModel(fixed, in_shape, {0: n_classes, 1: 2}, rng.spawn(),
                    rho_init=rho_init)
    B = 3
    x = rng.standard_normal((B,) + in_shape)
    labels = np.array([int(rng.integers(0, n_classes)) for _ in range(B)])
    y = one_hot(labels, n_classes)

    # Populate batch-norm running stats so eval mode is defined.
    if any(isinstance(l, BatchNormLayer) for l in model.trunk):
        model.forward(x, task=0, train=True)
    return model, x, y
