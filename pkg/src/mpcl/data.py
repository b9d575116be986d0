"""Dataset ingestion (bit-exact IDX), normalization, and task construction.

Task sequences come in three flavors: class-split partitions of one
dataset, pixel-permuted copies of one dataset, and seeded synthetic
Gaussian-blob tasks for fast CI. Every construction is fully determined
by (source data, seed, spec); validation carves are stratified by class
and hold the 15% fraction of each task's train pool to within one sample.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import FLOAT, SeededRng, TensorError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed source data or invalid task construction."""


@dataclass
class LabeledDataset:
    """Feature tensor plus integer labels; immutable once constructed."""

    images: np.ndarray  # (n, H, W, C) for images, (n, d) for flat features
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=FLOAT)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError("image/label count mismatch")
        if self.images.shape[0] < 1:
            raise DataError("empty dataset")
        if not np.isfinite(self.images).all():
            raise DataError("non-finite pixel values")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError("label outside [0, n_classes)")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.n_classes)

    def with_labels(self, labels: np.ndarray, n_classes: int) -> "LabeledDataset":
        return LabeledDataset(self.images, labels, n_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.images.shape).encode())
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


@dataclass
class Task:
    task_id: int
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    n_classes: int
    class_map: dict[int, int] | None = None  # global label -> local label


@dataclass
class TaskSequence:
    tasks: list[Task]
    descriptor: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

def _read_exact(path: Path) -> bytes:
    return Path(path).read_bytes()


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse an IDX image/label file pair bit-exactly.

    Images: big-endian magic 0x00000803, then n, rows, cols (u32), then
    n*rows*cols unsigned bytes scaled to [0, 1] by /255. Labels: magic
    0x00000801, then n, then n unsigned bytes.
    """
    raw = _read_exact(images_path)
    if len(raw) < 16:
        raise DataError(f"truncated IDX image file: {images_path}")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"bad magic 0x{magic:08x} in {images_path} "
                        f"(want 0x{IDX_IMAGES_MAGIC:08x})")
    if len(raw) != 16 + n * rows * cols:
        raise DataError(f"truncated IDX image payload: {images_path}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)

    raw_l = _read_exact(labels_path)
    if len(raw_l) < 8:
        raise DataError(f"truncated IDX label file: {labels_path}")
    magic_l, n_l = struct.unpack(">II", raw_l[:8])
    if magic_l != IDX_LABELS_MAGIC:
        raise DataError(f"bad magic 0x{magic_l:08x} in {labels_path} "
                        f"(want 0x{IDX_LABELS_MAGIC:08x})")
    if len(raw_l) != 8 + n_l:
        raise DataError(f"truncated IDX label payload: {labels_path}")
    if n != n_l:
        raise DataError(f"image count {n} != label count {n_l}")

    images = (pixels.astype(FLOAT) / 255.0).reshape(n, rows, cols, 1)
    labels = np.frombuffer(raw_l, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledDataset(images, labels, int(labels.max()) + 1)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write byte images (n, H, W) or (n, H, W, 1) and labels as IDX files."""
    imgs = np.asarray(images)
    if imgs.ndim == 4:
        imgs = imgs[..., 0]
    n, rows, cols = imgs.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(imgs.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels).astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize(dataset: LabeledDataset) -> tuple[LabeledDataset, tuple[float, float]]:
    """Standardize by the scalar mean/std of the full dataset (pre-split)."""
    mean = float(dataset.images.mean())
    std = float(dataset.images.std())
    if std == 0.0:
        raise DataError("zero standard deviation: constant dataset")
    out = (dataset.images - mean) / std
    return LabeledDataset(out, dataset.labels, dataset.n_classes), (mean, std)


def apply_normalization(dataset: LabeledDataset, stats) -> LabeledDataset:
    mean, std = stats
    return LabeledDataset((dataset.images - mean) / std, dataset.labels,
                          dataset.n_classes)


# ---------------------------------------------------------------------------
# Validation carve (stratified, exact total)
# ---------------------------------------------------------------------------

def _stratified_val_split(labels: np.ndarray, val_frac: float, rng: SeededRng):
    """Per-class validation carve whose total is round(val_frac * n) exactly.

    Largest-remainder apportionment over classes, ties broken by class id.
    """
    n = labels.shape[0]
    target = int(round(val_frac * n))
    classes = np.unique(labels)
    quotas, remainders = {}, []
    for c in classes:
        exact = val_frac * int((labels == c).sum())
        quotas[c] = int(np.floor(exact))
        remainders.append((-(exact - np.floor(exact)), int(c)))
    short = target - sum(quotas.values())
    for _, c in sorted(remainders):
        if short <= 0:
            break
        quotas[c] += 1
        short -= 1
    val_idx, train_idx = [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.shape[0])]
        val_idx.append(idx[:quotas[c]])
        train_idx.append(idx[quotas[c]:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def _carve_task(train_pool: LabeledDataset, test: LabeledDataset, task_id: int,
                val_frac: float, rng: SeededRng,
                class_map: dict[int, int] | None) -> Task:
    train_idx, val_idx = _stratified_val_split(train_pool.labels, val_frac, rng)
    return Task(task_id=task_id,
                train=train_pool.subset(train_idx),
                val=train_pool.subset(val_idx),
                test=test,
                n_classes=train_pool.n_classes,
                class_map=class_map)


# ---------------------------------------------------------------------------
# Task constructions
# ---------------------------------------------------------------------------

def _remap(ds: LabeledDataset, classes: list[int]) -> tuple[LabeledDataset, dict[int, int]]:
    cmap = {int(g): i for i, g in enumerate(sorted(classes))}
    mask = np.isin(ds.labels, classes)
    if not mask.any():
        raise DataError(f"classes {classes} absent from dataset")
    sub = ds.images[mask]
    local = np.array([cmap[int(g)] for g in ds.labels[mask]], dtype=np.int64)
    return LabeledDataset(sub, local, len(classes)), cmap


def split_tasks(train_ds: LabeledDataset, test_ds: LabeledDataset,
                partition: list[list[int]], val_frac: float = 0.15,
                seed: int = 0) -> TaskSequence:
    """Class-split tasks: filter classes per cell, remap labels to 0..k-1,
    carve the validation fraction from each task's train pool."""
    flat = [c for cell in partition for c in cell]
    if len(set(flat)) != len(flat):
        raise DataError("partition cells overlap")
    if any(len(cell) == 0 for cell in partition):
        raise DataError("empty partition cell")
    present = set(np.unique(train_ds.labels).tolist())
    missing = [c for c in flat if c not in present]
    if missing:
        raise DataError(f"classes {missing} absent from dataset")

    master = SeededRng(seed)
    tasks = []
    for t, cell in enumerate(partition):
        pool, cmap = _remap(train_ds, list(cell))
        test, _ = _remap(test_ds, list(cell))
        tasks.append(_carve_task(pool, test, t, val_frac, master.spawn(), cmap))
    return TaskSequence(tasks, descriptor={
        "kind": "split", "partition": [list(c) for c in partition],
        "val_frac": val_frac, "seed": seed})


def permute_tasks(train_ds: LabeledDataset, test_ds: LabeledDataset,
                  n_tasks: int, val_frac: float = 0.15,
                  seed: int = 0) -> TaskSequence:
    """Pixel-permutation tasks: task 0 is the identity; each later task
    applies one fixed seeded permutation of the flattened feature positions
    to every train and test sample."""
    if n_tasks < 1:
        raise DataError("n_tasks must be >= 1")
    master = SeededRng(seed)
    d = int(np.prod(train_ds.feature_shape))
    tasks = []
    for t in range(n_tasks):
        if t == 0:
            perm = np.arange(d)
        else:
            perm = master.spawn().permutation(d)
        tr = _apply_pixel_permutation(train_ds, perm)
        te = _apply_pixel_permutation(test_ds, perm)
        tasks.append(_carve_task(tr, te, t, val_frac, master.spawn(), None))
    return TaskSequence(tasks, descriptor={
        "kind": "permuted", "n_tasks": n_tasks, "val_frac": val_frac,
        "seed": seed})


def _apply_pixel_permutation(ds: LabeledDataset, perm: np.ndarray) -> LabeledDataset:
    flat = ds.images.reshape(len(ds), -1)
    out = flat[:, perm].reshape(ds.images.shape)
    return LabeledDataset(out, ds.labels, ds.n_classes)


def synthetic_tasks(spec: dict, seed: int = 0, val_frac: float = 0.15) -> TaskSequence:
    """Seeded Gaussian-blob classification tasks.

    spec = {"dim": d, "tasks": [{"classes": [{"center": [...], "cov": c,
    "n_train": int, "n_test": int}, ...]}, ...]}; cov may be a scalar,
    a diagonal vector, or a full matrix.
    """
    dim = int(spec["dim"])
    master = SeededRng(seed)
    tasks = []
    for t, tspec in enumerate(spec["tasks"]):
        rng = master.spawn()
        xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
        for label, blob in enumerate(tspec["classes"]):
            center = np.asarray(blob["center"], dtype=FLOAT)
            if center.shape != (dim,):
                raise DataError(f"blob center must have dim {dim}")
            chol = _cov_cholesky(blob.get("cov", 1.0), dim)
            n_train = int(blob["n_train"])
            n_test = int(blob.get("n_test", max(1, n_train // 4)))
            z = rng.standard_normal((n_train + n_test, dim))
            pts = center + z @ chol.T
            xs_tr.append(pts[:n_train])
            ys_tr.append(np.full(n_train, label, dtype=np.int64))
            xs_te.append(pts[n_train:])
            ys_te.append(np.full(n_test, label, dtype=np.int64))
        n_cls = len(tspec["classes"])
        pool = LabeledDataset(np.concatenate(xs_tr), np.concatenate(ys_tr), n_cls)
        test = LabeledDataset(np.concatenate(xs_te), np.concatenate(ys_te), n_cls)
        tasks.append(_carve_task(pool, test, t, val_frac, master.spawn(), None))
    return TaskSequence(tasks, descriptor={"kind": "synthetic", "seed": seed,
                                           "val_frac": val_frac, "spec": spec})


def _cov_cholesky(cov, dim: int) -> np.ndarray:
    cov = np.asarray(cov, dtype=FLOAT)
    if cov.ndim == 0:
        if cov <= 0:
            raise DataError("degenerate covariance")
        return np.eye(dim) * np.sqrt(float(cov))
    if cov.ndim == 1:
        if cov.shape != (dim,) or np.any(cov <= 0):
            raise DataError("degenerate covariance")
        return np.diag(np.sqrt(cov))
    if cov.shape != (dim, dim):
        raise DataError(f"covariance must be {dim}x{dim}")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise DataError("degenerate covariance") from err
