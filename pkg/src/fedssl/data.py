"""Synthetic datasets, label-skew partitioning, and two-view augmentation.

Gaussian blob datasets stand in for image corpora so that full federated
runs finish in seconds.  The partitioner reproduces the label-heterogeneity
construction used to simulate non-IID clients: each class is split into
equal sets and every client receives sets from exactly ``l`` distinct
classes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    """Feature matrix with integer labels in ``[0, num_classes)``."""

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a [N x d] matrix")
        if self.labels.shape != (self.samples.shape[0],):
            raise ValueError("labels must be a vector matching the sample count")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.num_classes:
            raise ValueError("labels out of range")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if np.any(counts == 0):
            raise ValueError("every class must be nonempty")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    """Label-skew layout: ``num_clients`` clients holding ``classes_per_client``
    classes each."""

    num_clients: int
    classes_per_client: int
    seed: int = 0

    def validate(self, num_classes: int) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        if not (1 <= self.classes_per_client <= num_classes):
            raise ValueError(
                f"classes_per_client must lie in [1, {num_classes}], "
                f"got {self.classes_per_client}")
        if (self.num_clients * self.classes_per_client) % num_classes != 0:
            raise ValueError(
                f"num_clients * classes_per_client = "
                f"{self.num_clients * self.classes_per_client} must be a "
                f"multiple of the class count {num_classes}")


@dataclass(frozen=True)
class AugSpec:
    """Vector augmentation: additive Gaussian noise, coordinate masking, and
    random scaling, applied in that order."""

    noise_sigma: float = 0.0
    mask_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not (0.0 <= self.mask_prob <= 1.0):
            raise ValueError("mask_prob must lie in [0, 1]")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ValueError("scale_range must satisfy 0 < lo <= hi")


def make_blobs(num_classes: int, per_class: int, dim: int, spread: float,
               seed: int) -> Dataset:
    """Isotropic Gaussian blobs with centers pairwise separated by >= 4*spread.

    Centers are drawn uniformly in a cube whose side grows on retry; after a
    bounded number of attempts without achieving separation the call fails.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 2:
        raise ValueError("need at least 2 samples per class")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    min_sep = 4.0 * spread
    side = min_sep * max(2.0, float(num_classes))
    centers = None
    for _ in range(64):
        cand = rng.uniform(0.0, side, size=(num_classes, dim))
        diff = cand[:, None, :] - cand[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= min_sep:
            centers = cand
            break
        side *= 1.5
    if centers is None:
        raise RuntimeError(
            f"could not place {num_classes} centers separated by {min_sep} "
            f"in {dim} dimensions")
    samples = np.empty((num_classes * per_class, dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    for c in range(num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        samples[block] = centers[c] + spread * rng.standard_normal((per_class, dim))
    return Dataset(samples, labels, num_classes)


def split_per_class(ds: Dataset, holdout_per_class: int) -> tuple[Dataset, Dataset]:
    """Deterministically split the last ``holdout_per_class`` samples of each
    class into a held-out set."""
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        idx = ds.class_indices(c)
        if holdout_per_class >= idx.size:
            raise ValueError(f"class {c} has only {idx.size} samples")
        train_idx.append(idx[:-holdout_per_class])
        test_idx.append(idx[-holdout_per_class:])
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


def partition_non_iid(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Split each class into equal sets and deal them so every client gets
    exactly ``classes_per_client`` sets of distinct classes.

    Assignment walks consecutive windows of a seeded class permutation
    repeated ``sets_per_class`` times; a window of length l <= C over a
    repeated permutation of C distinct classes can never contain duplicates,
    so every valid spec admits an assignment.  Returns one sorted index array
    per client.  Leftover samples are dropped when a class does not divide
    evenly into its sets.
    """
    spec.validate(ds.num_classes)
    k, l, c = spec.num_clients, spec.classes_per_client, ds.num_classes
    sets_per_class = (k * l) // c
    rng = np.random.default_rng(spec.seed)

    chunks: list[list[np.ndarray]] = []
    for cls in range(c):
        idx = rng.permutation(ds.class_indices(cls))
        usable = (idx.size // sets_per_class) * sets_per_class
        if usable == 0:
            raise ValueError(
                f"class {cls} has too few samples for {sets_per_class} sets")
        chunks.append(np.split(idx[:usable], sets_per_class))

    perm = rng.permutation(c)
    sequence = np.tile(perm, sets_per_class)
    next_chunk = [0] * c
    parts: list[np.ndarray] = []
    for client in range(k):
        window = sequence[client * l:(client + 1) * l]
        picked = []
        for cls in window:
            picked.append(chunks[cls][next_chunk[cls]])
            next_chunk[cls] += 1
        parts.append(np.sort(np.concatenate(picked)))
    return parts


def two_views(sample: np.ndarray, aug: AugSpec, rng: np.random.Generator
              ) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmented views of one sample vector."""
    x = np.asarray(sample, dtype=np.float64).reshape(1, -1)
    v1, v2 = two_view_batch(x, aug, rng)
    return v1[0], v2[0]


def two_view_batch(batch: np.ndarray, aug: AugSpec, rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized two-view augmentation over a [B x d] batch.

    Draw order is fixed (view 1 fully, then view 2) so a given stream always
    yields the same views.
    """
    x = np.asarray(batch, dtype=np.float64)
    return _augment(x, aug, rng), _augment(x, aug, rng)


def _augment(x: np.ndarray, aug: AugSpec, rng: np.random.Generator) -> np.ndarray:
    v = x.copy()
    if aug.noise_sigma > 0:
        v += aug.noise_sigma * rng.standard_normal(v.shape)
    if aug.mask_prob > 0:
        v *= rng.random(v.shape) >= aug.mask_prob
    lo, hi = aug.scale_range
    if lo != 1.0 or hi != 1.0:
        v *= rng.uniform(lo, hi, size=(v.shape[0], 1))
    return v


# -- on-disk formats ---------------------------------------------------------

def save_dataset(path, ds: Dataset) -> None:
    """Flat binary format: header (N, d, C as uint32 LE), float64 rows, then
    one label byte per sample."""
    if ds.num_classes > 256:
        raise ValueError("binary format stores labels as single bytes (C <= 256)")
    with open(path, "wb") as f:
        f.write(struct.pack("<III", len(ds), ds.dim, ds.num_classes))
        f.write(np.ascontiguousarray(ds.samples, dtype="<f8").tobytes())
        f.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    n, d, c = struct.unpack_from("<III", blob, 0)
    off = 12
    nbytes = n * d * 8
    samples = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(n, d).copy()
    off += nbytes
    labels = np.frombuffer(blob[off:off + n], dtype=np.uint8).astype(np.int64)
    if off + n != len(blob):
        raise ValueError("trailing bytes after dataset payload")
    return Dataset(samples, labels, c)


def write_partition(path, parts: list[np.ndarray]) -> None:
    """Sidecar audit file: one ``client_id: sorted indices`` line per client."""
    with open(path, "w") as f:
        for k, idx in enumerate(parts):
            f.write(f"{k}: " + " ".join(str(int(i)) for i in np.sort(idx)) + "\n")
