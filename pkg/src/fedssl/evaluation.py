"""Representation-quality probes: kNN monitor, linear evaluation, collapse statistic.

All probes treat the encoder as frozen: they only ever call ``forward`` and
never write to its parameters.  Embeddings are computed without augmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn import Network
from .seeding import derive_rng


@dataclass
class EvalReport:
    """One evaluation of a representation."""

    knn_acc: float
    linear_acc: float
    collapse_stat: float
    per_round_divergence: dict[int, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, v in (("knn_acc", self.knn_acc), ("linear_acc", self.linear_acc)):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.collapse_stat < 0:
            raise ValueError("collapse_stat must be nonnegative")


def embed(encoder: Network, samples: np.ndarray) -> np.ndarray:
    """Frozen-encoder embeddings of a sample matrix (no augmentation)."""
    return encoder.forward_tape(np.asarray(samples, dtype=np.float64))[0]


def _normalize_rows(z: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(z * z, axis=1, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    return z / safe


def knn_eval(encoder: Network, train: Dataset, test: Dataset, k: int = 5) -> float:
    """Majority-vote k-nearest-neighbor accuracy under cosine distance.

    Vote ties break toward the class with the smaller summed distance, then
    the smaller label, so the probe is fully deterministic.
    """
    if len(train) == 0 or len(test) == 0:
        raise ValueError("knn_eval needs nonempty train and test sets")
    if not (1 <= k <= len(train)):
        raise ValueError(f"k must lie in [1, {len(train)}], got {k}")
    ztr = _normalize_rows(embed(encoder, train.samples))
    zte = _normalize_rows(embed(encoder, test.samples))
    dist = 1.0 - zte @ ztr.T
    # stable argsort: equal distances resolve to the smaller train index
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    correct = 0
    for i in range(len(test)):
        idx = nearest[i]
        labels = train.labels[idx]
        dists = dist[i, idx]
        counts = np.bincount(labels, minlength=train.num_classes)
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if tied.size == 1:
            pred = tied[0]
        else:
            sums = np.array([dists[labels == c].sum() for c in tied])
            pred = tied[np.lexsort((tied, sums))[0]]
        correct += int(pred == test.labels[i])
    return correct / len(test)


def linear_eval(encoder: Network, train: Dataset, test: Dataset,
                epochs: int = 200, lr: float = 0.5, seed: int = 0) -> float:
    """Top-1 accuracy of a linear softmax head trained on frozen embeddings.

    The head is trained full-batch with plain gradient descent; the encoder
    itself is never touched.
    """
    if len(train) == 0 or len(test) == 0:
        raise ValueError("linear_eval needs nonempty train and test sets")
    ztr = embed(encoder, train.samples)
    zte = embed(encoder, test.samples)
    n, d = ztr.shape
    c = train.num_classes
    rng = derive_rng(seed, "linear-head")
    w = rng.uniform(-1.0, 1.0, size=(c, d)) / math.sqrt(d)
    b = np.zeros(c)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), train.labels] = 1.0
    for _ in range(epochs):
        logits = ztr @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        expd = np.exp(logits)
        probs = expd / expd.sum(axis=1, keepdims=True)
        if not np.all(np.isfinite(probs)):
            raise RuntimeError("non-finite loss in linear evaluation")
        g = (probs - onehot) / n
        w -= lr * (g.T @ ztr)
        b -= lr * g.sum(axis=0)
    pred = np.argmax(zte @ w.T + b, axis=1)
    return float(np.mean(pred == test.labels))


def collapse_stat(encoder: Network, probe: np.ndarray) -> float:
    """Mean per-dimension standard deviation of L2-normalized embeddings.

    Near ``1/sqrt(d)`` for well-spread embeddings; near zero when the encoder
    maps everything to one point.
    """
    probe = np.asarray(probe, dtype=np.float64)
    if probe.size == 0:
        raise ValueError("probe batch is empty")
    z = _normalize_rows(embed(encoder, probe))
    return float(np.mean(z.std(axis=0)))


def collapse_threshold(dim: int) -> float:
    """Embeddings with a collapse statistic below this are flagged collapsed."""
    return 0.1 / math.sqrt(dim)
