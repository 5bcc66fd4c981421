"""Flat named parameter vectors and the algebra used by aggregation and client updates.

Every model in the simulator exposes its weights as a :class:`NamedParams`:
an ordered mapping from group name (e.g. ``"encoder"``, ``"predictor"``) to a
dense float64 vector.  All server-side aggregation, EMA interpolation and
divergence measurement operate on these vectors, never on network objects.
"""

from __future__ import annotations

import struct
from typing import Iterable, Mapping, Sequence

import numpy as np

# Below this encoder divergence the autoscaler would produce an unbounded
# scaler, so it is treated as degenerate.
DIVERGENCE_EPS = 1e-9


class ShapeMismatchError(ValueError):
    """Two parameter vectors differ in group names or group lengths."""


class DegenerateDivergenceError(ValueError):
    """Autoscaling requested with near-zero divergence between the models."""


class NamedParams:
    """Immutable flat parameter vector partitioned into named groups.

    Group order is significant and preserved.  The underlying arrays are
    copied on construction and marked read-only, so instances are safe to
    share between concurrent workers.
    """

    __slots__ = ("_groups",)

    def __init__(self, groups: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = groups.items() if isinstance(groups, Mapping) else groups
        store: dict[str, np.ndarray] = {}
        for name, vec in items:
            arr = np.asarray(vec, dtype=np.float64).reshape(-1).copy()
            arr.flags.writeable = False
            store[str(name)] = arr
        if not store:
            raise ValueError("NamedParams requires at least one group")
        self._groups = store

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(self._groups)

    @property
    def total_len(self) -> int:
        return sum(v.size for v in self._groups.values())

    def group(self, name: str) -> np.ndarray:
        """Read-only view of one group's vector."""
        try:
            return self._groups[name]
        except KeyError:
            raise ShapeMismatchError(f"unknown parameter group {name!r}") from None

    def group_lengths(self) -> dict[str, int]:
        return {k: v.size for k, v in self._groups.items()}

    def items(self):
        return self._groups.items()

    def concat(self, groups: Sequence[str] | None = None) -> np.ndarray:
        """Concatenate the listed groups (all groups by default) into one vector."""
        names = self.group_names if groups is None else tuple(groups)
        return np.concatenate([self.group(n) for n in names]) if names else np.empty(0)

    def replace(self, **groups: np.ndarray) -> "NamedParams":
        """Copy with the given groups substituted (shapes must match)."""
        out = {}
        for name, vec in self._groups.items():
            if name in groups:
                new = np.asarray(groups.pop(name), dtype=np.float64).reshape(-1)
                if new.size != vec.size:
                    raise ShapeMismatchError(
                        f"group {name!r} length {new.size} != {vec.size}")
                out[name] = new
            else:
                out[name] = vec
        if groups:
            raise ShapeMismatchError(f"unknown parameter groups {sorted(groups)}")
        return NamedParams(out)

    # -- equality / hashing -------------------------------------------------

    def allclose(self, other: "NamedParams", rtol: float = 0.0, atol: float = 0.0) -> bool:
        if self.group_names != other.group_names:
            return False
        return all(
            np.allclose(v, other.group(k), rtol=rtol, atol=atol)
            for k, v in self._groups.items()
        )

    def __eq__(self, other) -> bool:
        """Bitwise equality: same groups, same lengths, identical bytes."""
        if not isinstance(other, NamedParams):
            return NotImplemented
        if self.group_names != other.group_names:
            return False
        return all(
            v.size == other.group(k).size and v.tobytes() == other.group(k).tobytes()
            for k, v in self._groups.items()
        )

    def __repr__(self) -> str:
        shape = ", ".join(f"{k}:{v.size}" for k, v in self._groups.items())
        return f"NamedParams({shape})"

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Flat binary record: group count, then per-group (name length, name
        bytes, element count) headers, then little-endian float64 payloads in
        group order."""
        parts = [struct.pack("<I", len(self._groups))]
        for name, vec in self._groups.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<Q", vec.size))
        for vec in self._groups.values():
            parts.append(np.ascontiguousarray(vec, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NamedParams":
        off = 0
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        headers: list[tuple[str, int]] = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (size,) = struct.unpack_from("<Q", blob, off)
            off += 8
            headers.append((name, size))
        groups = {}
        for name, size in headers:
            nbytes = size * 8
            groups[name] = np.frombuffer(blob[off:off + nbytes], dtype="<f8").copy()
            off += nbytes
        if off != len(blob):
            raise ValueError("trailing bytes after parameter payload")
        return cls(groups)


def _check_same_shape(a: NamedParams, b: NamedParams) -> None:
    if a.group_names != b.group_names or a.group_lengths() != b.group_lengths():
        raise ShapeMismatchError(
            f"incompatible parameter shapes: {a!r} vs {b!r}")


def weighted_average(entries: Sequence[tuple[NamedParams, float]]) -> NamedParams:
    """Sample-count-weighted average of parameter vectors.

    Weights may be raw sample counts; they are normalized internally to sum
    to 1.  All entries must share group names and lengths.
    """
    if not entries:
        raise ValueError("weighted_average of an empty list")
    ref = entries[0][0]
    total = 0.0
    for p, w in entries:
        _check_same_shape(ref, p)
        if w < 0:
            raise ValueError(f"negative weight {w}")
        total += float(w)
    if total <= 0.0:
        raise ValueError("weights must sum to a positive value")
    out = {}
    for name in ref.group_names:
        acc = np.zeros(ref.group(name).size)
        for p, w in entries:
            acc += (float(w) / total) * p.group(name)
        out[name] = acc
    return NamedParams(out)


def ema_blend(local: NamedParams, global_: NamedParams, mu: float,
              groups: Sequence[str] | None = None) -> NamedParams:
    """Interpolate ``mu * local + (1 - mu) * global_`` on the listed groups.

    Groups not listed are copied from ``global_`` unchanged, so a blend over
    ``("encoder",)`` replaces the predictor with the global one.  ``mu`` of
    exactly 0 or 1 returns bitwise copies of the global or local vector.
    """
    _check_same_shape(local, global_)
    if not (0.0 <= mu <= 1.0):
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    names = global_.group_names if groups is None else tuple(groups)
    for n in names:
        global_.group(n)  # raises on unknown group
    out = {}
    for name in global_.group_names:
        g = global_.group(name)
        if name not in names:
            out[name] = g
        elif mu == 0.0:
            out[name] = g
        elif mu == 1.0:
            out[name] = local.group(name)
        else:
            out[name] = mu * local.group(name) + (1.0 - mu) * g
    return NamedParams(out)


def divergence(a: NamedParams, b: NamedParams,
               groups: Sequence[str] = ("encoder",)) -> float:
    """Euclidean norm of the parameter difference over the listed groups.

    Defaults to the encoder group only, which is the quantity the
    divergence-aware update rule is driven by.
    """
    _check_same_shape(a, b)
    diff = a.concat(groups) - b.concat(groups)
    return float(np.sqrt(np.dot(diff, diff)))


def compute_mu(lambda_: float, div: float) -> float:
    """Decay rate ``min(lambda_ * div, 1)`` used by the divergence-aware update."""
    if lambda_ < 0:
        raise ValueError(f"lambda must be nonnegative, got {lambda_}")
    if div < 0:
        raise ValueError(f"divergence must be nonnegative, got {div}")
    return min(lambda_ * div, 1.0)


def autoscale_lambda(global_: NamedParams, local: NamedParams, tau: float,
                     groups: Sequence[str] = ("encoder",)) -> float:
    """Personalized scaler ``tau / divergence`` fixed at a client's first round.

    ``tau`` is the decay rate the blend should produce at the calibration
    round.  Raises :class:`DegenerateDivergenceError` when the divergence is
    below ``DIVERGENCE_EPS``; callers fall back to a scaler of 0 (pure global
    update) in that case.
    """
    if not (0.0 <= tau < 1.0):
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    div = divergence(global_, local, groups)
    if div <= DIVERGENCE_EPS:
        raise DegenerateDivergenceError(
            f"degenerate divergence {div!r} below {DIVERGENCE_EPS}")
    return tau / div
