"""Shared numeric primitives: vectors, the exponential kernel, norms, seeded randomness.

Everything downstream works in float64, regardless of what a stream file
stores: the exponential kernel amplifies rounding, so inputs are widened
once at the boundary and never narrowed internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Arguments to exp are clamped to this magnitude; see clamp_events().
EXP_CLAMP = 700.0

_clamp_events = 0


class DimensionMismatch(ValueError):
    """Operands with incompatible dimensions reached a kernel operation."""


class NonFiniteInput(ValueError):
    """A NaN or infinity reached an operation that admits only finite values."""


def clamp_events() -> int:
    """Number of exp-argument clamps since the last reset.

    Bounded-norm inputs never clamp (exponents stay below r^2/sqrt(d));
    a nonzero count means ingested data violated its declared norm bound.
    """
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


def exp_clamped(x):
    """exp with arguments clipped to +/-EXP_CLAMP, counting clips."""
    global _clamp_events
    arr = np.asarray(x, dtype=np.float64)
    over = np.abs(arr) > EXP_CLAMP
    if over.any():
        _clamp_events += int(over.sum())
        arr = np.clip(arr, -EXP_CLAMP, EXP_CLAMP)
    return np.exp(arr)


def as_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate and return ``x`` as a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise NonFiniteInput(f"{name} contains non-finite entries")
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatch(f"{name} has dim {v.shape[0]}, expected {dim}")
    return v


def l2_norm(v) -> float:
    """Euclidean norm."""
    return float(np.linalg.norm(as_vector(v)))


def frobenius_norm(rows) -> float:
    """Frobenius norm of a stack of row vectors."""
    mat = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(mat).all():
        raise NonFiniteInput("rows contain non-finite entries")
    return float(np.linalg.norm(mat))


def exp_kernel(k, q, d: int) -> float:
    """exp(<k, q> / sqrt(d)); the positive-definite kernel all estimates use.

    Symmetric in its arguments and always positive.
    """
    kv = as_vector(k, dim=d, name="k")
    qv = as_vector(q, dim=d, name="q")
    return float(exp_clamped(float(kv @ qv) / math.sqrt(d)))


@dataclass
class TokenTriple:
    """One stream element: a (query, key, value) embedding triple.

    ``index`` is the 1-based stream position and must be strictly
    increasing within a stream.
    """

    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    index: int

    def __post_init__(self):
        self.query = as_vector(self.query, name="query")
        self.key = as_vector(self.key, dim=self.query.shape[0], name="key")
        self.value = as_vector(self.value, name="value")
        if self.index < 1:
            raise ValueError(f"stream index must be >= 1, got {self.index}")


@dataclass
class KVPair:
    """A (key, value) pair; value dimension may differ from key dimension."""

    key: np.ndarray
    value: np.ndarray
    index: int

    def __post_init__(self):
        self.key = as_vector(self.key, name="key")
        self.value = as_vector(self.value, name="value")


def pair_affinity(a: KVPair, b: KVPair, d: int) -> float:
    """Inner product of two pairs in the implicit kernel feature space.

    Equals exp_kernel(a.key, b.key, d) * <a.value, b.value>, which is the
    inner product of the (never materialized) lifted vectors whose squared
    norm is exp(|k|^2 / sqrt(d)) * |v|^2.
    """
    if a.key.shape != b.key.shape:
        raise DimensionMismatch("key dims differ")
    if a.value.shape != b.value.shape:
        raise DimensionMismatch("value dims differ")
    return exp_kernel(a.key, b.key, d) * float(a.value @ b.value)


@dataclass
class StreamParams:
    """Declared bounds of a stream: sizes, dimensions, norm radius, targets."""

    n: int
    d: int
    s: int
    r: float
    epsilon: float
    delta: float

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or self.s < 1:
            raise ValueError("n, d, s must be >= 1")
        if self.r <= 0:
            raise ValueError("r must be > 0")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


class RandomSource:
    """Seeded uniform generator with deterministic hierarchical children.

    Same seed, same draw sequence. ``child(*key)`` derives an independent
    stream from (seed, key); the derivation depends only on those integers,
    never on call order, so concurrent owners of distinct children stay
    reproducible. A RandomSource is single-owner: share seeds, not
    instances.
    """

    def __init__(self, seed: int = 0, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(int(k) & 0xFFFFFFFF for k in _spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def uniform(self) -> float:
        """One draw, uniform on [0, 1)."""
        return float(self._gen.random())

    @property
    def generator(self) -> np.random.Generator:
        """Underlying numpy generator, for bulk draws by the owner."""
        return self._gen

    def child(self, *key: int) -> "RandomSource":
        """Derived source keyed by (seed, existing key path, *key)."""
        return RandomSource(self.seed, self._spawn_key + key)

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, key={self._spawn_key})"
