"""Ground truth, error metrics, and baseline compressors.

``exact_attention`` is the reference every estimator is judged against:
a numerically stable softmax over exp(<k_i, q>/sqrt(d)) followed by the
weighted value sum. ``objective_error`` normalizes deviations by
|softmax weights|_2 * |V|_F (the scale at which approximation guarantees
are stated); ``empirical_relative_error`` normalizes by the exact output
norm.

Baselines: exact-count uniform sampling without replacement, and the
sink-plus-recent retention protocol in which only the middle of the
stream is compressed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .balance import pair_arrays
from .core import KVPair, RandomSource, as_vector, exp_clamped


class MetricUndefined(ValueError):
    """The requested error metric has no value on this input."""


@dataclass
class AttentionResult:
    """Exact attention output plus the norms used by the error metrics."""

    output: np.ndarray
    weights: np.ndarray
    softmax_l2: float
    value_frobenius: float


def exact_attention(q, pairs) -> AttentionResult:
    """softmax(K q / sqrt(d))^T V, computed with max-subtraction."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("exact_attention needs at least one pair")
    K, V = pair_arrays(pairs)
    d = K.shape[1]
    qv = as_vector(q, dim=d, name="q")
    logits = K @ qv / math.sqrt(d)
    shifted = np.exp(logits - logits.max())
    weights = shifted / shifted.sum()
    return AttentionResult(
        output=weights @ V,
        weights=weights,
        softmax_l2=float(np.linalg.norm(weights)),
        value_frobenius=float(np.linalg.norm(V)),
    )


def objective_error_from(z, result: AttentionResult) -> float:
    """|z - exact|_2 / (|softmax|_2 * |V|_F); the guarantee is <= epsilon."""
    z = as_vector(z, dim=result.output.shape[0], name="z")
    diff = float(np.linalg.norm(z - result.output))
    scale = result.softmax_l2 * result.value_frobenius
    if scale == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / scale


def objective_error(z, q, pairs) -> float:
    return objective_error_from(z, exact_attention(q, pairs))


def empirical_relative_error_from(z, result: AttentionResult) -> float:
    """|z - exact|_2 / |exact|_2; undefined when the exact output is zero."""
    z = as_vector(z, dim=result.output.shape[0], name="z")
    scale = float(np.linalg.norm(result.output))
    if scale == 0.0:
        raise MetricUndefined("exact attention output is zero")
    return float(np.linalg.norm(z - result.output)) / scale


def empirical_relative_error(z, q, pairs) -> float:
    return empirical_relative_error_from(z, exact_attention(q, pairs))


def weighted_kernel_sums(q, pairs, weights) -> tuple[np.ndarray, float]:
    """(sum w exp(<k,q>/sqrt(d)) v, sum w exp(<k,q>/sqrt(d))) over a cache."""
    pairs = list(pairs)
    K, V = pair_arrays(pairs)
    d = K.shape[1]
    qv = as_vector(q, dim=d, name="q")
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 0:
        w = np.full(len(pairs), float(w))
    if w.shape != (len(pairs),):
        raise ValueError("weights must align with pairs")
    e = w * exp_clamped(K @ qv / math.sqrt(d))
    return e @ V, float(e.sum())


def weighted_attention(q, pairs, weights) -> np.ndarray:
    """Attention estimate from a weighted retained cache.

    Every retained pair stands in for ``weight`` original pairs in both
    the numerator and the normalizer.
    """
    if not pairs:
        raise MetricUndefined("empty cache")
    num, den = weighted_kernel_sums(q, pairs, weights)
    if den <= 0.0:
        raise MetricUndefined("cache normalizer is not positive")
    return num / den


def uniform_compress(pairs, rate: float, rng: RandomSource) -> list[KVPair]:
    """Keep exactly ceil(rate * n) pairs, sampled without replacement.

    Stream order is preserved. The exact count makes budget comparisons
    against other compressors sharp; when the survivors estimate kernel
    sums, each carries weight n / kept.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    pairs = list(pairs)
    n = len(pairs)
    if n == 0:
        return []
    k = math.ceil(rate * n)
    idx = np.sort(rng.generator.choice(n, size=k, replace=False))
    return [pairs[i] for i in idx]


# A middle compressor maps (middle pairs, rng) to (kept pairs, weights).
MiddleCompressor = Callable[
    [list[KVPair], RandomSource], tuple[list[KVPair], np.ndarray]
]


def identity_middle() -> MiddleCompressor:
    """Keep the whole middle at weight 1 (no compression)."""
    def compress(pairs, rng):
        return list(pairs), np.ones(len(pairs))
    return compress


def drop_middle() -> MiddleCompressor:
    """Drop the middle entirely (pure sink-plus-recent retention)."""
    def compress(pairs, rng):
        return [], np.empty(0)
    return compress


def uniform_middle(rate: float) -> MiddleCompressor:
    """Uniform sampling at an exact count, reweighted to estimate the whole."""
    def compress(pairs, rng):
        kept = uniform_compress(pairs, rate, rng)
        weight = len(pairs) / len(kept) if kept else 1.0
        return kept, np.full(len(kept), weight)
    return compress


@dataclass
class UniformSample:
    """Whole-stream uniform retention at a fixed rate."""

    rate: float


@dataclass
class SinkRecent:
    """Keep the first ``sink_count`` and the anchored recent window intact;
    compress only the middle.

    The recent window starts at position n - recent_count + 1 and grows
    with the query position j; with ``sliding`` it instead covers the
    recent_count positions ending at j, and middle survivors past the
    window start are ignored.
    """

    sink_count: int
    recent_count: int
    sliding: bool = False


RetentionPolicy = UniformSample | SinkRecent


class RetentionRun:
    """Per-query retained caches for one stream under one policy."""

    def __init__(self, pairs, policy: RetentionPolicy,
                 compressor: MiddleCompressor | None = None,
                 rng: RandomSource | None = None):
        self.pairs = list(pairs)
        self.policy = policy
        self.n = len(self.pairs)
        rng = rng if rng is not None else RandomSource(0)
        self.fail_count = 0
        if isinstance(policy, UniformSample):
            self._kept = uniform_compress(self.pairs, policy.rate, rng)
            self._passthrough = False
        else:
            if policy.sink_count < 0 or policy.recent_count < 0:
                raise ValueError("sink and recent counts must be >= 0")
            compressor = compressor or identity_middle()
            self._passthrough = (
                policy.sink_count + policy.recent_count >= self.n
            )
            if self._passthrough:
                self._middle, self._middle_weights = [], np.empty(0)
            else:
                middle = self.pairs[
                    policy.sink_count: self.n - policy.recent_count
                ]
                self._middle, self._middle_weights = compressor(middle, rng)

    def middle_kept(self) -> list[KVPair]:
        if isinstance(self.policy, UniformSample):
            return list(self._kept)
        return list(self._middle)

    def cache_at(self, j: int) -> tuple[list[KVPair], np.ndarray]:
        """Retained (pairs, weights) visible to the query at position j."""
        if not 1 <= j <= self.n:
            raise ValueError(f"query position {j} outside stream of {self.n}")
        policy = self.policy
        if isinstance(policy, UniformSample):
            kept = [p for p in self._kept if p.index <= j]
            weight = j / len(kept) if kept else 1.0
            return kept, np.full(len(kept), weight)
        if self._passthrough:
            kept = self.pairs[:j]
            return kept, np.ones(len(kept))
        recent_start = (
            j - policy.recent_count + 1 if policy.sliding
            else self.n - policy.recent_count + 1
        )
        recent_start = max(recent_start, policy.sink_count + 1)
        cache = list(self.pairs[: policy.sink_count])
        weights = [1.0] * len(cache)
        for pair, w in zip(self._middle, self._middle_weights):
            if pair.index <= min(j, recent_start - 1):
                cache.append(pair)
                weights.append(float(w))
        for pair in self.pairs[recent_start - 1: j]:
            cache.append(pair)
            weights.append(1.0)
        return cache, np.asarray(weights)


def apply_retention(pairs, policy: RetentionPolicy,
                    compressor: MiddleCompressor | None = None,
                    rng: RandomSource | None = None) -> RetentionRun:
    """Build the per-query retained caches for a stream under a policy."""
    return RetentionRun(pairs, policy, compressor, rng)
