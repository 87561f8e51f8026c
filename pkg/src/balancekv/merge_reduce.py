"""Streaming compression cascade over balanced halvings.

Pairs accumulate in a level-0 buffer of size ``t``. Every time the buffer
fills, it is balanced down to half and promoted one level up; whenever the
count of completed batches at a level turns even, that level cascades
upward in turn. Level i therefore holds pairs that survived i halvings and
represents 2^i original pairs each, so at most t*(T+1) pairs are retained
at any moment while the weighted census sum(2^i * |level i|) tracks the
ingested count exactly (in strict mode, for even t).

Estimates read the levels directly: a query's kernel-weighted value sum is
reconstructed as sum over levels of 2^i * sum exp(<k, q>/sqrt(d)) * v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .balance import BalanceConfig, softmax_balance
from .core import DimensionMismatch, KVPair, RandomSource, as_vector, exp_clamped


@dataclass
class MRConfig:
    """Cascade shape: batch size ``t``, depth ``T``, balance parameters.

    ``max_n`` is the declared stream length; it sets the capacity
    ``t * 2^T`` bookkeeping and the failure-probability split across inner
    balance calls (each call runs at delta / (4 * max_n) so that all calls
    and all queries union-bound under the global delta).
    """

    t: int
    T: int
    balance: BalanceConfig
    value_dim: int
    max_n: int | None = None

    def __post_init__(self):
        if self.t < 2:
            raise ValueError("batch size t must be >= 2")
        if self.T < 0:
            raise ValueError("depth T must be >= 0")
        if self.value_dim < 1:
            raise ValueError("value_dim must be >= 1")
        if self.max_n is None:
            self.max_n = self.t * 2 ** self.T

    @property
    def capacity(self) -> int:
        return self.t * 2 ** self.T

    def inner_balance(self) -> BalanceConfig:
        return replace(self.balance, delta=self.balance.delta / (4 * self.max_n))


@dataclass
class CompressionRecord:
    """One balanced halving, kept when instrumentation is on."""

    level: int
    ordinal: int
    inputs: list[KVPair]
    outputs: list[KVPair]


class MergeReduce:
    """One streaming cascade; single-owner, mutated by ``push`` only.

    Randomness is derived per compression from the owned source keyed by
    (level, ordinal at that level), so results do not depend on scheduling
    and a streaming run matches the equivalent offline recursion under the
    same seed.
    """

    def __init__(self, config: MRConfig, rng: RandomSource,
                 record_compressions: bool = False):
        self.config = config
        self.processed = 0
        self.fail_count = 0
        self.norm_violations = 0
        self.overflow = 0
        self.peak_retained = 0
        self.records: list[CompressionRecord] | None = (
            [] if record_compressions else None
        )
        self._levels: list[list[KVPair]] = [[] for _ in range(config.T + 1)]
        self._level_calls = [0] * (config.T + 1)
        self._rng = rng
        self._inner_cfg = config.inner_balance()

    def push(self, pair: KVPair) -> None:
        """Ingest one pair; runs the cascade at every t-th push.

        Pushing beyond the configured capacity is tolerated: the top level
        then accumulates extra compressed batches and ``overflow`` counts
        the excess pairs, which signals a (t, T) misconfiguration without
        corrupting state.
        """
        if pair.value.shape[0] != self.config.value_dim:
            raise DimensionMismatch(
                f"value has dim {pair.value.shape[0]}, "
                f"expected {self.config.value_dim}"
            )
        self._levels[0].append(pair)
        self.processed += 1
        if self.processed > self.config.capacity:
            self.overflow += 1
        if self.processed % self.config.t == 0:
            self._cascade()
        self.peak_retained = max(self.peak_retained, self.retained_count())

    def _compress_level(self, level: int) -> None:
        self._level_calls[level] += 1
        child = self._rng.child(level, self._level_calls[level])
        batch = self._levels[level]
        result = softmax_balance(batch, self._inner_cfg, child)
        kept = result.take(batch)
        self.fail_count += result.fail_count
        self.norm_violations += result.norm_violations
        if self.records is not None:
            self.records.append(CompressionRecord(
                level=level,
                ordinal=self._level_calls[level],
                inputs=list(batch),
                outputs=list(kept),
            ))
        self._levels[level + 1].extend(kept)
        self._levels[level] = []

    def _cascade(self) -> None:
        p = self.processed // self.config.t
        i = 0
        while i < self.config.T:
            self._compress_level(i)
            i += 1
            if p % 2 != 0:
                break
            p //= 2

    def levels(self) -> list[tuple[int, list[KVPair]]]:
        """Read-only snapshot of the level buffers."""
        return [(i, list(buf)) for i, buf in enumerate(self._levels)]

    def level_sizes(self) -> list[int]:
        return [len(buf) for buf in self._levels]

    def retained_count(self) -> int:
        return sum(len(buf) for buf in self._levels)

    def weighted_count(self) -> int:
        """sum over levels of 2^i * |level i|, the represented pair count."""
        return sum(len(buf) << i for i, buf in enumerate(self._levels))

    def retained_pairs(self) -> list[tuple[int, KVPair]]:
        """All retained pairs as (level, pair), in level-then-arrival order."""
        out = []
        for i, buf in enumerate(self._levels):
            out.extend((i, p) for p in buf)
        return out

    def estimate(self, q) -> np.ndarray:
        """Level-weighted kernel sum: sum_i 2^i sum exp(<k,q>/sqrt(d)) v.

        Returns the zero vector for an empty cascade. With T = 0 this is
        the exact kernel sum over everything ingested.
        """
        total = np.zeros(self.config.value_dim, dtype=np.float64)
        qv = None
        for i, buf in enumerate(self._levels):
            if not buf:
                continue
            K = np.stack([p.key for p in buf])
            V = np.stack([p.value for p in buf])
            if qv is None:
                qv = as_vector(q, dim=K.shape[1], name="q")
            weights = exp_clamped(K @ qv / math.sqrt(K.shape[1]))
            total += float(2 ** i) * (weights @ V)
        return total
