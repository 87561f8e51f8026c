"""Randomized balanced partitioning of vector and key-value batches.

Both operations here implement the same online signing rule: items arrive
one at a time, each receives a +1/-1 sign drawn with a probability that
leans against the current signed correlation, and the lighter sign class
becomes the output half. Keeping the signed sums small in every direction
means either half is a faithful proxy for the whole batch.

``self_balancing_walk`` balances plain vectors under the ordinary inner
product. ``softmax_balance`` balances (key, value) pairs under the
exponential-kernel geometry: the relevant inner product of two pairs is
exp(<k_i, k_j>/sqrt(d)) * <v_i, v_j>, evaluated directly so the lifted
feature vectors are never materialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DimensionMismatch,
    KVPair,
    RandomSource,
    exp_clamped,
)

MODE_SMALLER_HALF = "smaller_half"
MODE_STRICT_HALF = "strict_half"
POLICY_ABORT = "abort"
POLICY_CLAMP_CONTINUE = "clamp_continue"


class BalanceAbort(RuntimeError):
    """Signed correlation exceeded its cap under the abort policy.

    ``step`` is the 1-based index of the incoming item that tripped the cap.
    """

    def __init__(self, step: int, value: float, cap: float):
        super().__init__(
            f"balance cap exceeded at step {step}: |{value:.6g}| > {cap:.6g}"
        )
        self.step = step
        self.value = value
        self.cap = cap


@dataclass
class BalanceConfig:
    """Parameters shared by every balancing call.

    ``r_key``/``r_value`` are the promised norm bounds of inputs; ``delta``
    is the per-call failure probability. ``strict_half`` mode forces the
    output to exactly floor(n/2) items, ``smaller_half`` returns whichever
    sign class is lighter. The clamp-continue policy keeps a run alive when
    the cap is breached (probabilities are clipped and a counter records
    the event); ``abort`` raises instead.
    """

    delta: float
    r_key: float
    r_value: float
    mode: str = MODE_STRICT_HALF
    fail_policy: str = POLICY_CLAMP_CONTINUE

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.r_key <= 0 or self.r_value <= 0:
            raise ValueError("r_key and r_value must be > 0")
        if self.mode not in (MODE_SMALLER_HALF, MODE_STRICT_HALF):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.fail_policy not in (POLICY_ABORT, POLICY_CLAMP_CONTINUE):
            raise ValueError(f"unknown fail_policy {self.fail_policy!r}")


class WalkState:
    """Running state of one balancing walk.

    Holds the signs assigned so far, the signed correlation seen by each
    incoming item (``signed_sums[j]`` is the correlation the (j+1)-th item
    faced, before its sign was drawn), the cap constant ``c``, the scale
    ``R`` (an upper bound on the feature-space norm of any item), and the
    count of cap breaches under the clamp-continue policy.
    """

    def __init__(self, capacity: int, c: float, R: float,
                 fail_policy: str = POLICY_CLAMP_CONTINUE):
        self.c = float(c)
        self.R = float(R)
        self.fail_policy = fail_policy
        self.fail_count = 0
        self.signed_sums: list[float] = []
        self._signs = np.zeros(capacity, dtype=np.float64)
        self.count = 0

    @property
    def cap(self) -> float:
        return self.c * self.R * self.R

    @property
    def signs(self) -> np.ndarray:
        """Signs assigned so far, as an int8 array of +/-1."""
        return self._signs[: self.count].astype(np.int8)


def walk_step(state: WalkState, affinity_row, rng: RandomSource) -> int:
    """Assign a sign to the next item.

    ``affinity_row`` lists the item's affinity with each previously signed
    item (length ``state.count``; the still-unsigned item itself would
    contribute nothing). Returns the drawn sign and appends it to the
    state. The first item always sees probability exactly 1/2; an item
    facing a correlation at the cap gets a deterministic opposing sign.
    """
    j = state.count
    if j >= state._signs.shape[0]:
        raise IndexError("walk capacity exceeded")
    row = np.asarray(affinity_row, dtype=np.float64)
    if row.shape != (j,):
        raise DimensionMismatch(
            f"affinity row has shape {row.shape}, expected ({j},)"
        )
    y = float(row @ state._signs[:j]) if j else 0.0
    cap = state.cap
    if abs(y) > cap:
        if state.fail_policy == POLICY_ABORT:
            raise BalanceAbort(step=j + 1, value=y, cap=cap)
        state.fail_count += 1
    p = 0.5 - y / (2.0 * cap)
    if p < 0.0:
        p = 0.0
    elif p > 1.0:
        p = 1.0
    sign = 1 if rng.uniform() < p else -1
    state._signs[j] = sign
    state.count = j + 1
    state.signed_sums.append(y)
    return sign


@dataclass
class WalkResult:
    """Outcome of one balancing call.

    ``selected`` are ascending indices of the output half. ``signs`` are
    the raw walk signs for every item; in strict mode the selection may
    differ from the raw sign partition by the minimal set of moved items
    (``moved``), chosen to perturb the balance least. ``signed_sums[j]``
    is the correlation faced by item j at its own step, and
    ``contributions[i]`` is |item i's affinity against the final signed
    batch|, the quantity that ranks candidates for strict-half moves.
    """

    selected: np.ndarray
    signs: np.ndarray
    signed_sums: np.ndarray
    contributions: np.ndarray
    fail_count: int = 0
    norm_violations: int = 0
    moved: int = 0

    @property
    def n(self) -> int:
        return self.signs.shape[0]

    def take(self, items):
        """The output half of ``items``."""
        return [items[i] for i in self.selected]

    def complement(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.selected] = False
        return np.flatnonzero(mask)


def _empty_result() -> WalkResult:
    return WalkResult(
        selected=np.empty(0, dtype=np.intp),
        signs=np.empty(0, dtype=np.int8),
        signed_sums=np.empty(0, dtype=np.float64),
        contributions=np.empty(0, dtype=np.float64),
    )


def select_half(signs, contributions, mode: str) -> tuple[np.ndarray, int]:
    """Pick the output half from a full sign assignment.

    The lighter sign class wins, ties going to +1. In strict mode the
    output is padded to exactly floor(n/2) items by moving over members of
    the heavier class with the smallest |contribution| (ties broken by
    lower index), which perturbs the achieved balance least. Returns
    (ascending indices, number of moved items).
    """
    signs = np.asarray(signs)
    n = signs.shape[0]
    plus = np.flatnonzero(signs > 0)
    minus = np.flatnonzero(signs < 0)
    out, other = (plus, minus) if plus.size <= minus.size else (minus, plus)
    moved = 0
    if mode == MODE_STRICT_HALF:
        need = n // 2 - out.size
        if need > 0:
            contributions = np.asarray(contributions, dtype=np.float64)
            order = np.lexsort((other, contributions[other]))
            out = np.concatenate([out, other[order[:need]]])
            moved = need
    elif mode != MODE_SMALLER_HALF:
        raise ValueError(f"unknown mode {mode!r}")
    return np.sort(out), moved


def _run_walk(affinity: np.ndarray, c: float, R: float, rng: RandomSource,
              mode: str, fail_policy: str
              ) -> tuple[WalkState, np.ndarray, np.ndarray, int]:
    """Drive walk_step over a precomputed affinity matrix and select a half.

    Returns (state, selected indices, contributions, moved count). The
    affinity matrix is the quadratic-cost part; each step then reads one
    stored row.
    """
    n = affinity.shape[0]
    state = WalkState(n, c=c, R=R, fail_policy=fail_policy)
    for j in range(n):
        walk_step(state, affinity[j, :j], rng)
    signs = state._signs[:n]
    contributions = np.abs(affinity @ signs)
    selected, moved = select_half(signs, contributions, mode)
    return state, selected, contributions, moved


def self_balancing_walk(items, r: float, delta: float, rng: RandomSource,
                        mode: str = MODE_SMALLER_HALF,
                        fail_policy: str = POLICY_CLAMP_CONTINUE) -> WalkResult:
    """Balance plain vectors under the ordinary inner product.

    ``items`` is a sequence of equal-dimension vectors with norms at most
    ``r``. For any test direction u, the signed sum of <item, u> over the
    recorded signs stays below 30*log(n/delta)*r*|u| with probability at
    least 1 - delta.
    """
    U = np.asarray(items, dtype=np.float64)
    if U.ndim != 2:
        U = U.reshape(len(items), -1)
    n = U.shape[0]
    if n == 0:
        return _empty_result()
    norms = np.linalg.norm(U, axis=1)
    violations = int((norms > r * (1.0 + 1e-9)).sum())
    if violations and fail_policy == POLICY_ABORT:
        raise ValueError(
            f"{violations} item(s) exceed the declared norm bound r={r}"
        )
    c = 30.0 * math.log(n / delta)
    affinity = U @ U.T
    state, selected, contributions, moved = _run_walk(
        affinity, c, r, rng, mode, fail_policy
    )
    return WalkResult(
        selected=selected,
        signs=state.signs,
        signed_sums=np.asarray(state.signed_sums),
        contributions=contributions,
        fail_count=state.fail_count,
        norm_violations=violations,
        moved=moved,
    )


def pair_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Stack keys and values of a pair sequence into (n, d) and (n, s)."""
    K = np.stack([p.key for p in pairs])
    V = np.stack([p.value for p in pairs])
    return K, V


def affinity_matrix(K: np.ndarray, V: np.ndarray, d: int) -> np.ndarray:
    """Pairwise kernel-space inner products of (key, value) pairs."""
    return exp_clamped(K @ K.T / math.sqrt(d)) * (V @ V.T)


def softmax_balance(pairs, cfg: BalanceConfig, rng: RandomSource) -> WalkResult:
    """Balance (key, value) pairs under the exponential-kernel geometry.

    For any query q, the two halves' kernel-weighted value sums
    sum exp(<k, q>/sqrt(d)) * v differ (in l2) by at most
    O(sqrt(s) * log(n*s/delta) * exp(|q|^2/(2 sqrt(d))) * R) with
    probability at least 1 - delta, where R bounds the feature-space norm
    of any pair. The sign of pair j depends only on pairs 1..j-1, so
    rerunning on a prefix with the same seed reproduces the same prefix of
    signs.

    Empty input returns an empty result. With one-dimensional values all
    equal to one, this balances the kernel sums themselves, which is how
    the softmax normalizer is compressed.
    """
    pairs = list(pairs)
    n = len(pairs)
    if n == 0:
        return _empty_result()
    K, V = pair_arrays(pairs)
    d = K.shape[1]
    key_norms = np.linalg.norm(K, axis=1)
    value_norms = np.linalg.norm(V, axis=1)
    violations = int((key_norms > cfg.r_key * (1.0 + 1e-9)).sum())
    violations += int((value_norms > cfg.r_value * (1.0 + 1e-9)).sum())
    if violations and cfg.fail_policy == POLICY_ABORT:
        raise ValueError(
            f"{violations} pair(s) exceed declared norm bounds "
            f"(r_key={cfg.r_key}, r_value={cfg.r_value})"
        )
    c = 30.0 * math.log(n / cfg.delta)
    R = math.exp(cfg.r_key ** 2 / (2.0 * math.sqrt(d))) * cfg.r_value
    affinity = affinity_matrix(K, V, d)
    state, selected, contributions, moved = _run_walk(
        affinity, c, R, rng, cfg.mode, cfg.fail_policy
    )
    return WalkResult(
        selected=selected,
        signs=state.signs,
        signed_sums=np.asarray(state.signed_sums),
        contributions=contributions,
        fail_count=state.fail_count,
        norm_violations=violations,
        moved=moved,
    )
