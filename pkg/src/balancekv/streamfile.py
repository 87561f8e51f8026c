"""Binary stream files and synthetic stream generation.

Layout (little-endian), 14-byte header followed by n fixed-size records:

    offset  size  field
    0       4     magic "BKV1"
    4       2     version (u16), currently 1
    6       4     n, number of records (u32)
    10      2     d, query/key dimension (u16)
    12      2     s, value dimension (u16)
    14      -     n records of (q: d*f32, k: d*f32, v: s*f32)

Payload floats are IEEE-754 binary32; everything is widened to float64 on
read. A file must be exactly 14 + n*(2d+s)*4 bytes and all floats finite.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import KVPair, RandomSource, TokenTriple

MAGIC = b"BKV1"
VERSION = 1
_HEADER = struct.Struct("<4sHIHH")


class StreamFormatError(ValueError):
    """A stream file violates the format contract."""


@dataclass
class StreamFile:
    """An in-memory stream: row i holds token i+1 (1-based positions)."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    version: int = VERSION

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.queries.shape != self.keys.shape:
            raise StreamFormatError("queries and keys must share a shape")
        if self.values.shape[0] != self.queries.shape[0]:
            raise StreamFormatError("values row count differs from queries")

    @property
    def n(self) -> int:
        return self.queries.shape[0]

    @property
    def d(self) -> int:
        return self.queries.shape[1]

    @property
    def s(self) -> int:
        return self.values.shape[1]

    def tokens(self) -> list[TokenTriple]:
        return [
            TokenTriple(self.queries[i], self.keys[i], self.values[i], i + 1)
            for i in range(self.n)
        ]

    def kv_pairs(self) -> list[KVPair]:
        return [
            KVPair(self.keys[i], self.values[i], i + 1) for i in range(self.n)
        ]


def write_stream(path, stream: StreamFile) -> None:
    """Serialize; floats narrow to f32, the only lossy step in a round trip."""
    n, d, s = stream.n, stream.d, stream.s
    if d > 0xFFFF or s > 0xFFFF:
        raise StreamFormatError("dimensions exceed the u16 header fields")
    payload = np.hstack([stream.queries, stream.keys, stream.values])
    if not np.isfinite(payload).all():
        raise StreamFormatError("stream contains non-finite floats")
    data = _HEADER.pack(MAGIC, stream.version, n, d, s)
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def read_stream(path) -> StreamFile:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise StreamFormatError(
            f"file is {len(raw)} bytes, shorter than the {_HEADER.size}-byte header"
        )
    magic, version, n, d, s = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise StreamFormatError(f"unsupported version {version}")
    expected = _HEADER.size + n * (2 * d + s) * 4
    if len(raw) != expected:
        raise StreamFormatError(
            f"file is {len(raw)} bytes, expected {expected} for n={n}, d={d}, s={s}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    table = flat.reshape(n, 2 * d + s).astype(np.float64) if n else np.zeros(
        (0, 2 * d + s)
    )
    if not np.isfinite(table).all():
        raise StreamFormatError("stream contains non-finite floats")
    return StreamFile(
        queries=table[:, :d],
        keys=table[:, d: 2 * d],
        values=table[:, 2 * d:],
        version=version,
    )


@dataclass
class Constant:
    """All value norms equal; the whole stream lands in one bucket."""

    norm: float = 1.0


@dataclass
class LogUniform:
    """Value norms log-uniform on [lo, hi]."""

    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo <= self.hi:
            raise ValueError("need 0 < lo <= hi")


@dataclass
class DyadicMixture:
    """Value norms spread across dyadic bands 2^lo_exp .. 2^(hi_exp+1).

    A band exponent is drawn uniformly, then the norm is log-uniform
    within the band, so every dyadic bucket in range sees traffic.
    """

    lo_exp: int = -2
    hi_exp: int = 2

    def __post_init__(self):
        if self.lo_exp > self.hi_exp:
            raise ValueError("need lo_exp <= hi_exp")


ValueNormProfile = Constant | LogUniform | DyadicMixture


def _value_norms(profile: ValueNormProfile, n: int,
                 gen: np.random.Generator) -> np.ndarray:
    if isinstance(profile, Constant):
        return np.full(n, float(profile.norm))
    if isinstance(profile, LogUniform):
        return np.exp(
            gen.uniform(math.log(profile.lo), math.log(profile.hi), size=n)
        )
    if isinstance(profile, DyadicMixture):
        exps = gen.integers(profile.lo_exp, profile.hi_exp + 1, size=n)
        return np.exp2(exps + gen.random(n))
    raise TypeError(f"unknown value norm profile {profile!r}")


def _unit_rows(gen: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = gen.standard_normal((n, dim))
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return rows / norms


def generate_synthetic(n: int, d: int, s: int, r: float = 1.0,
                       profile: ValueNormProfile | None = None,
                       seed: int = 0) -> StreamFile:
    """Gaussian-direction stream with norm control.

    Queries and keys get independent uniform directions with radii uniform
    on (0, r], so the declared bound always holds without rejection.
    Value norms follow ``profile`` (constant 1.0 by default).
    """
    profile = profile if profile is not None else Constant()
    gen = RandomSource(seed).generator
    q_radii = r * (1.0 - gen.random(n))
    k_radii = r * (1.0 - gen.random(n))
    queries = _unit_rows(gen, n, d) * q_radii[:, None]
    keys = _unit_rows(gen, n, d) * k_radii[:, None]
    values = _unit_rows(gen, n, s) * _value_norms(profile, n, gen)[:, None]
    return StreamFile(queries=queries, keys=keys, values=values)
