"""Experiment orchestration: configs, grids, metrics, CSV/JSON reports.

A run is a grid of (t, T) cells crossed with seeds. Every cell compresses
the stream's middle under the configured method, then replays the query
window against the exact oracle, recording both error metrics, wall-clock
timings (minimum and mean over repeats, monotonic clock), retention
peaks, and failure counters. Identical specs with identical seeds produce
identical reports apart from the timing columns.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    MetricUndefined,
    SinkRecent,
    apply_retention,
    drop_middle,
    empirical_relative_error_from,
    exact_attention,
    identity_middle,
    objective_error_from,
    uniform_middle,
    weighted_attention,
)
from .balance import (
    MODE_SMALLER_HALF,
    MODE_STRICT_HALF,
    POLICY_ABORT,
    POLICY_CLAMP_CONTINUE,
)
from .compressor import (
    BalanceKV,
    BlockMiddle,
    CascadeMiddle,
    theoretical_batch_size,
)
from .core import RandomSource, StreamParams
from .streamfile import (
    Constant,
    DyadicMixture,
    LogUniform,
    StreamFile,
    generate_synthetic,
    read_stream,
)

THREADS_ENV = "BALANCEKV_THREADS"

METHODS = ("balancekv", "uniform", "sink_recent", "exact")

# CSV column order; doubles as the ReportRow field order.
REPORT_FIELDS = (
    "method", "t", "T", "seed",
    "rel_err_mean", "rel_err_std", "obj_err_mean",
    "compress_s_min", "compress_s_mean",
    "estimate_s_min", "estimate_s_mean",
    "peak_retained", "fail_count", "skipped",
)

TIMING_FIELDS = (
    "compress_s_min", "compress_s_mean", "estimate_s_min", "estimate_s_mean",
)


class ConfigError(ValueError):
    """A config file field is missing, unknown, or malformed."""


@dataclass
class ReportRow:
    method: str
    t: int
    T: int
    seed: str
    rel_err_mean: float
    rel_err_std: float | None
    obj_err_mean: float
    compress_s_min: float
    compress_s_mean: float
    estimate_s_min: float
    estimate_s_mean: float
    peak_retained: int
    fail_count: int
    skipped: int

    def as_list(self) -> list:
        return [getattr(self, name) for name in REPORT_FIELDS]


@dataclass
class ExperimentSpec:
    """One experiment: a stream source, a method, a grid, and seeds."""

    method: str = "balancekv"
    stream_file: str | None = None
    n: int = 1024
    d: int = 16
    s: int = 16
    r: float = 1.0
    value_profile: object = field(default_factory=Constant)
    t_values: tuple[int, ...] = (64,)
    T_values: tuple[int, ...] = (2,)
    seeds: tuple[int, ...] = (0,)
    query_window: int = 256
    sink: int = 256
    recent: int = 256
    middle: str = "block"
    mode: str = MODE_STRICT_HALF
    fail_policy: str = POLICY_CLAMP_CONTINUE
    delta: float = 0.01
    epsilon: float = 0.5
    sliding: bool = False
    repeats: int = 1
    output: str | None = None
    json_mirror: bool = False
    threads: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"field 'method': {self.method!r} is not one of {METHODS}"
            )
        if not self.t_values or not self.T_values or not self.seeds:
            raise ConfigError("fields 't_values'/'T_values'/'seeds': empty grid")
        if self.middle not in ("block", "cascade"):
            raise ConfigError(f"field 'middle': {self.middle!r}")


_PROFILE_RE = re.compile(r"^(\w+)(?:\(([^)]*)\))?$")


def parse_profile(text: str):
    match = _PROFILE_RE.match(text.strip())
    if not match:
        raise ConfigError(f"field 'value_profile': cannot parse {text!r}")
    name, args = match.group(1), match.group(2)
    parts = [a.strip() for a in args.split(",")] if args else []
    try:
        if name == "constant":
            return Constant(*(float(p) for p in parts))
        if name == "log_uniform":
            return LogUniform(*(float(p) for p in parts))
        if name == "dyadic_mixture":
            return DyadicMixture(*(int(p) for p in parts))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'value_profile': {exc}") from exc
    raise ConfigError(f"field 'value_profile': unknown profile {name!r}")


def _parse_int_list(text: str, key: str) -> tuple[int, ...]:
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"field {key!r}: {exc}") from exc


_BOOL = {"true": True, "1": True, "yes": True,
         "false": False, "0": False, "no": False}

_MODES = {"strict": MODE_STRICT_HALF, "smaller": MODE_SMALLER_HALF,
          MODE_STRICT_HALF: MODE_STRICT_HALF,
          MODE_SMALLER_HALF: MODE_SMALLER_HALF}
_POLICIES = {"clamp": POLICY_CLAMP_CONTINUE, "abort": POLICY_ABORT,
             POLICY_CLAMP_CONTINUE: POLICY_CLAMP_CONTINUE,
             POLICY_ABORT: POLICY_ABORT}


def parse_config(text: str) -> ExperimentSpec:
    """Build an ExperimentSpec from flat ``key = value`` lines.

    Blank lines and ``#`` comments are ignored; errors name the field.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        try:
            if key in ("n", "d", "s", "query_window", "sink", "recent",
                       "repeats", "threads"):
                values[key] = int(val)
            elif key in ("r", "delta", "epsilon"):
                values[key] = float(val)
            elif key in ("t_values", "T_values", "seeds"):
                values[key] = _parse_int_list(val, key)
            elif key == "value_profile":
                values[key] = parse_profile(val)
            elif key in ("sliding", "json_mirror"):
                if val.lower() not in _BOOL:
                    raise ConfigError(f"field {key!r}: not a boolean: {val!r}")
                values[key] = _BOOL[val.lower()]
            elif key == "mode":
                if val not in _MODES:
                    raise ConfigError(f"field 'mode': {val!r}")
                values[key] = _MODES[val]
            elif key == "fail_policy":
                if val not in _POLICIES:
                    raise ConfigError(f"field 'fail_policy': {val!r}")
                values[key] = _POLICIES[val]
            elif key in ("method", "stream_file", "middle", "output"):
                values[key] = val
            else:
                raise ConfigError(f"field {key!r}: unknown")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"field {key!r}: {exc}") from exc
    return ExperimentSpec(**values)


def load_config(path) -> ExperimentSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _cell_stream(spec: ExperimentSpec, seed: int) -> StreamFile:
    if spec.stream_file:
        return read_stream(spec.stream_file)
    return generate_synthetic(
        spec.n, spec.d, spec.s, spec.r, spec.value_profile, seed=seed
    )


def _middle_compressor(spec: ExperimentSpec, t: int, T: int):
    if spec.method == "exact":
        return identity_middle()
    if spec.method == "sink_recent":
        return drop_middle()
    if spec.method == "uniform":
        return uniform_middle(rate=2.0 ** -T)
    if spec.middle == "block":
        return BlockMiddle(
            block_size=t, rounds=T, r_key=spec.r, delta=spec.delta,
            fail_policy=spec.fail_policy,
        )
    return CascadeMiddle(
        t=t, T=T, r=spec.r, delta=spec.delta,
        mode=spec.mode, fail_policy=spec.fail_policy,
    )


def run_cell(spec: ExperimentSpec, t: int, T: int, seed: int) -> ReportRow:
    """Compress, replay the query window, and measure one grid cell."""
    stream = _cell_stream(spec, seed)
    pairs = stream.kv_pairs()
    n = stream.n
    policy = SinkRecent(spec.sink, spec.recent, sliding=spec.sliding)
    compressor = _middle_compressor(spec, t, T)

    compress_times = []
    run = None
    for _ in range(max(1, spec.repeats)):
        rng = RandomSource(seed).child(11, t, T)
        start = time.perf_counter()
        run = apply_retention(pairs, policy, compressor, rng)
        compress_times.append(time.perf_counter() - start)

    window = min(spec.query_window, n)
    positions = range(n - window + 1, n + 1)
    oracle = {j: exact_attention(stream.queries[j - 1], pairs[:j])
              for j in positions}

    estimate_times = []
    rel_errors: list[float] = []
    obj_errors: list[float] = []
    skipped = 0
    peak_retained = 0
    for rep in range(max(1, spec.repeats)):
        start = time.perf_counter()
        estimates = {}
        for j in positions:
            cache, weights = run.cache_at(j)
            if rep == 0:
                peak_retained = max(peak_retained, len(cache))
            try:
                estimates[j] = weighted_attention(
                    stream.queries[j - 1], cache, weights
                )
            except MetricUndefined:
                estimates[j] = None
        estimate_times.append(time.perf_counter() - start)
        if rep > 0:
            continue
        for j in positions:
            z = estimates[j]
            if z is None:
                skipped += 1
                continue
            obj_errors.append(objective_error_from(z, oracle[j]))
            try:
                rel_errors.append(
                    empirical_relative_error_from(z, oracle[j])
                )
            except MetricUndefined:
                skipped += 1

    fail_count = getattr(compressor, "fail_count", 0)
    return ReportRow(
        method=spec.method,
        t=t,
        T=T,
        seed=str(seed),
        rel_err_mean=float(np.mean(rel_errors)) if rel_errors else math.nan,
        rel_err_std=None,  # sigma is a cross-seed statistic; see _aggregate
        obj_err_mean=float(np.mean(obj_errors)) if obj_errors else math.nan,
        compress_s_min=min(compress_times),
        compress_s_mean=float(np.mean(compress_times)),
        estimate_s_min=min(estimate_times),
        estimate_s_mean=float(np.mean(estimate_times)),
        peak_retained=peak_retained,
        fail_count=fail_count,
        skipped=skipped,
    )


def _aggregate(cell_rows: list[ReportRow]) -> ReportRow:
    """Across-seed summary for one (method, t, T) cell group."""
    ref = cell_rows[0]
    means = [r.rel_err_mean for r in cell_rows if not math.isnan(r.rel_err_mean)]
    objs = [r.obj_err_mean for r in cell_rows if not math.isnan(r.obj_err_mean)]
    return ReportRow(
        method=ref.method,
        t=ref.t,
        T=ref.T,
        seed="all",
        rel_err_mean=float(np.mean(means)) if means else math.nan,
        rel_err_std=(
            float(np.std(means, ddof=1)) if len(means) >= 2 else None
        ),
        obj_err_mean=float(np.mean(objs)) if objs else math.nan,
        compress_s_min=min(r.compress_s_min for r in cell_rows),
        compress_s_mean=float(
            np.mean([r.compress_s_mean for r in cell_rows])
        ),
        estimate_s_min=min(r.estimate_s_min for r in cell_rows),
        estimate_s_mean=float(
            np.mean([r.estimate_s_mean for r in cell_rows])
        ),
        peak_retained=max(r.peak_retained for r in cell_rows),
        fail_count=sum(r.fail_count for r in cell_rows),
        skipped=sum(r.skipped for r in cell_rows),
    )


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_experiment(spec: ExperimentSpec) -> list[ReportRow]:
    """Run the full grid; returns per-seed rows then per-cell aggregates.

    Writes CSV (given ``spec.output``) and its JSON mirror when asked.
    Results are sorted, so scheduling never changes the report.
    """
    cells = [
        (t, T, seed)
        for t in spec.t_values
        for T in spec.T_values
        for seed in spec.seeds
    ]
    workers = spec.threads if spec.threads is not None else default_threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(
                lambda cell: run_cell(spec, *cell), cells
            ))
    else:
        rows = [run_cell(spec, *cell) for cell in cells]
    rows.sort(key=lambda r: (r.t, r.T, int(r.seed)))
    aggregates = []
    for t in spec.t_values:
        for T in spec.T_values:
            group = [r for r in rows if r.t == t and r.T == T]
            if group:
                aggregates.append(_aggregate(group))
    rows.extend(aggregates)
    if spec.output:
        write_report_csv(spec.output, rows)
        if spec.json_mirror:
            write_report_json(
                os.path.splitext(spec.output)[0] + ".json", rows
            )
    return rows


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_csv(path, rows: list[ReportRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for row in rows:
            writer.writerow([_format_value(v) for v in row.as_list()])


def write_report_json(path, rows: list[ReportRow]) -> None:
    payload = [dict(zip(REPORT_FIELDS, row.as_list())) for row in rows]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def evaluate_stream_estimator(stream: StreamFile, params: StreamParams,
                              t: int, T: int, seed: int, window: int,
                              mode: str = MODE_STRICT_HALF,
                              fail_policy: str = POLICY_CLAMP_CONTINUE,
                              pruning: bool = True) -> dict:
    """Push a whole stream through the streaming estimator and score the
    last ``window`` positions against the exact oracle.

    Returns objective and relative errors plus the final diagnostics.
    This is the full streaming protocol (no sink/recent retention).
    """
    engine = BalanceKV(
        params, t=t, T=T, rng=RandomSource(seed).child(3),
        mode=mode, fail_policy=fail_policy, pruning=pruning,
    )
    pairs = stream.kv_pairs()
    n = stream.n
    first = max(1, n - window + 1)
    obj_errors: list[float] = []
    rel_errors: list[float] = []
    skipped = 0
    for token in stream.tokens():
        engine.push(token)
        j = token.index
        if j < first:
            continue
        out = engine.estimate(stream.queries[j - 1])
        oracle = exact_attention(stream.queries[j - 1], pairs[:j])
        obj_errors.append(objective_error_from(out.z, oracle))
        try:
            rel_errors.append(
                empirical_relative_error_from(out.z, oracle)
            )
        except MetricUndefined:
            skipped += 1
    return {
        "obj_errors": obj_errors,
        "rel_errors": rel_errors,
        "skipped": skipped,
        "diagnostics": engine.diagnostics(),
        "t": t,
        "T": T,
    }


KAPPA_GRID = (0.0125, 0.025, 0.05, 0.1, 0.2, 0.4, 0.8)


def calibrate_kappa(n: int, d: int, s: int, r: float, epsilon: float,
                    delta: float, seeds=(0, 1, 2), window: int = 128,
                    profile=None, kappa_grid=KAPPA_GRID,
                    target_rate: float = 0.9) -> dict:
    """Smallest kappa (hence smallest t) whose estimator hits the target
    objective-error pass rate on synthetic streams.

    The grid ascends, so the first passing kappa is the cheapest. The
    largest grid entries push t toward n, where the estimator is exact,
    so the sweep always terminates with a result.
    """
    profile = profile if profile is not None else DyadicMixture()
    params = StreamParams(n=n, d=d, s=s, r=r, epsilon=epsilon, delta=delta)
    history = []
    for kappa in kappa_grid:
        t, T = theoretical_batch_size(params, kappa)
        hits = 0
        total = 0
        for seed in seeds:
            stream = generate_synthetic(n, d, s, r, profile, seed=seed)
            result = evaluate_stream_estimator(
                stream, params, t, T, seed, window
            )
            hits += sum(e <= epsilon for e in result["obj_errors"])
            total += len(result["obj_errors"])
        rate = hits / total if total else 0.0
        entry = {"kappa": kappa, "t": t, "T": T, "pass_rate": rate}
        history.append(entry)
        if rate >= target_rate:
            entry = dict(entry)
            entry["history"] = history
            return entry
    final = dict(history[-1])
    final["history"] = history
    return final
