"""Sublinear-memory streaming attention via balanced KV compression.

The library keeps a compressed stand-in for a growing key-value cache:
batches of pairs are repeatedly split into two halves that agree on every
kernel-weighted sum, one half is kept at doubled weight, and a
merge-reduce cascade applies the split recursively so memory stays near
batch-size * depth while attention queries remain answerable at any
stream position.
"""

from .attention import (
    AttentionResult,
    MetricUndefined,
    RetentionPolicy,
    SinkRecent,
    UniformSample,
    apply_retention,
    empirical_relative_error,
    exact_attention,
    objective_error,
    uniform_compress,
    weighted_attention,
)
from .balance import (
    MODE_SMALLER_HALF,
    MODE_STRICT_HALF,
    POLICY_ABORT,
    POLICY_CLAMP_CONTINUE,
    BalanceAbort,
    BalanceConfig,
    WalkResult,
    WalkState,
    self_balancing_walk,
    softmax_balance,
    walk_step,
)
from .compressor import (
    BalanceKV,
    EstimationError,
    EstimatorOutput,
    block_compress,
    bucket_index,
    prune_threshold,
    theoretical_batch_size,
)
from .core import (
    KVPair,
    RandomSource,
    StreamParams,
    TokenTriple,
    exp_kernel,
    frobenius_norm,
    l2_norm,
    pair_affinity,
)
from .harness import ExperimentSpec, ReportRow, parse_config, run_experiment
from .merge_reduce import MergeReduce, MRConfig
from .streamfile import (
    Constant,
    DyadicMixture,
    LogUniform,
    StreamFile,
    generate_synthetic,
    read_stream,
    write_stream,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionResult",
    "BalanceAbort",
    "BalanceConfig",
    "BalanceKV",
    "Constant",
    "DyadicMixture",
    "EstimationError",
    "EstimatorOutput",
    "ExperimentSpec",
    "KVPair",
    "LogUniform",
    "MergeReduce",
    "MetricUndefined",
    "MODE_SMALLER_HALF",
    "MODE_STRICT_HALF",
    "MRConfig",
    "POLICY_ABORT",
    "POLICY_CLAMP_CONTINUE",
    "RandomSource",
    "ReportRow",
    "RetentionPolicy",
    "SinkRecent",
    "StreamFile",
    "StreamParams",
    "TokenTriple",
    "UniformSample",
    "WalkResult",
    "WalkState",
    "apply_retention",
    "block_compress",
    "bucket_index",
    "empirical_relative_error",
    "exact_attention",
    "exp_kernel",
    "frobenius_norm",
    "generate_synthetic",
    "l2_norm",
    "objective_error",
    "pair_affinity",
    "parse_config",
    "prune_threshold",
    "read_stream",
    "run_experiment",
    "self_balancing_walk",
    "softmax_balance",
    "theoretical_batch_size",
    "uniform_compress",
    "walk_step",
    "weighted_attention",
    "write_stream",
]
