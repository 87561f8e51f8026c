"""Command-line harness: generate, run, compress, verify, calibrate."""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from .balance import MODE_SMALLER_HALF, MODE_STRICT_HALF
from .compressor import BalanceKV
from .core import RandomSource, StreamParams
from .harness import (
    ConfigError,
    calibrate_kappa,
    load_config,
    parse_profile,
    run_experiment,
)
from .streamfile import (
    StreamFormatError,
    generate_synthetic,
    read_stream,
    write_stream,
)


def _cmd_generate(args) -> int:
    profile = parse_profile(args.profile)
    stream = generate_synthetic(
        args.n, args.d, args.s, r=args.r, profile=profile, seed=args.seed
    )
    write_stream(args.out, stream)
    print(f"wrote {args.out}: n={stream.n} d={stream.d} s={stream.s}")
    return 0


def _cmd_run(args) -> int:
    spec = load_config(args.config)
    if args.output:
        spec.output = args.output
    rows = run_experiment(spec)
    if spec.output:
        print(f"wrote {spec.output} ({len(rows)} rows)")
    else:
        for row in rows:
            print(row)
    return 0


def _cmd_compress(args) -> int:
    stream = read_stream(args.stream)
    if stream.n == 0:
        raise SystemExit("empty stream")
    mode = MODE_SMALLER_HALF if args.smaller else MODE_STRICT_HALF
    r = args.r if args.r is not None else max(
        float(np.linalg.norm(stream.keys, axis=1).max()),
        float(np.linalg.norm(stream.queries, axis=1).max()),
        1e-12,
    )
    params = StreamParams(
        n=stream.n, d=stream.d, s=stream.s, r=r,
        epsilon=args.epsilon, delta=args.delta,
    )
    engine = BalanceKV(
        params, t=args.t, T=args.T, rng=RandomSource(args.seed),
        mode=mode, pruning=not args.no_prune,
    )
    sink = args.sink
    recent = args.recent
    middle_last = stream.n - recent
    tokens = stream.tokens()
    for token in tokens[sink:middle_last]:
        engine.push(token)
    writer = csv.writer(
        open(args.out, "w", newline="") if args.out else sys.stdout
    )
    writer.writerow(["index", "bucket", "level", "weight"])
    for idx in range(1, sink + 1):
        writer.writerow([idx, "", "", 1.0])
    for bucket, level, pair in engine.retained_pairs():
        writer.writerow([pair.index, bucket, level, float(2 ** level)])
    for idx in range(middle_last + 1, stream.n + 1):
        writer.writerow([idx, "", "", 1.0])
    return 0


def _cmd_verify(args) -> int:
    from .balance import POLICY_ABORT

    stream = read_stream(args.stream)
    if stream.n == 0:
        raise SystemExit("empty stream")
    r = max(
        float(np.linalg.norm(stream.keys, axis=1).max()),
        float(np.linalg.norm(stream.queries, axis=1).max()),
        1e-12,
    )
    params = StreamParams(
        n=stream.n, d=stream.d, s=stream.s, r=r,
        epsilon=args.epsilon, delta=args.delta,
    )

    def build():
        engine = BalanceKV(
            params, t=args.t, T=args.T, rng=RandomSource(args.seed),
            fail_policy=POLICY_ABORT, pruning=False,
        )
        conservation = True
        cap_ok = True
        for token in stream.tokens():
            engine.push(token)
            for mr in list(engine.numerators.values()) + [engine.denominator]:
                if mr.overflow == 0:
                    if mr.weighted_count() != mr.processed:
                        conservation = False
                    if mr.retained_count() > mr.config.t * (mr.config.T + 1):
                        cap_ok = False
        return engine, conservation, cap_ok

    engine, conservation, cap_ok = build()
    checks = []
    checks.append(("weighted-count conservation", conservation))
    checks.append(("memory cap t*(T+1) per cascade", cap_ok))
    routed = sum(mr.processed for mr in engine.numerators.values())
    routed += engine.zero_values + engine.pruned_pairs
    checks.append(("bucket partition covers stream", routed == stream.n))
    budget = engine.retained_budget()
    checks.append((
        "retention budget (buckets+1)*t*(T+1)",
        engine.diagnostics().retained_pairs <= budget,
    ))
    engine2, _, _ = build()
    same = (
        [(b, l, p.index) for b, l, p in engine.retained_pairs()]
        == [(b, l, p.index) for b, l, p in engine2.retained_pairs()]
    )
    checks.append(("seeded determinism", same))
    failed = 0
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failed += not ok
    return 1 if failed else 0


def _cmd_calibrate(args) -> int:
    profile = parse_profile(args.profile)
    result = calibrate_kappa(
        n=args.n, d=args.d, s=args.s, r=args.r,
        epsilon=args.epsilon, delta=args.delta,
        seeds=tuple(range(args.seeds)), window=args.window,
        profile=profile,
    )
    for entry in result["history"]:
        print(
            f"kappa={entry['kappa']:g} t={entry['t']} T={entry['T']} "
            f"pass_rate={entry['pass_rate']:.3f}"
        )
    print(f"kappa={result['kappa']:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balancekv",
        description="Streaming attention approximation benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic stream file")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--d", type=int, required=True)
    gen.add_argument("--s", type=int, required=True)
    gen.add_argument("--r", type=float, default=1.0)
    gen.add_argument("--profile", default="constant(1.0)")
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=_cmd_generate)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--output", default=None,
                     help="override the config's output path")
    run.set_defaults(func=_cmd_run)

    comp = sub.add_parser(
        "compress",
        help="one-shot compression: list retained indices and weights",
    )
    comp.add_argument("--stream", required=True)
    comp.add_argument("--t", type=int, required=True)
    comp.add_argument("--T", type=int, required=True)
    half = comp.add_mutually_exclusive_group()
    half.add_argument("--strict", action="store_true", default=True,
                      help="retain exactly half per compression (default)")
    half.add_argument("--smaller", action="store_true",
                      help="retain the naturally lighter half instead")
    comp.add_argument("--sink", type=int, default=0)
    comp.add_argument("--recent", type=int, default=0)
    comp.add_argument("--seed", type=int, default=0)
    comp.add_argument("--epsilon", type=float, default=0.5)
    comp.add_argument("--delta", type=float, default=0.01)
    comp.add_argument("--r", type=float, default=None)
    comp.add_argument("--no-prune", action="store_true")
    comp.add_argument("--out", default=None)
    comp.set_defaults(func=_cmd_compress)

    ver = sub.add_parser("verify", help="run the invariant suite on a stream")
    ver.add_argument("--stream", required=True)
    ver.add_argument("--t", type=int, required=True)
    ver.add_argument("--T", type=int, required=True)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--epsilon", type=float, default=0.5)
    ver.add_argument("--delta", type=float, default=0.01)
    ver.set_defaults(func=_cmd_verify)

    cal = sub.add_parser(
        "calibrate",
        help="sweep the batch-size constant until the target pass rate",
    )
    cal.add_argument("--n", type=int, default=1024)
    cal.add_argument("--d", type=int, default=32)
    cal.add_argument("--s", type=int, default=32)
    cal.add_argument("--r", type=float, default=1.0)
    cal.add_argument("--epsilon", type=float, default=0.5)
    cal.add_argument("--delta", type=float, default=0.01)
    cal.add_argument("--seeds", type=int, default=3)
    cal.add_argument("--window", type=int, default=128)
    cal.add_argument("--profile", default="dyadic_mixture(-2,2)")
    cal.set_defaults(func=_cmd_calibrate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, StreamFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
