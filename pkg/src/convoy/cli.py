"""Command line: ``convoy {bench,detect,ratio,serve}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import bench
from .keymask import SecurityParams
from .net import serve
from .server import BEHAVIORS, CHEATING, ServerBehavior
from .tensor import ConvShape
from .verify import TolerancePolicy

_SHAPE_KEYS = {"m": "m", "n": "n", "k": "k", "cin": "c_in", "c_in": "c_in", "cout": "c_out", "c_out": "c_out"}


def parse_shape(text: str, **defaults) -> ConvShape:
    """Parse ``cin=64,cout=64,k=3,m=18,n=18``; missing keys come from ``defaults``."""
    fields = dict(defaults)
    for part in filter(None, text.split(",")):
        key, sep, value = part.partition("=")
        if not sep or key.strip() not in _SHAPE_KEYS:
            raise argparse.ArgumentTypeError(f"bad shape component {part!r}; use m,n,k,cin,cout")
        fields[_SHAPE_KEYS[key.strip()]] = int(value)
    if "m" in fields and "n" not in fields:
        fields["n"] = fields["m"]
    fields.setdefault("m", fields.get("k", 3))
    fields.setdefault("n", fields["m"])
    try:
        return ConvShape(**fields)
    except (TypeError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _sweep_base(text: str) -> ConvShape:
    return parse_shape(text, m=32, k=3, c_in=3, c_out=16)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _params(args) -> SecurityParams:
    tol = None
    if args.mode == "float" and (args.abs_eps is not None or args.rel_eps is not None):
        base = TolerancePolicy.float_default()
        tol = TolerancePolicy(base.abs_eps if args.abs_eps is None else args.abs_eps,
                              base.rel_eps if args.rel_eps is None else args.rel_eps)
    return SecurityParams(lambda1=args.lambda1, lambda2=args.lambda2, mode=args.mode, tolerance=tol)


def _common(p: argparse.ArgumentParser, mode: str):
    p.add_argument("--mode", choices=("int", "float"), default=mode)
    p.add_argument("--lambda1", type=int, default=16, help="mask magnitude bits")
    p.add_argument("--lambda2", type=int, default=4, help="mask pool size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--endpoint", default=None, help="host:port of a running server (default: in-process)")
    p.add_argument("--csv", default=None, help="write results to this CSV file")
    p.add_argument("--abs-eps", type=float, default=None, help="float-mode absolute tolerance")
    p.add_argument("--rel-eps", type=float, default=None, help="float-mode relative tolerance")


def _bench_config(args, shapes) -> bench.BenchConfig:
    return bench.BenchConfig(shapes=shapes, repetitions=args.reps, mode=args.mode, lambda1=args.lambda1,
                             lambda2=args.lambda2, seed=args.seed, endpoint=args.endpoint,
                             parallel=args.parallel, csv_path=args.csv)


def _print_row(t: bench.PhaseTimings):
    s = t.shape
    print(f"  ({s.m},{s.n},{s.k},{s.c_in},{s.c_out}) client {t.client_ms:.3f} ms, "
          f"original {t.original_compute_ms:.3f} ms", file=sys.stderr)


def cmd_bench(args) -> int:
    if args.bench_cmd == "phases":
        shapes = args.shape or [ConvShape(32, 32, 3, 3, 64)]
        rows = bench.run_phase_bench(_bench_config(args, shapes), _print_row)
    elif args.bench_cmd == "sweep":
        base = args.base
        default = bench.CIN_SWEEP if args.axis == "cin" else bench.COUT_SWEEP
        values = args.values or list(default)
        shapes = bench.sweep_shapes(args.axis, values, base.m, base.n, base.k, base.c_in, base.c_out)
        rows = bench.run_phase_bench(_bench_config(args, shapes), _print_row)
    else:
        cfg = _bench_config(args, [])
        rows = bench.run_model_bench(args.preset, cfg, args.size, _print_row)
        if args.csv:
            bench.write_csv(args.csv, rows)
    print(bench.format_table(rows))
    if args.bench_cmd == "models":
        total = bench.model_totals(rows)
        print()
        print(f"{'model':>10} {'blind':>10} {'verify':>10} {'recover':>10} {'original':>12} {'scheme':>10} {'speedup':>8}")
        print(f"{args.preset:>10} {total['blind_ms']:>10.2f} {total['verify_ms']:>10.2f} {total['recover_ms']:>10.2f} "
              f"{total['original_compute_ms']:>12.2f} {total['scheme_ms']:>10.2f} {total['speedup']:>7.2f}x")
        print(f"client-side advantage (original / blind+verify+recover): {total['client_advantage']:.2f}x")
    return 0


def cmd_detect(args) -> int:
    params = _params(args)
    kinds = list(CHEATING) if args.behavior == "all" else [args.behavior]
    stats = []
    for kind in kinds:
        behavior = ServerBehavior.parse(kind, params.lambda1)
        s = bench.run_detection_experiment(behavior, args.trials, args.shape, params, args.seed,
                                           args.control_trials, args.endpoint)
        stats.append(s)
        note = "" if params.mode == "int" else "  (float mode: empirical only)"
        print(f"{s.behavior:>16}: detected {s.detected}/{s.trials} = {s.rate:.6f}  floor 1-1/|Z| = {s.floor:.8f}  "
              f"honest false rejections {s.false_rejections}/{s.control_trials}{note}")
    if args.csv:
        bench.write_detection_csv(args.csv, stats)
    return 0 if all(s.false_rejections == 0 for s in stats) else 1


def cmd_ratio(args) -> int:
    shape = args.shape
    ratio = bench.theoretical_ratio(shape)
    costs = bench.count_costs(shape, args.index_size)
    print(f"(c_out + c_in k^2) / (c_in c_out k^2) = {ratio.numerator}/{ratio.denominator} = {float(ratio):.6g}")
    writer = csv.writer(sys.stdout)
    writer.writerow(["phase", "SM", "SA"])
    for phase, (sm, sa) in costs.items():
        writer.writerow([phase, sm, sa])
    return 0


def cmd_serve(args) -> int:
    rng = np.random.default_rng(args.seed)
    shapes = bench.preset_layers(args.preset) if args.preset else [args.shape]
    kernels = [bench.random_kernels(s, args.mode, rng) for s in shapes]
    behavior = ServerBehavior.parse(args.behavior, args.lambda1)
    try:
        serve(args.listen, kernels, behavior, args.mode, args.seed)
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convoy", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_bench = sub.add_parser("bench", help="per-phase timing benchmarks")
    bsub = p_bench.add_subparsers(dest="bench_cmd", required=True)
    for name in ("phases", "sweep", "models"):
        p = bsub.add_parser(name)
        _common(p, "float")
        p.add_argument("--reps", type=int, default=3, help="timed repetitions per shape (median reported)")
        p.add_argument("--parallel", type=int, default=1, help="concurrent sessions (timings become contended)")
        if name == "phases":
            p.add_argument("--shape", type=parse_shape, action="append", help="m=..,n=..,k=..,cin=..,cout=.. (repeatable)")
        elif name == "sweep":
            p.add_argument("--axis", choices=("cin", "cout"), required=True)
            p.add_argument("--values", type=_int_list, default=None, help="comma-separated channel counts")
            p.add_argument("--base", type=_sweep_base, default=_sweep_base(""),
                           help="shape whose other fields stay fixed (default m=n=32,k=3,cin=3,cout=16)")
        else:
            p.add_argument("--preset", choices=bench.PRESETS, required=True)
            p.add_argument("--size", type=int, default=None, help="input spatial size")
    p_bench.set_defaults(func=cmd_bench)

    p = sub.add_parser("detect", help="detection rate against a cheating server")
    _common(p, "int")
    p.add_argument("--behavior", default="all", help=f"one of {', '.join(CHEATING)} (kind[:param]) or 'all'")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--control-trials", type=int, default=None, help="honest sessions (default: same as --trials)")
    p.add_argument("--shape", type=parse_shape, default=bench.DETECT_SHAPE)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("ratio", help="closed-form client/server cost ratio and per-phase counts")
    p.add_argument("--shape", type=parse_shape, required=True, help="cin=..,cout=..,k=..[,m=..,n=..]")
    p.add_argument("--index-size", type=int, default=1, help="|I| used for the addition counts")
    p.set_defaults(func=cmd_ratio)

    p = sub.add_parser("serve", help="run the (possibly cheating) server")
    p.add_argument("--listen", default="127.0.0.1:7733")
    p.add_argument("--behavior", default="honest", help=f"one of {', '.join(BEHAVIORS)} (kind[:param])")
    p.add_argument("--mode", choices=("int", "float"), default="int")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda1", type=int, default=16, help="offset range for tampering behaviours")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--preset", choices=bench.PRESETS, default=None)
    group.add_argument("--shape", type=parse_shape, default=bench.DETECT_SHAPE)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CONVOY_LOG", "WARNING").upper())
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
