"""Client-side advantage as the channel counts grow, with a rank-correlation summary.

    python scripts/sweep_channels.py --axis cout --cin 64 --size 18 --csv cout.csv
"""

import argparse

from scipy.stats import spearmanr

from convoy.bench import CIN_SWEEP, COUT_SWEEP, BenchConfig, format_table, run_phase_bench, sweep_shapes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", choices=("cin", "cout"), default="cout")
    ap.add_argument("--values", default=None, help="comma-separated channel counts")
    ap.add_argument("--cin", type=int, default=64)
    ap.add_argument("--cout", type=int, default=64)
    ap.add_argument("--size", type=int, default=18, help="input side m = n")
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--mode", choices=("int", "float"), default="float")
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    default = CIN_SWEEP if args.axis == "cin" else COUT_SWEEP
    values = [int(v) for v in args.values.split(",")] if args.values else list(default)
    shapes = sweep_shapes(args.axis, values, args.size, args.size, args.k, args.cin, args.cout)
    rows = run_phase_bench(BenchConfig(shapes, args.reps, args.mode, csv_path=args.csv))
    print(format_table(rows))
    rho = spearmanr(values, [t.client_advantage for t in rows]).statistic
    print(f"\nspearman(channels, client advantage) = {rho:.3f}")


if __name__ == "__main__":
    main()
