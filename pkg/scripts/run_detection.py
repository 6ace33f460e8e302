"""Detection rate of every cheating server behaviour, plus honest control arms.

    python scripts/run_detection.py --trials 10000 --csv detection.csv
"""

import argparse

from convoy.bench import DETECT_SHAPE, run_detection_experiment, write_detection_csv
from convoy.keymask import SecurityParams
from convoy.server import CHEATING


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=10_000)
    ap.add_argument("--lambda1", type=int, nargs="+", default=[16])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    stats = []
    for lam in args.lambda1:
        params = SecurityParams(lambda1=lam)
        for i, kind in enumerate(CHEATING):
            s = run_detection_experiment(kind, args.trials, DETECT_SHAPE, params, seed=[args.seed, lam, i])
            stats.append(s)
            print(f"lambda1={lam:>2} {s.behavior:>16}  rate {s.rate:.6f}  threshold {s.threshold:.6f}  "
                  f"control failures {s.false_rejections}  {'ok' if s.passed else 'BELOW'}")
    if args.csv:
        write_detection_csv(args.csv, stats)


if __name__ == "__main__":
    main()
