"""Whole-model timing table for the VGG, ResNet and hyperspectral presets.

    python scripts/model_presets.py vgg16 resnet50 --reps 3
"""

import argparse

from convoy.bench import PRESETS, BenchConfig, model_totals, run_model_bench, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("presets", nargs="*", default=["vgg16", "resnet50", "cnn3layer"], choices=PRESETS)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--size", type=int, default=None)
    ap.add_argument("--mode", choices=("int", "float"), default="float")
    ap.add_argument("--csv-prefix", default=None)
    args = ap.parse_args()

    print(f"{'model':>10} {'layers':>6} {'blind':>9} {'verify':>9} {'recover':>9} {'roundtrip':>10} "
          f"{'original':>10} {'client adv':>10} {'speedup':>8}")
    for name in args.presets:
        rows = run_model_bench(name, BenchConfig(repetitions=args.reps, mode=args.mode), args.size)
        if args.csv_prefix:
            write_csv(f"{args.csv_prefix}{name}.csv", rows)
        t = model_totals(rows)
        print(f"{name:>10} {sum(r.count for r in rows):>6} {t['blind_ms']:>9.1f} {t['verify_ms']:>9.1f} "
              f"{t['recover_ms']:>9.1f} {t['roundtrip_ms']:>10.1f} {t['original_compute_ms']:>10.1f} "
              f"{t['client_advantage']:>10.2f} {t['speedup']:>8.2f}")


if __name__ == "__main__":
    main()
