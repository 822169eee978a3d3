"""Single network vs Siamese training on a subject-disjoint synthetic benchmark.

Ten training subjects and two test subjects, 200 frames each by default.
Prints a side-by-side MAE table (mean ± std of absolute error, degrees).
"""
import argparse
import dataclasses

from headpose import experiments as X


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=200, help="frames per subject")
    ap.add_argument("--epochs", type=int, default=X.DESK_BENCHMARK.epochs)
    ap.add_argument("--pairs-per-epoch", type=int, default=X.DESK_BENCHMARK.pairs_per_epoch)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="also write the table here")
    args = ap.parse_args()

    train_set, test_set = X.benchmark_sets(args.seed, args.frames)
    cfg = dataclasses.replace(X.DESK_BENCHMARK, epochs=args.epochs, pairs_per_epoch=args.pairs_per_epoch,
                              seed=args.seed)
    rows = X.siamese_vs_baseline(train_set, test_set, cfg)
    table = X.format_table(rows)
    print(table)
    for r in rows:
        print(f"{r.name}: {r.seconds:.1f} s")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table + "\n")


if __name__ == "__main__":
    main()
