"""Test F1 against interaction depth on the synthetic task, median over seeds."""

import argparse

from ctxcue.experiments import SEEDS, median, run_protocol


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--depths", type=lambda s: [int(x) for x in s.split(",")], default=[0, 1, 2, 3])
    ap.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], default=list(SEEDS))
    ap.add_argument("--max-epochs", type=int, default=20)
    args = ap.parse_args()
    print("depth,seed,accuracy,f1,epochs")
    f1 = {}
    for depth in args.depths:
        runs = [run_protocol(s, depth, max_epochs=args.max_epochs) for s in args.seeds]
        for r in runs:
            print(f"{depth},{r.seed},{r.accuracy:.2f},{r.f1:.2f},{r.epochs}", flush=True)
        f1[depth] = median(r.f1 for r in runs)
    print("# median f1: " + ", ".join(f"L={d}: {v:.1f}" for d, v in f1.items()))


if __name__ == "__main__":
    main()
