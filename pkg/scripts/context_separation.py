"""Full model against the pseudo-context ablation on the synthetic XOR task."""

import argparse

from ctxcue.experiments import SEEDS, median, run_protocol


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], default=list(SEEDS))
    ap.add_argument("--depth", type=int, default=2)
    args = ap.parse_args()
    print("variant,seed,accuracy,f1,epochs,seconds")
    acc = {False: [], True: []}
    for pseudo in (False, True):
        for seed in args.seeds:
            r = run_protocol(seed, args.depth, pseudo)
            acc[pseudo].append(r.accuracy)
            name = "pseudo-context" if pseudo else "full"
            print(f"{name},{seed},{r.accuracy:.2f},{r.f1:.2f},{r.epochs},{r.seconds:.0f}", flush=True)
    print(f"# median accuracy: full {median(acc[False]):.1f}, pseudo-context {median(acc[True]):.1f}")


if __name__ == "__main__":
    main()
