"""Steps needed to fit 32 synthetic samples perfectly."""

import argparse

from ctxcue.experiments import overfit


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-steps", type=int, default=300)
    args = ap.parse_args()
    r = overfit(seed=args.seed, max_steps=args.max_steps)
    print(f"reached_at={r.reached_at} final_accuracy={r.final_accuracy:.1f} seconds={r.seconds:.1f}")


if __name__ == "__main__":
    main()
