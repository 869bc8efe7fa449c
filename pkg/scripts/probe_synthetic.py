"""Linear probes on the synthetic generator: neither block alone predicts the label."""

import argparse

from ctxcue.config import SyntheticConfig
from ctxcue.data import generate_synthetic
from ctxcue.experiments import TASK, probe_accuracy


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--snr", type=float, default=TASK.snr)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    bundle = generate_synthetic(SyntheticConfig(num_samples=args.n, snr=args.snr), args.seed)
    print("features,test_accuracy")
    for kind in ("utterance", "context", "joint"):
        print(f"{kind},{probe_accuracy(bundle, kind):.1f}")


if __name__ == "__main__":
    main()
