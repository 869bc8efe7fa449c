"""Command-line entry point.

Exit codes: 0 success, 2 config/usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .analysis import consistency_score, depth_sweep, export_embeddings, export_routing
from .config import SyntheticConfig, TrainConfig, VARIANTS
from .data import generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, CueNetError
from .gradcheck import run_suite
from .model import checkpoint_train_config
from .training import evaluate, run_ablation, train

log = logging.getLogger("ctxcue")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _load_config(path: str, seed: int | None = None) -> TrainConfig:
    cfg = TrainConfig.load(path)
    return cfg if seed is None else dataclasses.replace(cfg, seed=seed)


def cmd_gen_synth(args) -> int:
    dims = args.dims or [16, 8, 8]
    if len(dims) != 3:
        raise ConfigError("--dims takes three integers dt,da,dv")
    cfg = SyntheticConfig(num_samples=args.n, d_t=dims[0], d_a=dims[1], d_v=dims[2],
                          len_ctx=args.len_ctx, len_utt=args.len_utt, snr=args.snr)
    path = save_dataset(generate_synthetic(cfg, args.seed), args.out)
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    run = train(load_dataset(args.data), cfg, args.out)
    report = evaluate(run.model, load_dataset(args.data), "all", pseudo_context=cfg.pseudo_context,
                      epoch=run.best_epoch)
    (Path(args.out) / "metrics.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_csv())
    return 0


def cmd_eval(args) -> int:
    train_cfg = checkpoint_train_config(args.checkpoint)
    pseudo = bool(train_cfg and train_cfg.pseudo_context)
    report = evaluate(args.checkpoint, load_dataset(args.data), args.scope, pseudo_context=pseudo)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_ablate(args) -> int:
    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}; valid ids: {', '.join(VARIANTS)}")
    reports = run_ablation(load_dataset(args.data), _load_config(args.config), args.variant, args.out)
    sys.stdout.write((Path(args.out) / "ablation.csv").read_text())
    return 0 if reports else 1


def cmd_sweep(args) -> int:
    depth_sweep(load_dataset(args.data), _load_config(args.config), args.depths, args.out)
    sys.stdout.write((Path(args.out) / "depth_sweep.csv").read_text())
    return 0


def cmd_export_routing(args) -> int:
    mat = export_routing(args.checkpoint, load_dataset(args.data), args.modality, args.layer, args.out)
    print(f"consistency_score={consistency_score(mat):.6f}")
    return 0


def cmd_export_embeddings(args) -> int:
    ids, _, _ = export_embeddings(args.checkpoint, load_dataset(args.data), args.out)
    print(f"wrote {len(ids)} rows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.level, seed=args.seed)
    return 0 if all(r.passed for r in results) else 4


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctxcue", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a synthetic incongruity dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--snr", type=float, required=True)
    g.add_argument("--dims", type=_int_list, default=None, help="dt,da,dv")
    g.add_argument("--len-ctx", type=int, default=4)
    g.add_argument("--len-utt", type=int, default=3)
    g.set_defaults(fn=cmd_gen_synth)

    t = sub.add_parser("train")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--scope", choices=["entire", "subset1", "subset2", "all"], default="all")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--variant", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("sweep-depth")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--depths", type=_int_list, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    r = sub.add_parser("export-routing")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--modality", choices=["a", "v"], required=True)
    r.add_argument("--layer", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_export_routing)

    x = sub.add_parser("export-embeddings")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_embeddings)

    c = sub.add_parser("gradcheck")
    c.add_argument("--level", choices=["unit", "full", "all"], default="unit")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except CueNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
