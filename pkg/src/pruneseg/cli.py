"""Command-line surface: data generation, training, evaluation, and
checkpoint/event-log inspection."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import load_config
from .data import generate_dataset
from .reporting import branch_grid_text, timeline_from_events
from .trainer import evaluate, train


def _triple(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _int_triple(text: str) -> tuple[int, int, int]:
    return tuple(int(v) for v in _triple(text))


def _float_triple(text: str) -> tuple[float, float, float]:
    return tuple(float(v) for v in _triple(text))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pruneseg",
        description="Train, prune, and evaluate 3D segmentation networks on "
                    "synthetic phantom volumes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate-data", help="write phantom volumes and a manifest")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--count", type=int, required=True)
    p_gen.add_argument("--dims", type=_int_triple, default=(32, 32, 32))
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--spacing", type=_float_triple, default=(1.0, 1.0, 1.0))
    p_gen.add_argument("--train-frac", type=float, default=0.8)

    p_train = sub.add_parser("train", help="run the two-stage training loop")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--resume", default=None)

    p_eval = sub.add_parser("eval", help="sliding-window evaluation of a checkpoint")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--out", default=None)

    p_inspect = sub.add_parser("inspect", help="print a checkpoint's branch-state grid")
    p_inspect.add_argument("--ckpt", required=True)
    p_inspect.add_argument("--json", action="store_true", dest="as_json",
                           help="also print the architecture descriptor JSON")

    p_tl = sub.add_parser("timeline", help="per-epoch branch-state matrix from an event log")
    p_tl.add_argument("--events", required=True)
    p_tl.add_argument("--out", default=None)
    p_tl.add_argument("--epochs", type=int, default=None)

    args = parser.parse_args(argv)

    if args.command == "generate-data":
        manifest = generate_dataset(args.out, args.count, args.dims, args.seed,
                                    spacing=args.spacing, train_fraction=args.train_frac)
        print(f"wrote {args.count} volumes; manifest at {manifest}")
        return 0

    if args.command == "train":
        config = load_config(args.config)
        artifacts = train(config, resume=args.resume)
        print(f"training complete; final checkpoint {artifacts.final_checkpoint}")
        print(f"epoch log {artifacts.csv_path}; events {artifacts.events_path}")
        return 0

    if args.command == "eval":
        config = load_config(args.config)
        out = Path(args.out) if args.out else Path(config.out_dir) / f"report_{args.split}.json"
        report = evaluate(config, args.ckpt, split=args.split, report_path=out)
        print(json.dumps({k: v for k, v in report.items() if k != "volumes"}, indent=1))
        print(f"full report at {out}")
        return 0

    if args.command == "inspect":
        ckpt = load_checkpoint(args.ckpt)
        desc = ckpt.descriptor
        print(branch_grid_text(desc, ckpt.net.parameter_counts()))
        if args.as_json:
            print(json.dumps(desc, indent=1))
        return 0

    if args.command == "timeline":
        events = [json.loads(ln) for ln in Path(args.events).read_text().splitlines()
                  if ln.strip()]
        doc = timeline_from_events(events, args.epochs)
        text = json.dumps(doc, indent=1)
        if args.out:
            Path(args.out).write_text(text)
            print(f"timeline written to {args.out}")
        else:
            print(text)
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
