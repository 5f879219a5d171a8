"""Adapter command line: train the tap classifier, export feature/gradient
stacks, and train pseudo-label-supervised segmenters."""

from __future__ import annotations

import argparse
import json
import sys

from .train import GateError, export_features, train_classifier, train_segmenter


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camadapter",
        description="Toy-scale producer/consumer for the pseudo-label exchange format.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    clf = sub.add_parser("train-classifier", help="train the multi-block classifier")
    clf.add_argument("--manifest", required=True)
    clf.add_argument("--out", required=True)
    clf.add_argument("--seed", type=int, default=0)
    clf.add_argument("--epochs", type=int, default=30)

    exp = sub.add_parser("export", help="export per-block features and gradients")
    exp.add_argument("--checkpoint", required=True, help="classifier.pt from train-classifier")
    exp.add_argument("--manifest", required=True)
    exp.add_argument("--out", required=True)

    seg = sub.add_parser("train-segmenter", help="train a segmenter from pseudo labels")
    seg.add_argument("--manifest", required=True)
    seg.add_argument("--out", required=True, help="predictions directory")
    seg.add_argument("--mode", required=True,
                     choices=("grad_cam_only", "um_cam", "spl", "um_cam_plus_spl"))
    seg.add_argument("--um-dir", help="fuse output directory (contains um_cam/)")
    seg.add_argument("--spl-dir", help="spl output directory (contains spl_target/)")
    seg.add_argument("--lambda", dest="lam", type=float, default=0.1)
    seg.add_argument("--seed", type=int, default=0)
    seg.add_argument("--epochs", type=int, default=40)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train-classifier":
            report = train_classifier(args.manifest, args.out, seed=args.seed,
                                      epochs=args.epochs)
            print(json.dumps(report, indent=2, sort_keys=True))
            return 0
        if args.command == "export":
            manifest = export_features(args.checkpoint, args.manifest, args.out)
            print(f"wrote {manifest}")
            return 0
        report = train_segmenter(args.manifest, args.out, mode=args.mode,
                                 um_dir=args.um_dir, spl_dir=args.spl_dir,
                                 lam=args.lam, seed=args.seed, epochs=args.epochs)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    except GateError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
