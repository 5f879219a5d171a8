"""Command-line entry point.

Subcommands: synth, fuse, spl, eval, loss-eval. A JSON config file may set
any long option (keys use underscores, e.g. {"mode": "um_cam", "alpha": 2});
explicit command-line flags win over the config file. Exit codes: 0 on
success, 1 when some slices failed but the run completed, 2 on
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .fusion import FUSION_MODES, FusionConfig
from .geodesic import SOLVERS, GeodesicConfig
from .gridio import ManifestError, load_manifest
from .losses import LossConfig
from .metrics import EVAL_MODES
from .pipeline import (
    NEGATIVE_POLICIES,
    ConfigError,
    PipelineConfig,
    run_eval,
    run_fuse,
    run_loss_eval,
    run_spl,
)
from .synth import generate_dataset


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camseed",
        description="Pseudo-label generation: activation-map fusion, geodesic "
        "seed expansion, and segmentation metrics over a file manifest.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    synth.add_argument("--out", required=True, help="output dataset directory")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--count", type=int, default=20, help="number of slices")
    synth.add_argument("--size", type=int, default=64, help="slice edge length in pixels")

    fuse = sub.add_parser("fuse", help="fuse per-block activation maps per slice")
    fuse.add_argument("--config", help="JSON config file; flags override it")
    fuse.add_argument("--manifest", required=True)
    fuse.add_argument("--out", required=True)
    fuse.add_argument("--mode", choices=FUSION_MODES, help="fusion mode (default um_cam)")
    fuse.add_argument("--blocks", type=int, help="highest block index M (default 4)")
    fuse.add_argument("--threshold", type=float,
                      help="skip the validation grid search and record this threshold")
    fuse.add_argument("--negative-policy", choices=NEGATIVE_POLICIES)
    fuse.add_argument("--workers", type=int)

    spl = sub.add_parser("spl", help="seed-derived pseudo labels from fused maps")
    spl.add_argument("--config", help="JSON config file; flags override it")
    spl.add_argument("--manifest", required=True)
    spl.add_argument("--maps", required=True, help="output directory of the fuse step")
    spl.add_argument("--out", required=True)
    spl.add_argument("--threshold", type=float, help="override the recorded threshold")
    spl.add_argument("--alpha", type=float, help="exponential decay (default 1.0)")
    spl.add_argument("--connectivity", type=int, choices=(4, 8))
    spl.add_argument("--solver", choices=SOLVERS)
    spl.add_argument("--raster-passes", type=int)
    spl.add_argument("--bbox-margin", type=int)
    spl.add_argument("--negative-policy", choices=NEGATIVE_POLICIES)
    spl.add_argument("--workers", type=int)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--config", help="JSON config file; flags override it")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--pred", required=True, help="directory of <slice_id>.npy binary masks")
    ev.add_argument("--mode", choices=EVAL_MODES, help="default per_slice_2d")
    ev.add_argument("--spacing",
                    help="row,col,slice physical step for 3D mode (default 1,1,7)")
    ev.add_argument("--out", help="also write the JSON report here")

    loss = sub.add_parser("loss-eval", help="joint objective on a file triple")
    loss.add_argument("--config", help="JSON config file; flags override it")
    loss.add_argument("--pred", required=True)
    loss.add_argument("--um-cam", required=True)
    loss.add_argument("--spl", required=True)
    loss.add_argument("--lambda", dest="lam", type=float, help="balance weight (default 0.1)")
    loss.add_argument("--epsilon", type=float, help="log clamp (default 1e-7)")
    return parser


def _load_config_file(path):
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return doc


def _setting(args, config_doc, name, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config_doc:
        return config_doc[name]
    return default


def _pipeline_config(args) -> PipelineConfig:
    doc = _load_config_file(getattr(args, "config", None))
    try:
        fusion = FusionConfig(
            max_block_index=int(_setting(args, doc, "blocks", 4)),
            fusion_mode=_setting(args, doc, "mode", "um_cam"),
        )
        geodesic = GeodesicConfig(
            alpha=float(_setting(args, doc, "alpha", 1.0)),
            connectivity=int(_setting(args, doc, "connectivity", 8)),
            solver=_setting(args, doc, "solver", "raster_scan"),
            raster_passes=int(_setting(args, doc, "raster_passes", 2)),
            bbox_margin=int(_setting(args, doc, "bbox_margin", 0)),
        )
        loss = LossConfig(
            lam=float(_setting(args, doc, "lam", 0.1)),
            epsilon=float(_setting(args, doc, "epsilon", 1e-7)),
        )
        threshold = _setting(args, doc, "threshold", None)
        return PipelineConfig(
            fusion=fusion,
            geodesic=geodesic,
            loss=loss,
            negative_slice_policy=_setting(args, doc, "negative_policy", "all_background"),
            threshold=None if threshold is None else float(threshold),
            workers=int(_setting(args, doc, "workers", 1)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def _cmd_synth(args) -> int:
    manifest = generate_dataset(args.out, seed=args.seed, count=args.count, size=args.size)
    print(f"wrote {manifest}")
    return 0


def _report_stage(name, result) -> int:
    print(f"{name}: {len(result.written)} written, "
          f"{len(result.skipped)} skipped, {len(result.failures)} failed")
    for sid, why in sorted(result.skipped.items()):
        print(f"  skipped {sid}: {why}")
    for sid, why in sorted(result.failures.items()):
        print(f"  FAILED {sid}: {why}", file=sys.stderr)
    return 0 if result.ok else 1


def _cmd_fuse(args) -> int:
    config = _pipeline_config(args)
    manifest = load_manifest(args.manifest)
    result = run_fuse(manifest, args.out, config)
    threshold = result.extra["threshold"]
    if threshold["threshold"] is not None:
        print(f"threshold {threshold['threshold']:.2f} ({threshold['source']}, "
              f"n={threshold['n_validation']})")
    return _report_stage("fuse", result)


def _cmd_spl(args) -> int:
    config = _pipeline_config(args)
    manifest = load_manifest(args.manifest)
    result = run_spl(manifest, args.maps, args.out, config)
    print(f"threshold {result.extra['threshold']:.2f}")
    return _report_stage("spl", result)


def _cmd_eval(args) -> int:
    doc = _load_config_file(args.config)
    mode = _setting(args, doc, "mode", "per_slice_2d")
    spacing_text = str(_setting(args, doc, "spacing", "1,1,7"))
    try:
        spacing = tuple(float(s) for s in spacing_text.split(","))
    except ValueError:
        raise ConfigError(f"bad --spacing {spacing_text!r}, expected e.g. 1,1,7")
    if len(spacing) != 3:
        raise ConfigError(f"--spacing needs three values, got {spacing_text!r}")
    manifest = load_manifest(args.manifest, require_ground_truth=True)
    report, failures = run_eval(
        manifest, args.pred, mode=mode, spacing_3d=spacing, report_path=args.out
    )
    print(report.format_table())
    print(report.to_json())
    for unit, why in sorted(failures.items()):
        print(f"FAILED {unit}: {why}", file=sys.stderr)
    return 0 if not failures else 1


def _cmd_loss_eval(args) -> int:
    doc = _load_config_file(args.config)
    try:
        config = LossConfig(
            lam=float(_setting(args, doc, "lam", 0.1)),
            epsilon=float(_setting(args, doc, "epsilon", 1e-7)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc))
    doc = run_loss_eval(args.pred, args.um_cam, args.spl, config)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "fuse": _cmd_fuse,
        "spl": _cmd_spl,
        "eval": _cmd_eval,
        "loss-eval": _cmd_loss_eval,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ManifestError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
