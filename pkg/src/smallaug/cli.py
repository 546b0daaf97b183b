"""Command-line interface.

Exit codes: 0 success, 1 data or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from pathlib import Path

from smallaug import anchors, coco, config, pipeline, synth
from smallaug.config import ConfigError

logger = logging.getLogger("smallaug")


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, help="random seed (a random one is drawn and printed if omitted)")
    g.add_argument("--jobs", type=_positive_int, help="parallel workers (default 1)")
    g.add_argument("--config", type=Path, help="TOML config file; flags override it")
    g.add_argument("--out", type=Path, help="output path")
    g.add_argument("--log-level", default="WARNING", help="logging level on stderr")
    return p


def _anchor_flags(p):
    p.add_argument("--iou-threshold", type=float, dest="positive_iou")
    p.add_argument("--strides", type=_float_list)
    p.add_argument("--base-sizes", type=_float_list)
    p.add_argument("--ratios", type=_float_list, dest="aspect_ratios")
    p.add_argument("--no-force-argmax", action="store_false", dest="force_argmax", default=None)
    p.add_argument("--straddle", type=float, help="ignore anchors reaching further outside the image")
    p.add_argument("--resize", type=_float_list, help="SHORT,LONG_CAP resize before matching")


def _basis_flag(p):
    p.add_argument("--size-basis", choices=["mask", "bbox"])


def _dataset_flags(p):
    p.add_argument("dataset", type=Path, help="directory holding annotations.json and images/")
    p.add_argument("--annotations", type=Path, help="annotation file (default DATASET/annotations.json)")
    p.add_argument("--images", type=Path, help="image directory (default DATASET/images)")
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty --out directory")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="smallaug",
        description="Small-object statistics and copy-paste augmentation for COCO datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="per-size-class object and anchor statistics")
    p.add_argument("annotations", type=Path)
    _anchor_flags(p)
    _basis_flag(p)
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    p.add_argument("--drop-invalid", action="store_true", help="skip invalid annotations instead of failing")

    p = sub.add_parser("augment", parents=[common], help="oversample and copy-paste small objects")
    _dataset_flags(p)
    _basis_flag(p)
    p.add_argument("--mode", choices=[m.value for m in pipeline.Mode])
    p.add_argument("--oversample", type=_positive_int, dest="oversample_ratio")
    p.add_argument("--aug-oversample", type=_positive_int, dest="aug_oversample_ratio")
    p.add_argument("--strategy", choices=["single", "multiple", "all"])
    p.add_argument("--copies", type=_positive_int)
    p.add_argument("--object-fraction", type=float)
    p.add_argument("--scale-range", type=_float_list)
    p.add_argument("--rotation-range", type=_float_list)
    p.add_argument("--margin", type=int, dest="border_margin")
    p.add_argument("--overlap", choices=["reject", "allow"])
    p.add_argument("--overlap-granularity", choices=["mask", "bbox"])
    p.add_argument("--blend", help="hard or gaussian:<odd k>")
    p.add_argument("--max-attempts", type=_positive_int, dest="max_placement_attempts")

    p = sub.add_parser("oversample", parents=[common], help="duplicate images holding small objects")
    _dataset_flags(p)
    _basis_flag(p)
    p.add_argument("--ratio", type=_positive_int, required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic shapes corpus")
    for name in ("images", "width", "height", "small", "medium", "large"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("validate", parents=[common], help="check an annotation file")
    p.add_argument("annotations", type=Path)
    p.add_argument("--recompute-area", action="store_true", help="compare area with the mask pixel count")
    p.add_argument("--tolerance", type=float, default=0.01, help="relative area tolerance (default 0.01)")
    return parser


def _pick(args, names):
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _effective_config(args) -> dict:
    over = _pick(args, ["seed", "jobs", "size_basis"])
    anchors_over = _pick(args, ["positive_iou", "strides", "base_sizes", "aspect_ratios", "force_argmax", "straddle"])
    if getattr(args, "resize", None) is not None:
        anchors_over["resize"] = args.resize
    if anchors_over:
        over["anchors"] = anchors_over
    aug_over = _pick(args, [
        "strategy", "copies", "object_fraction", "scale_range", "rotation_range", "border_margin",
        "overlap", "overlap_granularity", "blend", "max_placement_attempts",
    ])
    if aug_over:
        over["augment"] = aug_over
    pipe_over = _pick(args, ["mode", "oversample_ratio", "aug_oversample_ratio"])
    if pipe_over:
        over["pipeline"] = pipe_over
    if args.command == "synth":
        synth_over = _pick(args, ["images", "width", "height", "small", "medium", "large"])
        if synth_over:
            over["synth"] = synth_over
    return config.load_config(args.config, over)


def _seed(cfg) -> int:
    if cfg["seed"] is None:
        cfg["seed"] = secrets.randbits(63)
        print(f"seed: {cfg['seed']}", file=sys.stderr)
    return int(cfg["seed"])


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


def _check_out(out: Path, overwrite: bool):
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not overwrite:
        raise FileExistsError(f"{out} exists and is not empty (use --overwrite)")


def cmd_analyze(args, cfg) -> int:
    acfg = config.anchor_config(cfg)
    basis = config.size_basis(cfg)
    d = coco.load_dataset(args.annotations, drop_invalid=args.drop_invalid)
    stats = anchors.dataset_statistics(d, acfg, basis, jobs=int(cfg["jobs"]))
    text = anchors.dumps_stats(stats)
    if args.out is not None:
        args.out.write_text(text + "\n", encoding="utf-8")
    print(text if args.json else stats.format_table())
    return 0


def _dataset_paths(args):
    ann = args.annotations or args.dataset / "annotations.json"
    images = args.images or args.dataset / "images"
    return ann, images


def _run_pipeline(args, cfg, aug) -> int:
    out = _require_out(args)
    _check_out(out, args.overwrite)
    ann_path, images_dir = _dataset_paths(args)
    d = coco.load_dataset(ann_path)
    plan = pipeline.PipelinePlan(
        output_dir=out,
        images_dir=images_dir,
        oversample_ratio=int(cfg["pipeline"]["oversample_ratio"]),
        mode=config.pipeline_mode(cfg),
        aug_oversample_ratio=int(cfg["pipeline"]["aug_oversample_ratio"]),
        aug=aug,
        seed=_seed(cfg),
        jobs=int(cfg["jobs"]),
        size_basis=config.size_basis(cfg),
        overwrite=args.overwrite,
    )
    _, report = pipeline.build_output(d, plan)
    r = report.to_json()
    logger.info("report: %s", r)
    print(
        f"{r['images_in']} -> {r['images_out']} images, "
        f"{r['paste_successes']}/{r['paste_attempts']} pastes placed; wrote {out}"
    )
    return 0


def cmd_augment(args, cfg) -> int:
    return _run_pipeline(args, cfg, config.augmentation_config(cfg))


def cmd_oversample(args, cfg) -> int:
    cfg["pipeline"]["oversample_ratio"] = args.ratio
    return _run_pipeline(args, cfg, None)


def cmd_synth(args, cfg) -> int:
    out = _require_out(args)
    _check_out(out, args.overwrite)
    d = synth.generate_synthetic_corpus(config.synth_spec(cfg), _seed(cfg), out)
    print(f"wrote {len(d.images)} images, {len(d.annotations)} annotations to {out}")
    return 0


def cmd_validate(args, cfg) -> int:
    d = coco.load_dataset(args.annotations)
    issues = coco.validate_dataset(d, recompute_area=args.recompute_area, tolerance=args.tolerance)
    for issue in issues:
        print(issue)
    errors = sum(1 for i in issues if i.level == "error")
    warnings = len(issues) - errors
    print(f"{len(d.images)} images, {len(d.annotations)} annotations: {errors} errors, {warnings} warnings")
    return 1 if errors else 0


COMMANDS = {
    "analyze": cmd_analyze,
    "augment": cmd_augment,
    "oversample": cmd_oversample,
    "synth": cmd_synth,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 after --help
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _effective_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"smallaug: error: {exc}", file=sys.stderr)
        return 2
    except (coco.DatasetError, anchors.EmptyDataset, synth.InfeasibleSpec, pipeline.MissingImageFile,
            FileExistsError, OSError, ValueError) as exc:
        print(f"smallaug: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
