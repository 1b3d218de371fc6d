"""Command-line entry points for each stage and for the full pipeline.

Every stage command reads a dataset directory, writes a processed one plus
a report.json audit file, and exits non-zero if any image was quarantined.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .annotations import REAL, SYNTHETIC
from .compositor import REGION_BACKGROUND, REGION_FULL, BlendConfig
from .formats import (
    FORMATS,
    YOLO_TXT,
    load_annotations,
    load_predictions,
    save_annotations,
)
from .halluc_filter import FilterConfig
from .local_refine import RefineConfig
from .metrics import Detection, ground_truth_from_manifest, image_fid, map_eval, patch_fid
from .pipeline import (
    ConfigError,
    PipelineConfig,
    assemble_train_set,
    parse_config,
    parse_retention_mode,
    run_blend_stage,
    run_gst_stage,
    run_hr_stage,
    run_lr_stage,
    run_pipeline,
    write_train_config,
)
from .registry import (
    UnknownAdapterError,
    get_backbone,
    get_captioner,
    get_embedder,
    get_eraser,
    get_extractor,
    load_plugins,
)
from .reporting import json_clean
from .style_transfer import StyleTransferConfig

log = logging.getLogger(__name__)


def _add_format(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--format", choices=FORMATS, default=YOLO_TXT,
                        help="annotation interchange format")


def _finish_stage(manifest, report, out_dir: str, fmt: str) -> int:
    save_annotations(manifest, out_dir, fmt)
    report.save(Path(out_dir) / "report.json")
    n_bad = len(report.quarantined)
    print(f"{report.stage}: {len(report.records)} images processed, {n_bad} quarantined")
    return 0 if n_bad == 0 else 1


def _cmd_gst(args) -> int:
    content = load_annotations(args.content_dir, args.format, SYNTHETIC)
    style = load_annotations(args.style_dir, args.format, REAL)
    cfg = StyleTransferConfig(inversion_t=args.invert_t, num_steps=args.steps,
                              adain_eps=args.adain_eps, style_pick=args.style_pick,
                              seed=args.seed)
    backbone = get_backbone(args.backbone)
    out, report = run_gst_stage(content, style, cfg, backbone, args.workers)
    return _finish_stage(out, report, args.out_dir, args.format)


def _cmd_lr(args) -> int:
    manifest = load_annotations(args.in_dir, args.format, SYNTHETIC)
    cfg = RefineConfig(scale=args.scale, refine_t=args.refine_t,
                       context_pad=args.pad, captioner=args.captioner)
    out, report = run_lr_stage(manifest, cfg, get_backbone(args.backbone),
                               get_captioner(args.captioner), args.workers)
    return _finish_stage(out, report, args.out_dir, args.format)


def _cmd_hr(args) -> int:
    manifest = load_annotations(args.in_dir, args.format, SYNTHETIC)
    real = load_annotations(args.real_dir, args.format, REAL)
    mode, frac = parse_retention_mode(args.mode)
    cfg = FilterConfig(lam=args.lam, alpha=args.alpha, anchor_text=args.anchor,
                       mode=mode, budget_fraction=frac, context_pad=args.pad,
                       seed=args.seed)
    out, report = run_hr_stage(manifest, real, cfg, get_embedder(args.embedder),
                               get_eraser(args.eraser))
    return _finish_stage(out, report, args.out_dir, args.format)


def _region(value: str) -> str:
    if value in ("background", REGION_BACKGROUND):
        return REGION_BACKGROUND
    if value == REGION_FULL:
        return REGION_FULL
    raise argparse.ArgumentTypeError(f"unknown region {value!r}")


def _cmd_blend(args) -> int:
    original = load_annotations(args.orig_dir, args.format, SYNTHETIC)
    styled = load_annotations(args.styled_dir, args.format, SYNTHETIC)
    cfg = BlendConfig(alpha=args.alpha, region=args.region)
    out, report = run_blend_stage(original, styled, cfg)
    return _finish_stage(out, report, args.out_dir, args.format)


def _cmd_eval_fid(args) -> int:
    set_a = load_annotations(args.set_a, args.format, SYNTHETIC)
    set_b = load_annotations(args.set_b, args.format, REAL)
    extractor = get_extractor(args.extractor)
    if args.mode == "image":
        result = image_fid(set_a, set_b, extractor)
    else:
        result = patch_fid(set_a, set_b, extractor, args.pad)
    print(json.dumps({"mode": args.mode, "value": result.value,
                      "count_a": result.count_a, "count_b": result.count_b},
                     sort_keys=True))
    return 0


def _cmd_eval_map(args) -> int:
    gt = ground_truth_from_manifest(load_annotations(args.gt_dir, args.format, REAL))
    detections = [Detection(image_id=i, box=b, score=s)
                  for i, b, s in load_predictions(args.pred)]
    result = map_eval(detections, gt)
    print(json.dumps({
        "map50": result.map50,
        "map50_95": result.map50_95,
        "per_threshold": result.per_threshold,
        "evaluated_images": result.evaluated_images,
        "excluded_empty_gt": result.excluded_empty_gt,
    }, sort_keys=True))
    return 0


def _cmd_run(args) -> int:
    mapping = parse_config(Path(args.config).read_text(), source=args.config)
    for override in args.set or []:
        if "=" not in override:
            raise ConfigError(f"--set expects key=value, got {override!r}")
        key, value = override.split("=", 1)
        mapping[key.strip()] = value.strip()
    cfg = PipelineConfig.from_mapping(mapping)
    final, reports, quarantined = run_pipeline(cfg)
    print(json.dumps(json_clean({
        "images": len(final.records),
        "stages": list(cfg.stages),
        "quarantined": quarantined,
        "output": cfg.output_dir,
    }), sort_keys=True))
    return 0 if quarantined == 0 else 1


def _cmd_make_train_set(args) -> int:
    translated = load_annotations(args.translated_dir, args.format, SYNTHETIC)
    real = load_annotations(args.real_dir, args.format, REAL) if args.real_dir else None
    merged, config = assemble_train_set(translated, real, args.lambda_orig, args.lambda_tran)
    save_annotations(merged, args.out_dir, args.format)
    write_train_config(Path(args.out_dir) / "train-config.txt", config)
    print(f"train set: {len(merged.records)} records "
          f"({config['count.translated']} translated + {config['count.real']} real)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aeroadapt",
        description="Translate annotated synthetic aerial imagery toward a real domain.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gst", help="global style transfer")
    p.add_argument("--content-dir", required=True)
    p.add_argument("--style-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--invert-t", type=int, default=600)
    p.add_argument("--adain-eps", type=float, default=1e-5)
    p.add_argument("--style-pick", default="random",
                   help="'random' or a fixed style image id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backbone", default="toy")
    p.add_argument("--workers", type=int, default=1)
    _add_format(p)
    p.set_defaults(func=_cmd_gst)

    p = sub.add_parser("lr", help="local one-step refinement")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--refine-t", type=int, default=500)
    p.add_argument("--pad", type=float, default=0.2)
    p.add_argument("--captioner", default="fixed-tags")
    p.add_argument("--backbone", default="toy")
    p.add_argument("--workers", type=int, default=1)
    _add_format(p)
    p.set_defaults(func=_cmd_lr)

    p = sub.add_parser("hr", help="hallucination filtering")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--real-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--mode", default="budget:0.5",
                   help="'bernoulli' or 'budget:<fraction>'")
    p.add_argument("--anchor", default=FilterConfig().anchor_text)
    p.add_argument("--pad", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embedder", default="pooled8")
    p.add_argument("--eraser", default="ring-mean")
    _add_format(p)
    p.set_defaults(func=_cmd_hr)

    p = sub.add_parser("blend", help="blend original with styled output")
    p.add_argument("--orig-dir", required=True)
    p.add_argument("--styled-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--region", type=_region, default=REGION_BACKGROUND)
    _add_format(p)
    p.set_defaults(func=_cmd_blend)

    p = sub.add_parser("eval-fid", help="Fréchet distance between two sets")
    p.add_argument("--set-a", required=True)
    p.add_argument("--set-b", required=True)
    p.add_argument("--mode", choices=("image", "patch"), default="image")
    p.add_argument("--extractor", default="pooled8")
    p.add_argument("--pad", type=float, default=0.2)
    _add_format(p)
    p.set_defaults(func=_cmd_eval_fid)

    p = sub.add_parser("eval-map", help="mAP@50 and mAP@50-95 of a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt-dir", required=True)
    _add_format(p)
    p.set_defaults(func=_cmd_eval_map)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (repeatable)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("make-train-set", help="merge translated and real data")
    p.add_argument("--translated-dir", required=True)
    p.add_argument("--real-dir", default="")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lambda-orig", type=float, default=1.0)
    p.add_argument("--lambda-tran", type=float, default=1.0)
    _add_format(p)
    p.set_defaults(func=_cmd_make_train_set)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    load_plugins()
    try:
        return args.func(args)
    except UnknownAdapterError as exc:
        # KeyError subclasses repr their message; unwrap for readability.
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
