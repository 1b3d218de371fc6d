"""Batch orchestration: config parsing, stage runners, train-set assembly.

A run applies the enabled stages in order to every synthetic image, with a
barrier between stages, persisting each stage's output directory and audit
report.  A failing image is quarantined (copied through unchanged) rather
than aborting the batch.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .annotations import REAL, SYNTHETIC, AnnotatedImage, DatasetManifest
from .compositor import BlendConfig, blend
from .formats import YOLO_TXT, FORMATS, load_annotations, save_annotations
from .halluc_filter import (
    FilterConfig,
    MODE_BERNOULLI,
    MODE_BUDGET,
    build_prototype,
    erase_instances,
    plan_retention,
    score_image,
)
from .local_refine import RefineConfig, local_refine
from .registry import (
    get_backbone,
    get_captioner,
    get_embedder,
    get_eraser,
    get_extractor,
)
from .reporting import StageReport, json_clean
from .style_transfer import (
    StyleLatentCache,
    StyleTransferConfig,
    choose_style,
    gst_transfer,
)

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "parse_config",
    "run_pipeline",
    "assemble_train_set",
    "STAGE_NAMES",
]

STAGE_GST = "gst"
STAGE_LR = "lr"
STAGE_HR = "hr"
STAGE_BLEND = "blend"
STAGE_NAMES = (STAGE_GST, STAGE_LR, STAGE_HR, STAGE_BLEND)
_CORE_ORDER = {STAGE_GST: 0, STAGE_LR: 1, STAGE_HR: 2}


class ConfigError(ValueError):
    """Malformed config file or invalid stage arrangement."""


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key=value`` lines with dotted prefixes; # comments allowed."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def validate_stage_order(stages: tuple[str, ...]) -> None:
    """Ordered-subset rule: gst < lr < hr, blend directly after gst or lr."""
    unknown = [s for s in stages if s not in STAGE_NAMES]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; valid: {list(STAGE_NAMES)}")
    if len(set(stages)) != len(stages):
        raise ConfigError(f"duplicate stages in {list(stages)}")
    core = [s for s in stages if s in _CORE_ORDER]
    if [_CORE_ORDER[s] for s in core] != sorted(_CORE_ORDER[s] for s in core):
        raise ConfigError(f"stages {list(stages)} violate the gst -> lr -> hr order")
    if STAGE_BLEND in stages:
        i = stages.index(STAGE_BLEND)
        if i == 0 or stages[i - 1] not in (STAGE_GST, STAGE_LR):
            raise ConfigError("blend must come directly after gst or lr")


def _get_float(mapping, key, default):
    try:
        return float(mapping.get(key, default))
    except ValueError:
        raise ConfigError(f"{key}: not a number: {mapping[key]!r}") from None


def _get_int(mapping, key, default):
    try:
        return int(mapping.get(key, default))
    except ValueError:
        raise ConfigError(f"{key}: not an integer: {mapping[key]!r}") from None


def parse_retention_mode(value: str) -> tuple[str, float]:
    """``bernoulli`` or ``budget:<fraction>`` to (mode, budget_fraction)."""
    if value == MODE_BERNOULLI:
        return MODE_BERNOULLI, 0.5
    if value == MODE_BUDGET:
        return MODE_BUDGET, 0.5
    if value.startswith(MODE_BUDGET + ":"):
        try:
            frac = float(value.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad budget fraction in {value!r}") from None
        if not 0.0 <= frac <= 1.0:
            raise ConfigError(f"budget fraction {frac} outside [0, 1]")
        return MODE_BUDGET, frac
    raise ConfigError(f"unknown retention mode {value!r}")


@dataclass
class PipelineConfig:
    input_dir: str
    output_dir: str
    real_dir: str = ""
    input_format: str = YOLO_TXT
    real_format: str = YOLO_TXT
    stages: tuple[str, ...] = ()
    seed: int = 0
    workers: int = 1
    backbone_name: str = "toy"
    captioner_name: str = "fixed-tags"
    embedder_name: str = "pooled8"
    eraser_name: str = "ring-mean"
    extractor_name: str = "pooled8"
    gst: StyleTransferConfig = field(default_factory=StyleTransferConfig)
    lr: RefineConfig = field(default_factory=RefineConfig)
    hr: FilterConfig = field(default_factory=FilterConfig)
    blend_cfg: BlendConfig = field(default_factory=BlendConfig)
    lambda_orig: float = 1.0
    lambda_tran: float = 1.0

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "PipelineConfig":
        known_prefixes = ("input.", "real.", "output.", "gst.", "lr.", "hr.",
                          "blend.", "train.")
        known_bare = {"stages", "seed", "workers", "backbone", "captioner",
                      "embedder", "eraser", "extractor"}
        for key in mapping:
            if key not in known_bare and not key.startswith(known_prefixes):
                raise ConfigError(f"unknown config key {key!r}")
        stages_raw = mapping.get("stages", "").strip()
        stages = tuple(s.strip() for s in stages_raw.split(",") if s.strip())
        validate_stage_order(stages)
        for fmt_key in ("input.format", "real.format"):
            fmt = mapping.get(fmt_key, YOLO_TXT)
            if fmt not in FORMATS:
                raise ConfigError(f"{fmt_key}: unknown format {fmt!r}")
        mode, frac = parse_retention_mode(mapping.get("hr.mode", "budget:0.5"))
        seed = _get_int(mapping, "seed", 0)
        cfg = cls(
            input_dir=mapping.get("input.dir", ""),
            output_dir=mapping.get("output.dir", ""),
            real_dir=mapping.get("real.dir", ""),
            input_format=mapping.get("input.format", YOLO_TXT),
            real_format=mapping.get("real.format", YOLO_TXT),
            stages=stages,
            seed=seed,
            workers=_get_int(mapping, "workers", 1),
            backbone_name=mapping.get("backbone", "toy"),
            captioner_name=mapping.get("captioner", "fixed-tags"),
            embedder_name=mapping.get("embedder", "pooled8"),
            eraser_name=mapping.get("eraser", "ring-mean"),
            extractor_name=mapping.get("extractor", "pooled8"),
            gst=StyleTransferConfig(
                inversion_t=_get_int(mapping, "gst.invert-t", 600),
                num_steps=_get_int(mapping, "gst.steps", 50),
                adain_eps=_get_float(mapping, "gst.adain-eps", 1e-5),
                style_pick=mapping.get("gst.style-pick", "random"),
                seed=seed,
            ),
            lr=RefineConfig(
                scale=_get_int(mapping, "lr.scale", 2),
                refine_t=_get_int(mapping, "lr.refine-t", 500),
                context_pad=_get_float(mapping, "lr.pad", 0.2),
                captioner=mapping.get("captioner", "fixed-tags"),
            ),
            hr=FilterConfig(
                lam=_get_float(mapping, "hr.lambda", 0.2),
                alpha=_get_float(mapping, "hr.alpha", 10.0),
                anchor_text=mapping.get("hr.anchor", FilterConfig().anchor_text),
                mode=mode,
                budget_fraction=frac,
                context_pad=_get_float(mapping, "hr.pad", 0.2),
                seed=seed,
            ),
            blend_cfg=BlendConfig(
                alpha=_get_float(mapping, "blend.alpha", 0.2),
                region=mapping.get("blend.region", BlendConfig().region),
            ),
            lambda_orig=_get_float(mapping, "train.lambda-orig", 1.0),
            lambda_tran=_get_float(mapping, "train.lambda-tran", 1.0),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        validate_stage_order(self.stages)
        if not self.input_dir:
            raise ConfigError("input.dir is required")
        if not self.output_dir:
            raise ConfigError("output.dir is required")
        needs_real = STAGE_GST in self.stages or STAGE_HR in self.stages
        if needs_real and not self.real_dir:
            raise ConfigError("real.dir is required when gst or hr is enabled")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.lambda_orig <= 0 or self.lambda_tran <= 0:
            raise ConfigError("train-set weights must be positive")
        try:
            self.hr.validate()
            self.blend_cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_mapping(self) -> dict[str, str]:
        """Flat snapshot echoed into the run report."""
        return {
            "input.dir": self.input_dir,
            "input.format": self.input_format,
            "real.dir": self.real_dir,
            "real.format": self.real_format,
            "output.dir": self.output_dir,
            "stages": ",".join(self.stages),
            "seed": str(self.seed),
            "workers": str(self.workers),
            "backbone": self.backbone_name,
            "captioner": self.captioner_name,
            "embedder": self.embedder_name,
            "eraser": self.eraser_name,
            "extractor": self.extractor_name,
            "gst.invert-t": str(self.gst.inversion_t),
            "gst.steps": str(self.gst.num_steps),
            "gst.adain-eps": repr(self.gst.adain_eps),
            "gst.style-pick": self.gst.style_pick,
            "lr.scale": str(self.lr.scale),
            "lr.refine-t": str(self.lr.refine_t),
            "lr.pad": repr(self.lr.context_pad),
            "hr.lambda": repr(self.hr.lam),
            "hr.alpha": repr(self.hr.alpha),
            "hr.anchor": self.hr.anchor_text,
            "hr.mode": f"{self.hr.mode}:{self.hr.budget_fraction}"
            if self.hr.mode == MODE_BUDGET else self.hr.mode,
            "hr.pad": repr(self.hr.context_pad),
            "blend.alpha": repr(self.blend_cfg.alpha),
            "blend.region": self.blend_cfg.region,
            "train.lambda-orig": repr(self.lambda_orig),
            "train.lambda-tran": repr(self.lambda_tran),
        }


def _map_images(records, fn, workers: int, serial: bool):
    """Apply fn(record) per image, optionally threaded; order preserved."""
    if workers > 1 and not serial:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, records))
    return [fn(rec) for rec in records]


def _copy_through(rec: AnnotatedImage) -> AnnotatedImage:
    out = AnnotatedImage(
        image_id=rec.image_id,
        pixels=rec.pixels.copy(),
        boxes=list(rec.boxes),
        masks=None if rec.masks is None else [m.copy() for m in rec.masks],
        domain_tag=rec.domain_tag,
    )
    return out


def run_gst_stage(manifest: DatasetManifest, real: DatasetManifest,
                  cfg: StyleTransferConfig, backbone,
                  workers: int = 1) -> tuple[DatasetManifest, StageReport]:
    report = StageReport(stage=STAGE_GST, meta={"backbone": backbone.capabilities()})
    cache = StyleLatentCache()
    pairs = [(rec, choose_style(real, rec.image_id, cfg)) for rec in manifest.records]
    # Warm the style cache serially so threaded transfers only read it.
    for _, style in pairs:
        cache.trajectory(backbone, style, cfg.inversion_t, cfg.num_steps)

    def one(pair):
        rec, style = pair
        try:
            return gst_transfer(rec, style, cfg, backbone, cache)
        except Exception as exc:
            log.warning("gst failed on %s: %s", rec.image_id, exc)
            return _copy_through(rec), {"image_id": rec.image_id, "quarantined": str(exc)}

    out_records = []
    for out_rec, record in _map_images(pairs, one, workers, backbone.serial):
        out_records.append(out_rec)
        if "quarantined" in record:
            report.quarantine(record["image_id"], record["quarantined"])
        else:
            report.add(record)
    out = DatasetManifest(name=manifest.name, records=out_records, domain_tag=manifest.domain_tag)
    out.validate()
    return out, report


def run_lr_stage(manifest: DatasetManifest, cfg: RefineConfig, backbone, captioner,
                 workers: int = 1) -> tuple[DatasetManifest, StageReport]:
    report = StageReport(stage=STAGE_LR, meta={"backbone": backbone.capabilities(),
                                               "captioner": captioner.name})

    def one(rec):
        try:
            return local_refine(rec, cfg, backbone, captioner)
        except Exception as exc:
            log.warning("lr failed on %s: %s", rec.image_id, exc)
            return _copy_through(rec), {"image_id": rec.image_id, "quarantined": str(exc)}

    out_records = []
    for out_rec, record in _map_images(manifest.records, one, workers, backbone.serial):
        out_records.append(out_rec)
        if "quarantined" in record:
            report.quarantine(record["image_id"], record["quarantined"])
        else:
            report.add(record)
    out = DatasetManifest(name=manifest.name, records=out_records, domain_tag=manifest.domain_tag)
    out.validate()
    return out, report


def run_hr_stage(manifest: DatasetManifest, real: DatasetManifest, cfg: FilterConfig,
                 embedder, eraser, workers: int = 1) -> tuple[DatasetManifest, StageReport]:
    proto = build_prototype(real, embedder, cfg)
    report = StageReport(
        stage=STAGE_HR,
        meta={
            "embedder": embedder.name,
            "eraser": eraser.name,
            "lambda": cfg.lam,
            "alpha": cfg.alpha,
            "anchor_text": cfg.anchor_text,
            "prototype_sources": proto.source_count,
            "context_pad": cfg.context_pad,
        },
    )
    scored: dict[str, list[tuple[int, float]]] = {}
    failed_scoring: dict[str, str] = {}
    for rec in manifest.records:
        try:
            scored[rec.image_id] = score_image(rec, proto, embedder, cfg.context_pad)
        except Exception as exc:
            log.warning("hr scoring failed on %s: %s", rec.image_id, exc)
            failed_scoring[rec.image_id] = str(exc)
    plan = plan_retention(scored, cfg)
    report.meta["retention_plan"] = json_clean(plan.to_dict())

    out_records = []
    for rec in manifest.records:
        if rec.image_id in failed_scoring:
            report.quarantine(rec.image_id, failed_scoring[rec.image_id])
            out_records.append(_copy_through(rec))
            continue
        drop = plan.drop_ids(rec.image_id)
        try:
            out_rec, record = erase_instances(rec, drop, eraser)
        except Exception as exc:
            log.warning("hr erase failed on %s: %s", rec.image_id, exc)
            report.quarantine(rec.image_id, str(exc))
            out_records.append(_copy_through(rec))
            continue
        record["kept"] = len(out_rec.boxes)
        report.add(record)
        out_records.append(out_rec)
    out = DatasetManifest(name=manifest.name, records=out_records, domain_tag=manifest.domain_tag)
    out.validate()
    return out, report


def run_blend_stage(original: DatasetManifest, styled: DatasetManifest,
                    cfg: BlendConfig) -> tuple[DatasetManifest, StageReport]:
    report = StageReport(stage=STAGE_BLEND,
                         meta={"alpha": cfg.alpha, "region": cfg.region})
    by_id = {rec.image_id: rec for rec in original.records}
    out_records = []
    for styled_rec in styled.records:
        orig_rec = by_id.get(styled_rec.image_id)
        if orig_rec is None:
            report.quarantine(styled_rec.image_id, "no matching original image")
            out_records.append(_copy_through(styled_rec))
            continue
        try:
            out_rec = blend(orig_rec, styled_rec, cfg)
        except Exception as exc:
            log.warning("blend failed on %s: %s", styled_rec.image_id, exc)
            report.quarantine(styled_rec.image_id, str(exc))
            out_records.append(_copy_through(styled_rec))
            continue
        report.add({"image_id": styled_rec.image_id, "alpha": cfg.alpha, "region": cfg.region})
        out_records.append(out_rec)
    out = DatasetManifest(name=styled.name, records=out_records, domain_tag=styled.domain_tag)
    out.validate()
    return out, report


def run_pipeline(cfg: PipelineConfig) -> tuple[DatasetManifest, dict[str, StageReport], int]:
    """Apply the enabled stages in order; returns final manifest, reports,
    and the number of quarantined image-stage events."""
    cfg.validate()
    out_root = Path(cfg.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "reports").mkdir(exist_ok=True)

    synthetic = load_annotations(cfg.input_dir, cfg.input_format, SYNTHETIC)
    real = None
    if cfg.real_dir:
        real = load_annotations(cfg.real_dir, cfg.real_format, REAL)

    backbone = get_backbone(cfg.backbone_name)
    current = synthetic
    original = synthetic  # blend always references the unprocessed input
    reports: dict[str, StageReport] = {}
    quarantined = 0

    for stage in cfg.stages:
        if stage == STAGE_GST:
            current, report = run_gst_stage(current, real, cfg.gst, backbone, cfg.workers)
        elif stage == STAGE_LR:
            captioner = get_captioner(cfg.captioner_name)
            current, report = run_lr_stage(current, cfg.lr, backbone, captioner, cfg.workers)
        elif stage == STAGE_HR:
            embedder = get_embedder(cfg.embedder_name)
            eraser = get_eraser(cfg.eraser_name)
            current, report = run_hr_stage(current, real, cfg.hr, embedder, eraser, cfg.workers)
        elif stage == STAGE_BLEND:
            current, report = run_blend_stage(original, current, cfg.blend_cfg)
        else:  # unreachable after validation
            raise ConfigError(f"unknown stage {stage!r}")
        quarantined += len(report.quarantined)
        reports[stage] = report
        save_annotations(current, out_root / stage, cfg.input_format)
        report.save(out_root / "reports" / f"{stage}.json")

    save_annotations(current, out_root / "final", cfg.input_format)
    run_report = StageReport(
        stage="run",
        meta={
            "config": cfg.to_mapping(),
            "backbone": backbone.capabilities(),
            "stages": list(cfg.stages),
            "quarantined_total": quarantined,
            "images": len(current.records),
        },
    )
    for rec in current.records:
        run_report.add({"image_id": rec.image_id, "boxes": len(rec.boxes)})
    run_report.save(out_root / "reports" / "run.json")
    reports["run"] = run_report
    return current, reports, quarantined


def assemble_train_set(translated: DatasetManifest, real: DatasetManifest | None,
                       lambda_orig: float = 1.0, lambda_tran: float = 1.0,
                       ) -> tuple[DatasetManifest, dict[str, str]]:
    """Merge translated synthetic data with real data, with per-record weights.

    Returns the merged manifest and a flat key-value training config naming
    each record's loss weight; detector training itself happens elsewhere.
    """
    if lambda_orig <= 0 or lambda_tran <= 0:
        raise ValueError("loss weights must be positive")
    real_records = list(real.records) if real is not None else []
    if not real_records:
        log.warning("assembling a train set with no real images")
    collisions = {r.image_id for r in translated.records} & {r.image_id for r in real_records}
    if collisions:
        raise ValueError(f"image_id collision between manifests: {sorted(collisions)}")
    merged = DatasetManifest(
        name="train",
        records=list(translated.records) + real_records,
        domain_tag=translated.domain_tag,
    )
    merged.validate()
    config: dict[str, str] = {
        "lambda.orig": repr(float(lambda_orig)),
        "lambda.tran": repr(float(lambda_tran)),
        "count.translated": str(len(translated.records)),
        "count.real": str(len(real_records)),
    }
    for rec in merged.records:
        weight = lambda_tran if rec.domain_tag == SYNTHETIC else lambda_orig
        config[f"weight.{rec.image_id}"] = repr(float(weight))
    return merged, config


def write_train_config(path, config: dict[str, str]) -> None:
    lines = [f"{k}={config[k]}" for k in sorted(config)]
    Path(path).write_text("\n".join(lines) + "\n")
