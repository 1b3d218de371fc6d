"""Mask-restricted one-step refinement of instance patches.

Each instance is cropped with context, bicubic-upsampled, pushed through a
single reverse-diffusion update conditioned on a caption of the patch, and
merged back only where the instance mask is positive.  Everything outside
the padded crops, and every annotation, is untouched.
"""

from __future__ import annotations

import abc
import logging
from dataclasses import dataclass

import numpy as np

from .annotations import (
    AnnotatedImage,
    DegenerateBoxError,
    InstanceMask,
    crop_instance,
    masks_or_rasterized,
    paste_patch,
)
from .backbone import (
    BackboneAdapter,
    DimensionError,
    LatentTensor,
    PromptCondition,
    ScheduleError,
    UNCONDITIONAL,
)
from .imageops import area_downsample, bicubic_upsample, block_any_pool, clip_unit

log = logging.getLogger(__name__)

__all__ = [
    "RefineConfig",
    "Captioner",
    "IllConditionedTimestepError",
    "one_step_refine",
    "masked_latent_merge",
    "local_refine",
]

ALPHA_FLOOR = 1e-6
MIN_PATCH_SIDE = 16
WORKING_SIDE = 64


class IllConditionedTimestepError(ScheduleError):
    """refine_t has a signal coefficient too small to divide by."""


@dataclass
class RefineConfig:
    scale: int = 2
    refine_t: int = 500
    context_pad: float = 0.2
    captioner: str = "fixed-tags"

    def validate(self, t_max: int) -> None:
        if self.scale < 1 or int(self.scale) != self.scale:
            raise ValueError("scale must be a positive integer")
        if not 0 < self.refine_t <= t_max:
            raise ValueError(f"refine_t {self.refine_t} outside (0, {t_max}]")
        if self.context_pad < 0:
            raise ValueError("context_pad must be >= 0")


class Captioner(abc.ABC):
    """Pluggable tag-prompt extractor; must be deterministic per patch."""

    name: str = "abstract"

    @abc.abstractmethod
    def extract(self, patch: np.ndarray) -> PromptCondition:
        """Patch pixels (HxWx3, [0,1]) to a tag-style prompt."""


def one_step_refine(
    backbone: BackboneAdapter,
    z_l: LatentTensor,
    refine_t: int,
    prompt: PromptCondition = UNCONDITIONAL,
) -> LatentTensor:
    """Single reverse update all the way to a clean latent.

    z_h = (z_l - b_T eps(z_l; T, prompt)) / a_T with a_T = sqrt(abar_T).
    At abar_T = 1 this is the identity.  Output timestep is 0.
    """
    sched = backbone.schedule
    refine_t = sched.check_t(refine_t)
    a_t = sched.alpha(refine_t)
    if a_t < ALPHA_FLOOR:
        raise IllConditionedTimestepError(
            f"refine_t={refine_t} has signal coefficient {a_t:.3e} below {ALPHA_FLOOR:.0e}"
        )
    eps = backbone.predict_noise(z_l.values, refine_t, prompt)
    return LatentTensor(values=(z_l.values - sched.beta(refine_t) * eps) / a_t, timestep=0)


def masked_latent_merge(
    refined: LatentTensor,
    original: LatentTensor,
    mask: InstanceMask | np.ndarray,
    downsample_factor: int,
) -> LatentTensor:
    """Take refined values on mask-positive latent cells, original elsewhere.

    The pixel mask is reduced to the latent grid by block any-pooling, so a
    cell touching the mask at all counts as masked.
    """
    if refined.values.shape != original.values.shape:
        raise DimensionError(
            f"latent shapes differ: {refined.values.shape} vs {original.values.shape}"
        )
    if refined.timestep != original.timestep:
        raise ValueError("merge requires latents at the same timestep")
    raster = mask.raster if isinstance(mask, InstanceMask) else np.asarray(mask, dtype=bool)
    grid = block_any_pool(raster, downsample_factor)
    if grid.shape != refined.spatial:
        raise DimensionError(f"pooled mask {grid.shape} vs latent spatial {refined.spatial}")
    return LatentTensor(
        values=np.where(grid[None, :, :], refined.values, original.values),
        timestep=refined.timestep,
    )


def _pad_to_multiple(arr: np.ndarray, f: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Edge-pad bottom/right so both spatial dims divide by f."""
    h, w = arr.shape[:2]
    ph, pw = (-h) % f, (-w) % f
    if ph == 0 and pw == 0:
        return arr, (h, w)
    widths = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, widths, mode="edge"), (h, w)


def _refine_patch(
    patch: np.ndarray,
    mask_patch: np.ndarray,
    cfg: RefineConfig,
    backbone: BackboneAdapter,
    captioner: Captioner,
    record: dict,
) -> np.ndarray:
    """Upsample, one-step refine inside the mask, restore original size."""
    h, w = patch.shape[:2]
    factor = cfg.scale
    # Tiny crops get extra magnification up to a fixed working size so the
    # encoder sees more than a handful of latent cells.
    if min(h, w) < MIN_PATCH_SIDE:
        while min(h, w) * factor < WORKING_SIDE:
            factor += cfg.scale
    up = bicubic_upsample(patch, factor)
    mask_up = np.repeat(np.repeat(mask_patch, factor, axis=0), factor, axis=1)

    try:
        prompt = captioner.extract(up)
    except Exception as exc:  # captioner is third-party; degrade, don't die
        log.warning("captioner %s failed (%s); using empty prompt", captioner.name, exc)
        prompt = UNCONDITIONAL
        record["captioner_failed"] = True
    record["prompt"] = list(prompt.tags)
    record["working_scale"] = factor

    f = backbone.downsample_factor
    up_pad, _ = _pad_to_multiple(up, f)
    mask_pad, _ = _pad_to_multiple(mask_up.astype(np.float64), f)
    mask_pad = mask_pad > 0.5

    z_l = backbone.encode(clip_unit(up_pad))
    z_h = one_step_refine(backbone, z_l, cfg.refine_t, prompt)
    merged = masked_latent_merge(z_h, z_l, mask_pad, f)
    out = backbone.decode(merged)[: up.shape[0], : up.shape[1]]
    return area_downsample(out, factor)


def local_refine(
    image: AnnotatedImage,
    cfg: RefineConfig,
    backbone: BackboneAdapter,
    captioner: Captioner,
) -> tuple[AnnotatedImage, dict]:
    """Stage entry point: refine every instance of one image in place.

    Instances are processed in index order; refined patches accumulate into
    one working raster.  Pixels outside every padded crop stay bit-identical.
    """
    cfg.validate(backbone.schedule.t_max)
    record: dict = {
        "image_id": image.image_id,
        "refine_t": int(cfg.refine_t),
        "scale": int(cfg.scale),
        "context_pad": float(cfg.context_pad),
        "instances": [],
    }
    work = image.pixels.copy()
    masks = masks_or_rasterized(image) if image.boxes else []
    for k in range(len(image.boxes)):
        inst: dict = {"index": k}
        try:
            patch, region = crop_instance(
                AnnotatedImage(image.image_id, work, image.boxes, domain_tag=image.domain_tag),
                k,
                cfg.context_pad,
            )
        except DegenerateBoxError as exc:
            log.warning("%s", exc)
            inst["skipped"] = str(exc)
            record["instances"].append(inst)
            continue
        mask_patch = masks[k].raster[region.slices]
        refined = _refine_patch(patch, mask_patch, cfg, backbone, captioner, inst)
        work = paste_patch(work, clip_unit(refined), region)
        inst["region"] = [region.y0, region.x0, region.y1, region.x1]
        record["instances"].append(inst)

    out = AnnotatedImage(
        image_id=image.image_id,
        pixels=work,
        boxes=list(image.boxes),
        masks=None if image.masks is None else [m.copy() for m in image.masks],
        domain_tag=image.domain_tag,
    )
    return out, record
