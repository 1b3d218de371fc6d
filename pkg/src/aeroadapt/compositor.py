"""Alpha-blend an original render with its restyled version.

Sweeping the weight trades off how much of the transferred appearance the
training image keeps; background-only mode leaves instance interiors at
their original pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import AnnotatedImage, masks_or_rasterized

__all__ = ["BlendConfig", "blend", "REGION_FULL", "REGION_BACKGROUND"]

REGION_FULL = "full"
REGION_BACKGROUND = "background-only"


@dataclass
class BlendConfig:
    alpha: float = 0.2
    region: str = REGION_BACKGROUND

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if self.region not in (REGION_FULL, REGION_BACKGROUND):
            raise ValueError(f"unknown region {self.region!r}")


def _same_annotations(a: AnnotatedImage, b: AnnotatedImage) -> bool:
    if a.boxes != b.boxes:
        return False
    if (a.masks is None) != (b.masks is None):
        return False
    if a.masks is not None:
        if len(a.masks) != len(b.masks):
            return False
        for ma, mb in zip(a.masks, b.masks):
            if ma.instance_id != mb.instance_id or not np.array_equal(ma.raster, mb.raster):
                return False
    return True


def blend(original: AnnotatedImage, styled: AnnotatedImage, cfg: BlendConfig) -> AnnotatedImage:
    """Per-pixel convex combination at weight alpha on the selected region.

    alpha = 0 returns the original pixels bitwise and alpha = 1 (full
    region) the styled pixels bitwise; annotations pass through unchanged.
    """
    cfg.validate()
    if original.pixels.shape != styled.pixels.shape:
        raise ValueError(
            f"shape mismatch: {original.pixels.shape} vs {styled.pixels.shape}"
        )
    if not _same_annotations(original, styled):
        raise ValueError(f"{original.image_id}: annotation mismatch between blend inputs")

    if cfg.alpha == 0.0:
        pixels = original.pixels.copy()
    elif cfg.alpha == 1.0 and cfg.region == REGION_FULL:
        pixels = styled.pixels.copy()
    else:
        pixels = cfg.alpha * styled.pixels + (1.0 - cfg.alpha) * original.pixels
        if cfg.region == REGION_BACKGROUND and original.boxes:
            interior = np.zeros(original.pixels.shape[:2], dtype=bool)
            for mask in masks_or_rasterized(original):
                interior |= mask.raster
            pixels = np.where(interior[:, :, None], original.pixels, pixels)

    out = AnnotatedImage(
        image_id=original.image_id,
        pixels=pixels,
        boxes=list(original.boxes),
        masks=None if original.masks is None else [m.copy() for m in original.masks],
        domain_tag=original.domain_tag,
    )
    return out
