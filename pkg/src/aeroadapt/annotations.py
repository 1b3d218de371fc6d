"""Annotated-image data model: normalized boxes, instance masks, crops.

Pixel values are kept as floats in [0, 1] everywhere inside the pipeline;
8-bit quantization happens only when files are read or written.  All
box-to-pixel conversions use round-half-up so results are identical across
platforms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SYNTHETIC = "synthetic"
REAL = "real"

MIN_IMAGE_SIDE = 32


class AnnotationError(ValueError):
    """An annotation violates the data-model invariants."""


class DegenerateBoxError(ValueError):
    """A box collapsed below one pixel after denormalization; callers skip it."""


def round_half_up(x):
    """Round to the nearest integer with .5 always going up."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized center/extent form."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def validate(self, overflow_tol: float = 0.0) -> None:
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise AnnotationError(f"box center outside unit square: {self}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise AnnotationError(f"box extents outside (0, 1]: {self}")
        x0, y0, x1, y1 = self.corners()
        overhang = max(-x0, -y0, x1 - 1.0, y1 - 1.0, 0.0)
        if overhang > overflow_tol:
            raise AnnotationError(
                f"box extends {overhang:.6f} beyond the unit square (tol {overflow_tol}): {self}"
            )

    def corners(self) -> tuple[float, float, float, float]:
        """Normalized (x0, y0, x1, y1)."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def clamped(self) -> "BBox":
        """Shrink the box so it lies inside the unit square."""
        x0, y0, x1, y1 = self.corners()
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, 1.0), min(y1, 1.0)
        if x1 <= x0 or y1 <= y0:
            raise AnnotationError(f"box lies entirely outside the unit square: {self}")
        return BBox(self.class_id, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def extent_px(self, width: int, height: int) -> tuple[int, int]:
        """Pixel width/height via round-half-up on the denormalized extents."""
        return round_half_up(self.w * width), round_half_up(self.h * height)

    def rect_px(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Pixel rectangle (x0, y0, x1, y1), half-open, unclipped.

        The origin is rounded half-up and the extent is added afterwards, so
        the rectangle always spans exactly ``extent_px`` pixels.
        """
        w_px, h_px = self.extent_px(width, height)
        x0 = round_half_up((self.cx - self.w / 2) * width)
        y0 = round_half_up((self.cy - self.h / 2) * height)
        return x0, y0, x0 + w_px, y0 + h_px


@dataclass
class InstanceMask:
    """Binary per-instance mask at image resolution."""

    instance_id: int
    raster: np.ndarray

    def validate(self, image_shape: tuple[int, int]) -> None:
        if self.raster.shape != tuple(image_shape):
            raise AnnotationError(
                f"mask {self.instance_id}: shape {self.raster.shape} != image {image_shape}"
            )
        if not self.raster.any():
            raise AnnotationError(f"mask {self.instance_id} has no positive pixels")

    def copy(self) -> "InstanceMask":
        return InstanceMask(self.instance_id, self.raster.copy())


@dataclass
class AnnotatedImage:
    """An image raster together with its box (and optional mask) annotations."""

    image_id: str
    pixels: np.ndarray
    boxes: list[BBox] = field(default_factory=list)
    masks: list[InstanceMask] | None = None
    domain_tag: str = SYNTHETIC

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def validate(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise AnnotationError(f"{self.image_id}: pixels must be HxWx3")
        if self.height < MIN_IMAGE_SIDE or self.width < MIN_IMAGE_SIDE:
            raise AnnotationError(
                f"{self.image_id}: image {self.height}x{self.width} below minimum side {MIN_IMAGE_SIDE}"
            )
        if not np.isfinite(self.pixels).all():
            raise AnnotationError(f"{self.image_id}: non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise AnnotationError(f"{self.image_id}: pixel values outside [0, 1]")
        for box in self.boxes:
            box.validate()
        if self.masks is not None:
            if len(self.masks) != len(self.boxes):
                raise AnnotationError(
                    f"{self.image_id}: {len(self.masks)} masks for {len(self.boxes)} boxes"
                )
            for mask in self.masks:
                mask.validate((self.height, self.width))
        if self.domain_tag not in (SYNTHETIC, REAL):
            raise AnnotationError(f"{self.image_id}: unknown domain tag {self.domain_tag!r}")

    def copy_annotations_from(self, other: "AnnotatedImage") -> None:
        self.boxes = list(other.boxes)
        self.masks = None if other.masks is None else [m.copy() for m in other.masks]


@dataclass
class DatasetManifest:
    """A named collection of annotated images from one domain."""

    name: str
    records: list[AnnotatedImage] = field(default_factory=list)
    domain_tag: str = SYNTHETIC

    def validate(self) -> None:
        seen = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise AnnotationError(f"duplicate image_id {rec.image_id!r} in manifest {self.name!r}")
            seen.add(rec.image_id)
            rec.validate()

    def image_ids(self) -> list[str]:
        return [rec.image_id for rec in self.records]

    def get(self, image_id: str) -> AnnotatedImage:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)


@dataclass(frozen=True)
class CropRegion:
    """Half-open pixel rectangle recorded by ``crop_instance`` for paste-back."""

    y0: int
    x0: int
    y1: int
    x1: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.y1 - self.y0, self.x1 - self.x0


def crop_instance(
    image: AnnotatedImage, index: int, context_pad: float = 0.0
) -> tuple[np.ndarray, CropRegion]:
    """Cut a square, context-padded patch around one instance.

    The nominal side is ``max(w_px, h_px) * (1 + context_pad)``, centered on
    the box center and clipped to the image bounds (clipping truncates, it
    does not shift).  Returns the patch pixels and the region needed to paste
    a processed patch back.
    """
    if index < 0 or index >= len(image.boxes):
        raise IndexError(f"instance index {index} out of range")
    if context_pad < 0:
        raise ValueError("context_pad must be >= 0")
    box = image.boxes[index]
    w_px, h_px = box.extent_px(image.width, image.height)
    if w_px < 1 or h_px < 1:
        raise DegenerateBoxError(
            f"{image.image_id}[{index}]: box {box.w:.6f}x{box.h:.6f} is sub-pixel"
        )
    side = round_half_up(max(w_px, h_px) * (1.0 + context_pad))
    x0 = round_half_up(box.cx * image.width - side / 2)
    y0 = round_half_up(box.cy * image.height - side / 2)
    region = CropRegion(
        y0=max(y0, 0),
        x0=max(x0, 0),
        y1=min(y0 + side, image.height),
        x1=min(x0 + side, image.width),
    )
    if region.y1 <= region.y0 or region.x1 <= region.x0:
        raise DegenerateBoxError(f"{image.image_id}[{index}]: crop degenerates after clipping")
    return image.pixels[region.slices].copy(), region


def paste_patch(pixels: np.ndarray, patch: np.ndarray, region: CropRegion) -> np.ndarray:
    """Return a copy of ``pixels`` with ``patch`` written back at ``region``."""
    if patch.shape[:2] != region.shape:
        raise ValueError(f"patch shape {patch.shape[:2]} != region {region.shape}")
    out = pixels.copy()
    out[region.slices] = patch
    return out


def rasterize_box_mask(image: AnnotatedImage, index: int) -> InstanceMask:
    """Filled-rectangle mask of one box, used when true masks are absent.

    Sub-pixel extents are floored at one pixel so the mask is never empty.
    """
    if index < 0 or index >= len(image.boxes):
        raise IndexError(f"instance index {index} out of range")
    box = image.boxes[index]
    x0, y0, x1, y1 = box.rect_px(image.width, image.height)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(max(x1, x0 + 1), image.width), min(max(y1, y0 + 1), image.height)
    raster = np.zeros((image.height, image.width), dtype=bool)
    raster[y0:y1, x0:x1] = True
    return InstanceMask(instance_id=index, raster=raster)


def masks_or_rasterized(image: AnnotatedImage) -> list[InstanceMask]:
    """The image's own masks, or rectangle masks rasterized from its boxes."""
    if image.masks is not None:
        return image.masks
    return [rasterize_box_mask(image, k) for k in range(len(image.boxes))]
