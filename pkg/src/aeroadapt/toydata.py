"""Desk-scale adapters and synthetic fixtures.

Everything here is deterministic and weight-free: a pooled feature
extractor and embedder, a constant-tag captioner, a ring-mean eraser, and
a generator for tiny annotated datasets.  They exist so the full pipeline
and its tests run in seconds with exactly reproducible output.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy import ndimage

from .annotations import (
    REAL,
    SYNTHETIC,
    AnnotatedImage,
    BBox,
    DatasetManifest,
    InstanceMask,
    rasterize_box_mask,
)
from .backbone import PromptCondition
from .halluc_filter import EmbeddingModel, Eraser
from .imageops import resize_area
from .local_refine import Captioner
from .metrics import FeatureExtractor
from .seeding import rng_for

__all__ = [
    "PooledFeatureExtractor",
    "PooledEmbedder",
    "FixedTagCaptioner",
    "RingMeanEraser",
    "make_toy_manifest",
    "make_toy_pair",
]

POOL_GRID = (8, 8)
POOL_DIM = POOL_GRID[0] * POOL_GRID[1] * 3


class PooledFeatureExtractor(FeatureExtractor):
    """Flattened 8x8 box-filter downsample of the frame; linear and exact."""

    name = "pooled8"
    feature_dim = POOL_DIM
    input_size = POOL_GRID

    def extract(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected HxWx3 image, got {img.shape}")
        return resize_area(img, POOL_GRID).reshape(-1)


class PooledEmbedder(EmbeddingModel):
    """Patch embedding by pooling; text embedding by hashed unit direction.

    Text hashing gives an arbitrary but fixed anchor direction, which is all
    the toy pipeline needs from a text encoder.
    """

    name = "pooled8"
    dim = POOL_DIM

    def embed(self, patch: np.ndarray) -> np.ndarray:
        img = np.asarray(patch, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected HxWx3 patch, got {img.shape}")
        return resize_area(img, POOL_GRID).reshape(-1)

    def embed_text(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)


class FixedTagCaptioner(Captioner):
    """Constant tag list regardless of patch content."""

    name = "fixed-tags"

    def __init__(self, tags=("person", "aerial view")):
        self.tags = tuple(tags)

    def extract(self, patch: np.ndarray) -> PromptCondition:
        return PromptCondition.from_tags(self.tags)


class RingMeanEraser(Eraser):
    """Fill a masked region with the mean color of a 4-pixel ring around it."""

    name = "ring-mean"
    ring_width = 4

    def erase(self, pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
        img = np.asarray(pixels, dtype=np.float64)
        m = np.asarray(mask, dtype=bool)
        if m.shape != img.shape[:2]:
            raise ValueError(f"mask {m.shape} does not match image {img.shape[:2]}")
        out = img.copy()
        if not m.any():
            return out
        ring = ndimage.binary_dilation(m, iterations=self.ring_width) & ~m
        if ring.any():
            color = img[ring].mean(axis=0)
        else:  # mask covers the whole frame; nothing to sample
            color = np.full(3, 0.5)
        out[m] = color
        return out


def _place_boxes(rng: np.random.Generator, width: int, height: int,
                 count: int) -> list[BBox]:
    """Non-degenerate person boxes with an interior margin; overlap allowed."""
    boxes = []
    for _ in range(count):
        w_px = int(rng.integers(8, 17))
        h_px = int(rng.integers(8, 17))
        x0 = int(rng.integers(2, width - w_px - 2))
        y0 = int(rng.integers(2, height - h_px - 2))
        boxes.append(
            BBox(
                class_id=0,
                cx=(x0 + w_px / 2) / width,
                cy=(y0 + h_px / 2) / height,
                w=w_px / width,
                h=h_px / height,
            )
        )
    return boxes


def _toy_image(image_id: str, rng: np.random.Generator, size: tuple[int, int],
               domain_tag: str, n_instances: int, with_masks: bool) -> AnnotatedImage:
    height, width = size
    yy, xx = np.mgrid[0:height, 0:width]
    if domain_tag == SYNTHETIC:
        # Clean render look: smooth gradient, saturated figures.
        base = np.stack(
            [
                0.25 + 0.5 * xx / width,
                0.35 + 0.3 * yy / height,
                np.full_like(xx, 0.55, dtype=np.float64),
            ],
            axis=2,
        )
        palette = np.array([[0.85, 0.15, 0.15], [0.15, 0.15, 0.85], [0.9, 0.8, 0.1]])
    else:
        # Photo look: darker, textured, muted figures.
        base = np.stack(
            [
                0.30 + 0.15 * np.sin(2 * np.pi * xx / width),
                0.32 + 0.10 * yy / height,
                0.28 + 0.05 * np.cos(2 * np.pi * yy / height),
            ],
            axis=2,
        )
        palette = np.array([[0.45, 0.35, 0.3], [0.35, 0.4, 0.45], [0.5, 0.45, 0.35]])
    pixels = base + rng.uniform(-0.03, 0.03, size=(height, width, 3))

    boxes = _place_boxes(rng, width, height, n_instances)
    image = AnnotatedImage(image_id=image_id, pixels=np.clip(pixels, 0.0, 1.0),
                           boxes=boxes, domain_tag=domain_tag)
    masks = []
    for k, box in enumerate(boxes):
        rect = rasterize_box_mask(image, k).raster
        color = palette[int(rng.integers(len(palette)))]
        image.pixels[rect] = np.clip(color + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)
        masks.append(InstanceMask(instance_id=k, raster=rect))
    if with_masks and masks:
        image.masks = masks
    image.validate()
    return image


def make_toy_manifest(name: str, count: int, seed: int, domain_tag: str = SYNTHETIC,
                      size: tuple[int, int] = (64, 64), instances=(1, 3),
                      with_masks: bool = True) -> DatasetManifest:
    """A small deterministic dataset of rectangle "people" on varied grounds."""
    lo, hi = instances
    records = []
    for i in range(count):
        image_id = f"{name}_{i:03d}"
        rng = rng_for(seed, "toy", name, image_id)
        n_inst = int(rng.integers(lo, hi + 1))
        records.append(_toy_image(image_id, rng, size, domain_tag, n_inst, with_masks))
    manifest = DatasetManifest(name=name, records=records, domain_tag=domain_tag)
    manifest.validate()
    return manifest


def make_toy_pair(n_synthetic: int = 5, n_real: int = 3, seed: int = 7,
                  size: tuple[int, int] = (64, 64)) -> tuple[DatasetManifest, DatasetManifest]:
    """Matched synthetic/real manifests for pipeline tests and demos."""
    synthetic = make_toy_manifest("syn", n_synthetic, seed, SYNTHETIC, size)
    real = make_toy_manifest("real", n_real, seed + 1, REAL, size)
    return synthetic, real
