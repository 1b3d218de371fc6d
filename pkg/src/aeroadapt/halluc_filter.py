"""Embedding-prototype filtering of unrealistic synthetic instances.

Real person crops define a mean embedding; blended with a text anchor it
gives a closed-form unit prototype.  Synthetic crops are cosine-scored
against the prototype, retention is sampled from a softmax over the scores,
and rejected instances are erased from pixels and annotations alike.
"""

from __future__ import annotations

import abc
import logging
from dataclasses import dataclass, field

import numpy as np

from .annotations import (
    AnnotatedImage,
    DatasetManifest,
    DegenerateBoxError,
    InstanceMask,
    crop_instance,
    masks_or_rasterized,
    round_half_up,
)
from .seeding import rng_for

log = logging.getLogger(__name__)

__all__ = [
    "EmbeddingModel",
    "Eraser",
    "Prototype",
    "RetentionPlan",
    "FilterConfig",
    "DegenerateMeanError",
    "DegeneratePrototypeError",
    "mean_real_embedding",
    "objective_value",
    "prototype",
    "cosine_scores",
    "retention_probs",
    "select_retained",
    "plan_retention",
    "erase_instances",
    "build_prototype",
]

DEFAULT_ANCHOR_TEXT = "a photo of a person taken from a drone."
DEFAULT_LAMBDA = 0.2
DEFAULT_ALPHA = 10.0
DEFAULT_BUDGET_FRACTION = 0.5
MODE_BERNOULLI = "bernoulli"
MODE_BUDGET = "budget"

_ZERO_NORM = 1e-12


class DegenerateMeanError(ValueError):
    """Real-crop embeddings summed to (numerically) zero."""


class DegeneratePrototypeError(ValueError):
    """Mean embedding and weighted anchor cancel; no prototype direction."""


class EmbeddingModel(abc.ABC):
    """Joint image-text embedding adapter."""

    name: str = "abstract"
    dim: int

    @abc.abstractmethod
    def embed(self, patch: np.ndarray) -> np.ndarray:
        """Patch pixels (HxWx3, [0,1]) to a D-vector."""

    @abc.abstractmethod
    def embed_text(self, text: str) -> np.ndarray:
        """Text to a D-vector in the same space."""


class Eraser(abc.ABC):
    """Pluggable instance remover; returns a full-size raster."""

    name: str = "abstract"

    @abc.abstractmethod
    def erase(self, pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Fill mask-positive pixels plausibly; callers keep the rest."""


@dataclass(frozen=True)
class Prototype:
    """Unit direction in embedding space that retained crops should match."""

    t_star: np.ndarray
    lam: float
    anchor_text: str
    source_count: int

    def validate(self) -> None:
        norm = float(np.linalg.norm(self.t_star))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"prototype norm {norm} is not 1")


@dataclass
class FilterConfig:
    lam: float = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    anchor_text: str = DEFAULT_ANCHOR_TEXT
    mode: str = MODE_BUDGET
    budget_fraction: float = DEFAULT_BUDGET_FRACTION
    context_pad: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.mode not in (MODE_BERNOULLI, MODE_BUDGET):
            raise ValueError(f"unknown retention mode {self.mode!r}")
        if not 0.0 <= self.budget_fraction <= 1.0:
            raise ValueError("budget_fraction must lie in [0, 1]")
        if self.context_pad < 0:
            raise ValueError("context_pad must be >= 0")


def mean_real_embedding(embeddings) -> np.ndarray:
    """Normalized mean of real-crop embeddings; order-independent."""
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("need at least one embedding vector")
    mean = arr.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < _ZERO_NORM:
        raise DegenerateMeanError("mean embedding is numerically zero")
    return mean / norm


def objective_value(v: np.ndarray, u_bar: np.ndarray, t_anchor: np.ndarray, lam: float) -> float:
    """Anchor-regularized alignment of a unit vector v."""
    return float(v @ u_bar + lam * (v @ t_anchor))


def prototype(u_bar: np.ndarray, t_anchor: np.ndarray, lam: float,
              anchor_text: str = DEFAULT_ANCHOR_TEXT, source_count: int = 0) -> Prototype:
    """Closed-form maximizer of the objective over the unit sphere.

    The objective is linear in v, so the maximizer is the normalized weight
    vector u_bar + lam * t_anchor.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    w = np.asarray(u_bar, dtype=np.float64) + lam * np.asarray(t_anchor, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if norm < _ZERO_NORM:
        raise DegeneratePrototypeError("u_bar + lambda * anchor is numerically zero")
    proto = Prototype(t_star=w / norm, lam=float(lam), anchor_text=anchor_text,
                      source_count=int(source_count))
    proto.validate()
    return proto


def cosine_scores(embeddings, proto: Prototype) -> np.ndarray:
    """Cosine similarity of each raw embedding with the prototype.

    Norms are divided out explicitly; adapters need not pre-normalize.
    """
    arr = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms < _ZERO_NORM):
        raise ValueError("zero-norm embedding cannot be cosine-scored")
    t_norm = float(np.linalg.norm(proto.t_star))
    return (arr @ proto.t_star) / (norms * t_norm)


def retention_probs(scores, alpha: float) -> np.ndarray:
    """Softmax over scores with sharpness alpha, max-subtracted for stability."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("scores must be a non-empty 1-D array")
    logits = alpha * s
    ex = np.exp(logits - logits.max())
    return ex / ex.sum()


def select_retained(probs, mode: str, rng: np.random.Generator,
                    n_keep: int | None = None) -> np.ndarray:
    """Keep decisions from retention probabilities.

    bernoulli: independent coin per instance with its own p_k.
    budget:    n_keep distinct instances drawn without replacement with
               probability proportional to p_k; n_keep above K clamps to K.
    """
    p = np.asarray(probs, dtype=np.float64)
    k = p.size
    if mode == MODE_BERNOULLI:
        return rng.random(k) < p
    if mode != MODE_BUDGET:
        raise ValueError(f"unknown retention mode {mode!r}")
    if n_keep is None:
        raise ValueError("budget mode needs n_keep")
    if n_keep > k:
        log.warning("budget %d exceeds instance count %d; clamped", n_keep, k)
        n_keep = k
    keep = np.zeros(k, dtype=bool)
    if n_keep > 0:
        chosen = rng.choice(k, size=n_keep, replace=False, p=p / p.sum())
        keep[chosen] = True
    return keep


@dataclass
class RetentionPlan:
    """Per-instance scores, probabilities, and keep decisions for an image set."""

    alpha: float
    mode: str
    seed: int
    entries: list[dict] = field(default_factory=list)

    def for_image(self, image_id: str) -> list[dict]:
        return [e for e in self.entries if e["image_id"] == image_id]

    def drop_ids(self, image_id: str) -> list[int]:
        return [e["instance_id"] for e in self.for_image(image_id) if not e["keep"]]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "mode": self.mode,
            "seed": self.seed,
            "entries": sorted(self.entries, key=lambda e: (e["image_id"], e["instance_id"])),
        }


def plan_retention(scored: dict[str, list[tuple[int, float]]], cfg: FilterConfig) -> RetentionPlan:
    """Softmax probabilities and seeded keep decisions, per image.

    ``scored`` maps image_id to (instance_id, score) pairs.  Each image gets
    its own derived random stream, so results do not depend on batch order
    or on which other images are present.
    """
    cfg.validate()
    plan = RetentionPlan(alpha=float(cfg.alpha), mode=cfg.mode, seed=int(cfg.seed))
    for image_id in sorted(scored):
        pairs = scored[image_id]
        if not pairs:
            continue
        ids = [int(i) for i, _ in pairs]
        scores = np.array([s for _, s in pairs], dtype=np.float64)
        probs = retention_probs(scores, cfg.alpha)
        rng = rng_for(cfg.seed, "retain", image_id)
        n_keep = round_half_up(cfg.budget_fraction * len(ids)) if cfg.mode == MODE_BUDGET else None
        keep = select_retained(probs, cfg.mode, rng, n_keep)
        for j, inst_id in enumerate(ids):
            plan.entries.append(
                {
                    "image_id": image_id,
                    "instance_id": inst_id,
                    "score": float(scores[j]),
                    "prob": float(probs[j]),
                    "keep": bool(keep[j]),
                }
            )
    return plan


def embed_instances(image: AnnotatedImage, embedder: EmbeddingModel,
                    context_pad: float) -> list[tuple[int, np.ndarray]]:
    """Embedding per instance crop; sub-pixel boxes are skipped with a warning."""
    out = []
    for k in range(len(image.boxes)):
        try:
            patch, _ = crop_instance(image, k, context_pad)
        except DegenerateBoxError as exc:
            log.warning("%s", exc)
            continue
        out.append((k, np.asarray(embedder.embed(patch), dtype=np.float64)))
    return out


def build_prototype(real_manifest: DatasetManifest, embedder: EmbeddingModel,
                    cfg: FilterConfig) -> Prototype:
    """Prototype from every instance crop of the real reference set."""
    embeddings = []
    for rec in real_manifest.records:
        embeddings.extend(vec for _, vec in embed_instances(rec, embedder, cfg.context_pad))
    if not embeddings:
        raise ValueError(f"no usable instance crops in manifest {real_manifest.name!r}")
    u_bar = mean_real_embedding(embeddings)
    t_anchor = np.asarray(embedder.embed_text(cfg.anchor_text), dtype=np.float64)
    return prototype(u_bar, t_anchor, cfg.lam, cfg.anchor_text, len(embeddings))


def score_image(image: AnnotatedImage, proto: Prototype, embedder: EmbeddingModel,
                context_pad: float) -> list[tuple[int, float]]:
    """(instance_id, cosine score) for every croppable instance of one image."""
    pairs = embed_instances(image, embedder, context_pad)
    if not pairs:
        return []
    scores = cosine_scores([vec for _, vec in pairs], proto)
    return [(k, float(s)) for (k, _), s in zip(pairs, scores)]


def erase_instances(image: AnnotatedImage, drop_ids, eraser: Eraser) -> tuple[AnnotatedImage, dict]:
    """Remove the listed instances from pixels and annotations.

    Erasure regions are the dropped masks minus every kept mask, so pixels
    of retained instances are never repainted.  An eraser failure keeps the
    instance and logs it rather than failing the image.
    """
    drop_ids = sorted(set(int(i) for i in drop_ids))
    n = len(image.boxes)
    bad = [i for i in drop_ids if not 0 <= i < n]
    if bad:
        raise ValueError(f"{image.image_id}: drop ids {bad} out of range 0..{n - 1}")
    record: dict = {"image_id": image.image_id, "dropped": [], "failed": []}
    masks = masks_or_rasterized(image)
    kept_union = np.zeros(image.pixels.shape[:2], dtype=bool)
    for k in range(n):
        if k not in drop_ids:
            kept_union |= masks[k].raster
    pixels = image.pixels.copy()
    actually_dropped = []
    for k in drop_ids:
        region = masks[k].raster & ~kept_union
        try:
            filled = eraser.erase(pixels, region)
        except Exception as exc:  # plugin code; degrade to keeping the instance
            log.warning("%s: eraser %s failed on instance %d (%s); kept",
                        image.image_id, eraser.name, k, exc)
            record["failed"].append(k)
            continue
        pixels = np.where(region[:, :, None], filled, pixels)
        actually_dropped.append(k)
    record["dropped"] = actually_dropped

    keep_ids = [k for k in range(n) if k not in actually_dropped]
    new_masks = None
    if image.masks is not None:
        new_masks = [
            InstanceMask(instance_id=j, raster=image.masks[k].raster.copy())
            for j, k in enumerate(keep_ids)
        ]
    out = AnnotatedImage(
        image_id=image.image_id,
        pixels=pixels,
        boxes=[image.boxes[k] for k in keep_ids],
        masks=new_masks,
        domain_tag=image.domain_tag,
    )
    return out, record
