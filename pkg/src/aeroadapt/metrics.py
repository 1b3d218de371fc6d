"""Translation and detection quality measures.

Fréchet distance between Gaussian feature summaries, computed image-wise
(whole frames) or patch-wise (person crops), and single-class mean average
precision over IoU thresholds 0.50 to 0.95.
"""

from __future__ import annotations

import abc
import logging
from dataclasses import dataclass, field

import numpy as np

from .annotations import (
    AnnotatedImage,
    BBox,
    DatasetManifest,
    DegenerateBoxError,
    crop_instance,
)
from .imageops import resize_area

log = logging.getLogger(__name__)

__all__ = [
    "FeatureExtractor",
    "GaussianStats",
    "Detection",
    "MapResult",
    "FidResult",
    "gaussian_stats",
    "frechet_distance",
    "image_fid",
    "patch_fid",
    "box_iou",
    "map_eval",
    "MAP_THRESHOLDS",
]

MAP_THRESHOLDS = tuple(np.linspace(0.5, 0.95, 10))
PATCH_CONTEXT_PAD = 0.2


class FeatureExtractor(abc.ABC):
    """Image to fixed-length feature vector; must be deterministic."""

    name: str = "abstract"
    feature_dim: int
    input_size: tuple[int, int]

    @abc.abstractmethod
    def extract(self, image: np.ndarray) -> np.ndarray:
        """HxWx3 pixels in [0,1] to an F-vector."""


@dataclass
class GaussianStats:
    """First two moments of a feature set."""

    mu: np.ndarray
    sigma: np.ndarray

    def validate(self) -> None:
        f = self.mu.shape[0]
        if self.sigma.shape != (f, f):
            raise ValueError(f"sigma shape {self.sigma.shape} does not match mu dim {f}")
        if not np.allclose(self.sigma, self.sigma.T):
            raise ValueError("sigma is not symmetric")
        if np.linalg.eigvalsh(self.sigma).min() < -1e-8:
            raise ValueError("sigma has eigenvalues below the numerical floor")


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance, covariance symmetrized."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("features must be a 2-D array of row vectors")
    n = arr.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples for covariance, got {n}")
    mu = arr.mean(axis=0)
    centered = arr - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    return GaussianStats(mu=mu, sigma=sigma)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Fréchet distance between two Gaussian summaries.

    |mu_a - mu_b|^2 + Tr(Sigma_a + Sigma_b - 2 (Sigma_a Sigma_b)^{1/2}).
    The matrix square root comes from the eigen-decomposition of the
    symmetrized product with negative eigenvalues clamped to zero, which
    makes the result real, exactly symmetric in (a, b), and non-negative
    after the final floor.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    prod = a.sigma @ b.sigma
    sym = (prod + prod.T) / 2.0
    eigvals = np.linalg.eigvalsh(sym)
    sqrt_trace = np.sqrt(np.clip(eigvals, 0.0, None)).sum()
    dist = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * sqrt_trace
    return float(max(dist, 0.0))


@dataclass
class FidResult:
    value: float
    count_a: int
    count_b: int


def _frame_features(manifest: DatasetManifest, extractor: FeatureExtractor) -> np.ndarray:
    records = sorted(manifest.records, key=lambda r: r.image_id)
    return np.stack([extractor.extract(rec.pixels) for rec in records])


def image_fid(set_a: DatasetManifest, set_b: DatasetManifest,
              extractor: FeatureExtractor) -> FidResult:
    """Fréchet distance over whole-frame features."""
    fa, fb = _frame_features(set_a, extractor), _frame_features(set_b, extractor)
    value = frechet_distance(gaussian_stats(fa), gaussian_stats(fb))
    return FidResult(value=value, count_a=len(fa), count_b=len(fb))


def _patch_features(manifest: DatasetManifest, extractor: FeatureExtractor,
                    context_pad: float) -> np.ndarray:
    feats = []
    for rec in sorted(manifest.records, key=lambda r: r.image_id):
        for k in range(len(rec.boxes)):
            try:
                patch, _ = crop_instance(rec, k, context_pad)
            except DegenerateBoxError as exc:
                log.warning("%s", exc)
                continue
            feats.append(extractor.extract(resize_area(patch, extractor.input_size)))
    if not feats:
        raise ValueError(f"no instance patches in manifest {manifest.name!r}")
    return np.stack(feats)


def patch_fid(set_a: DatasetManifest, set_b: DatasetManifest, extractor: FeatureExtractor,
              context_pad: float = PATCH_CONTEXT_PAD) -> FidResult:
    """Fréchet distance over per-instance crop features.

    Crops use the same context padding as the refinement stage and are
    resized to the extractor's declared input size before extraction.
    """
    fa = _patch_features(set_a, extractor, context_pad)
    fb = _patch_features(set_b, extractor, context_pad)
    value = frechet_distance(gaussian_stats(fa), gaussian_stats(fb))
    return FidResult(value=value, count_a=len(fa), count_b=len(fb))


# ------------------------------------------------------------------- mAP


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BBox
    score: float

    def validate(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union on normalized boxes.

    IoU is a ratio of areas, so it is unchanged by the (anisotropic)
    scaling from normalized to pixel coordinates.
    """
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


@dataclass
class MapResult:
    map50: float
    map50_95: float
    per_threshold: list[float] = field(default_factory=list)
    evaluated_images: int = 0
    excluded_empty_gt: int = 0


def _average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from ordered true/false-positive flags."""
    if n_gt == 0:
        raise ValueError("AP undefined with zero ground-truth boxes")
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def map_eval(detections: list[Detection], ground_truth: dict[str, list[BBox]],
             thresholds=MAP_THRESHOLDS) -> MapResult:
    """Single-class mean average precision.

    Images with no ground-truth boxes are excluded from averaging (their
    detections are discarded and the exclusion is counted).  Matching is
    greedy in descending score; each ground-truth box matches at most one
    detection, the one with the best IoU above the threshold.  Ties in
    score break deterministically by image id, then input order.
    """
    for det in detections:
        det.validate()
    empty_ids = {iid for iid, boxes in ground_truth.items() if not boxes}
    if empty_ids:
        log.info("excluding %d images with empty ground truth", len(empty_ids))
    eval_gt = {iid: boxes for iid, boxes in ground_truth.items() if boxes}
    if not eval_gt:
        raise ValueError("no images with non-empty ground truth to evaluate")
    kept = [
        (det, i) for i, det in enumerate(detections)
        if det.image_id not in empty_ids
    ]
    unknown = {det.image_id for det, _ in kept} - set(eval_gt)
    if unknown:
        raise ValueError(f"detections reference unknown images: {sorted(unknown)}")
    kept.sort(key=lambda pair: (-pair[0].score, pair[0].image_id, pair[1]))
    n_gt = sum(len(boxes) for boxes in eval_gt.values())

    ious: list[list[float]] = [
        [box_iou(det.box, gt) for gt in eval_gt[det.image_id]] for det, _ in kept
    ]
    per_threshold = []
    for tau in thresholds:
        matched: dict[str, set[int]] = {iid: set() for iid in eval_gt}
        tp = np.zeros(len(kept), dtype=bool)
        for row, (det, _) in enumerate(kept):
            best_iou, best_j = 0.0, -1
            taken = matched[det.image_id]
            for j, iou in enumerate(ious[row]):
                if j in taken or iou < tau:
                    continue
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0:
                taken.add(best_j)
                tp[row] = True
        per_threshold.append(_average_precision(tp, n_gt))

    return MapResult(
        map50=per_threshold[0],
        map50_95=float(np.mean(per_threshold)),
        per_threshold=per_threshold,
        evaluated_images=len(eval_gt),
        excluded_empty_gt=len(empty_ids),
    )


def ground_truth_from_manifest(manifest: DatasetManifest) -> dict[str, list[BBox]]:
    return {rec.image_id: list(rec.boxes) for rec in manifest.records}
