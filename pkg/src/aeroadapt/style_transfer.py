"""Global style transfer in latent space, annotation-preserving.

One synthetic image is pulled toward one real reference: both are DDIM-
inverted to a shared timestep, then each reverse step first aligns the
content latent to the style latent with cross-attention, re-normalizes the
result's per-channel statistics to the style's (image-wise AdaIN), and only
then takes the denoising update.  Geometry is untouched, so boxes and masks
pass through unchanged.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .annotations import REAL, SYNTHETIC, AnnotatedImage, DatasetManifest
from .backbone import (
    UNCONDITIONAL,
    AttentionProjections,
    BackboneAdapter,
    LatentTensor,
    StepAlignmentError,
    Trajectory,
    ddim_invert,
    ddim_step,
    timestep_grid,
)
from .imageops import clip_unit
from .seeding import rng_for

__all__ = [
    "StyleTransferConfig",
    "cross_attention_align",
    "adain",
    "gst_reverse_step",
    "gst_transfer",
    "choose_style",
    "StyleLatentCache",
]

STYLE_PICK_RANDOM = "random"


@dataclass
class StyleTransferConfig:
    inversion_t: int = 600
    num_steps: int = 50
    adain_eps: float = 1e-5
    style_pick: str = STYLE_PICK_RANDOM  # "random" or a fixed style image_id
    seed: int = 0

    def validate(self, t_max: int) -> None:
        if not 0 <= self.inversion_t <= t_max:
            raise ValueError(f"inversion_t {self.inversion_t} outside [0, {t_max}]")
        if self.inversion_t > 0 and self.num_steps < 1:
            raise ValueError("num_steps must be >= 1 when inversion_t > 0")
        if self.adain_eps < 0:
            raise ValueError("adain_eps must be >= 0")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def _to_tokens(values: np.ndarray) -> np.ndarray:
    """C x H x W latent to an (H*W) x C token matrix."""
    c = values.shape[0]
    return values.reshape(c, -1).T


def cross_attention_align(
    z_s: LatentTensor, z_t: LatentTensor, proj: AttentionProjections
) -> LatentTensor:
    """Rewrite each content token as an attention-weighted mix of style values.

    Spatial positions are the tokens and channels are the feature dimension;
    queries come from the content stream, keys and values from the style
    stream.  Spatial sizes may differ; channel counts must match.
    """
    if z_s.channels != z_t.channels:
        raise ValueError(f"channel mismatch: content {z_s.channels}, style {z_t.channels}")
    proj.validate(channels=z_s.channels)
    tokens_s = _to_tokens(z_s.values)
    tokens_t = _to_tokens(z_t.values)
    q = tokens_s @ proj.w_q.T
    k = tokens_t @ proj.w_k.T
    v = tokens_t @ proj.w_v.T
    attn = _softmax_rows((q @ k.T) * proj.scale)
    out_tokens = attn @ v
    return LatentTensor(
        values=out_tokens.T.reshape(z_s.values.shape), timestep=z_s.timestep
    )


def attention_matrix(
    z_s: LatentTensor, z_t: LatentTensor, proj: AttentionProjections
) -> np.ndarray:
    """The row-stochastic attention weights themselves, for inspection."""
    proj.validate(channels=z_s.channels)
    q = _to_tokens(z_s.values) @ proj.w_q.T
    k = _to_tokens(z_t.values) @ proj.w_k.T
    return _softmax_rows((q @ k.T) * proj.scale)


def adain(content: LatentTensor, style: LatentTensor, eps: float) -> LatentTensor:
    """Image-wise adaptive instance normalization over latent channels.

    Per channel, statistics are taken over all spatial positions (population
    std).  Output means equal style means exactly; with eps = 0 output stds
    equal style stds.  Channels with zero content variance become the
    constant style mean.
    """
    if content.channels != style.channels:
        raise ValueError(f"channel mismatch: content {content.channels}, style {style.channels}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    c = content.channels
    cvals = content.values.reshape(c, -1)
    svals = style.values.reshape(c, -1)
    mu_c = cvals.mean(axis=1, keepdims=True)
    mu_s = svals.mean(axis=1, keepdims=True)
    sd_c = cvals.std(axis=1, keepdims=True)
    sd_s = svals.std(axis=1, keepdims=True)
    denom = sd_c + eps
    gain = np.divide(sd_s, denom, out=np.zeros_like(denom), where=denom > 0)
    out = (cvals - mu_c) * gain + mu_s
    return LatentTensor(values=out.reshape(content.values.shape), timestep=content.timestep)


def gst_reverse_step(
    backbone: BackboneAdapter,
    z_s_t: LatentTensor,
    z_t_t: LatentTensor,
    t: int,
    t_prev: int,
    proj: AttentionProjections,
    eps: float,
) -> LatentTensor:
    """Fuse (attention then AdaIN) at timestep t, then denoise to t_prev."""
    if z_s_t.timestep != t:
        raise StepAlignmentError(f"content latent at t={z_s_t.timestep}, expected {t}")
    if z_t_t.timestep != t:
        raise StepAlignmentError(f"style latent at t={z_t_t.timestep}, expected {t}")
    fused = adain(cross_attention_align(z_s_t, z_t_t, proj), z_t_t, eps)
    return ddim_step(backbone, fused, t, t_prev, UNCONDITIONAL)


def choose_style(
    real_manifest: DatasetManifest, content_id: str, cfg: StyleTransferConfig
) -> AnnotatedImage:
    """One style reference per content image: uniform seeded draw, or fixed id."""
    if not real_manifest.records:
        raise ValueError("style manifest is empty")
    if cfg.style_pick != STYLE_PICK_RANDOM:
        return real_manifest.get(cfg.style_pick)
    rng = rng_for(cfg.seed, "style-pick", content_id)
    idx = int(rng.integers(len(real_manifest.records)))
    return real_manifest.records[idx]


class StyleLatentCache:
    """Inversion trajectories of style images, keyed by pixel-content hash.

    The real reference set is tiny, so precomputing once per (style image,
    inversion depth) amortizes across the whole synthetic batch.
    """

    def __init__(self) -> None:
        self._store: dict[tuple, Trajectory] = {}

    @staticmethod
    def _pixel_key(image: AnnotatedImage) -> str:
        return hashlib.sha256(
            np.ascontiguousarray(image.pixels, dtype=np.float64).tobytes()
        ).hexdigest()

    def trajectory(
        self,
        backbone: BackboneAdapter,
        style: AnnotatedImage,
        inversion_t: int,
        num_steps: int,
    ) -> Trajectory:
        key = (self._pixel_key(style), inversion_t, num_steps, backbone.name)
        if key not in self._store:
            z0 = backbone.encode(style.pixels)
            self._store[key] = ddim_invert(
                backbone, z0, inversion_t, UNCONDITIONAL, num_steps
            )
        return self._store[key]


def gst_transfer(
    content: AnnotatedImage,
    style: AnnotatedImage,
    cfg: StyleTransferConfig,
    backbone: BackboneAdapter,
    cache: StyleLatentCache | None = None,
) -> tuple[AnnotatedImage, dict]:
    """Stage entry point: restyle one synthetic image toward one real reference.

    Returns the restyled image, whose boxes and masks are the content's
    unchanged, plus an audit record.
    """
    if content.domain_tag != SYNTHETIC:
        raise ValueError(f"{content.image_id}: content must be synthetic")
    if style.domain_tag != REAL:
        raise ValueError(f"{style.image_id}: style reference must be real")
    cfg.validate(backbone.schedule.t_max)
    backbone.check_divisible(content.height, content.width)
    backbone.check_divisible(style.height, style.width)

    if cache is None:
        cache = StyleLatentCache()
    content_traj = ddim_invert(
        backbone, backbone.encode(content.pixels), cfg.inversion_t, UNCONDITIONAL, cfg.num_steps
    )
    style_traj = cache.trajectory(backbone, style, cfg.inversion_t, cfg.num_steps)

    proj = backbone.attention_projections()
    z = content_traj.final
    if cfg.inversion_t > 0:
        grid = timestep_grid(cfg.inversion_t, cfg.num_steps)
        for i in range(len(grid) - 1, 0, -1):
            t, t_prev = int(grid[i]), int(grid[i - 1])
            z = gst_reverse_step(
                backbone, z, style_traj.at(t), t, t_prev, proj, cfg.adain_eps
            )
    pixels = clip_unit(backbone.decode(z))

    out = AnnotatedImage(
        image_id=content.image_id,
        pixels=pixels,
        boxes=list(content.boxes),
        masks=None if content.masks is None else [m.copy() for m in content.masks],
        domain_tag=content.domain_tag,
    )
    record = {
        "image_id": content.image_id,
        "style_id": style.image_id,
        "seed": int(cfg.seed),
        "inversion_t": int(cfg.inversion_t),
        "num_steps": int(cfg.num_steps),
        "adain_eps": float(cfg.adain_eps),
    }
    return out, record
