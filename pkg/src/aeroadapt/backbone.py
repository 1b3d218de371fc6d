"""Latent-diffusion backbone contract, noise schedule, and DDIM updates.

The package never trains anything: a backbone is an adapter exposing
encode/decode, a noise predictor, attention projections, and a schedule.
The bundled toy backbone is linear and seedless so every stage result can
be checked exactly at desk scale.

Schedule convention: ``alpha_bar[t]`` is the cumulative signal retention of
the forward corruption q(x_t | x_0) = N(sqrt(abar_t) x_0, (1 - abar_t) I),
with alpha_bar[0] = 1.  The signal/noise coefficients used by every update
are a_t = sqrt(abar_t) and b_t = sqrt(1 - abar_t), so a_t^2 + b_t^2 = 1.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np

from .imageops import area_downsample

DEFAULT_T_MAX = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


class ScheduleError(ValueError):
    """Timestep outside the schedule or an invalid schedule."""


class DimensionError(ValueError):
    """Array shapes incompatible with the backbone's declared geometry."""


class NumericError(ArithmeticError):
    """A diffusion update produced non-finite values."""


class StepAlignmentError(KeyError):
    """A trajectory was queried at a timestep it does not contain."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients abar_t for t = 0 .. T_max."""

    alpha_bar: np.ndarray

    @classmethod
    def linear(
        cls,
        t_max: int = DEFAULT_T_MAX,
        beta_start: float = DEFAULT_BETA_START,
        beta_end: float = DEFAULT_BETA_END,
    ) -> "NoiseSchedule":
        """Linear-in-variance schedule; abar is the cumulative product of 1 - beta."""
        betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
        alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
        sched = cls(alpha_bar=alpha_bar)
        sched.validate()
        return sched

    @property
    def t_max(self) -> int:
        return len(self.alpha_bar) - 1

    def validate(self) -> None:
        ab = self.alpha_bar
        if ab.ndim != 1 or len(ab) < 2:
            raise ScheduleError("alpha_bar must be a 1-D array with at least two entries")
        if ab[0] != 1.0:
            raise ScheduleError(f"alpha_bar[0] must be 1, got {ab[0]}")
        if np.any(np.diff(ab) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0 or np.any(ab > 1.0):
            raise ScheduleError("alpha_bar values must lie in (0, 1]")

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.t_max:
            raise ScheduleError(f"timestep {t} outside [0, {self.t_max}]")
        return t

    def alpha(self, t: int) -> float:
        """Signal coefficient sqrt(abar_t)."""
        return float(np.sqrt(self.alpha_bar[self.check_t(t)]))

    def beta(self, t: int) -> float:
        """Noise coefficient sqrt(1 - abar_t)."""
        return float(np.sqrt(1.0 - self.alpha_bar[self.check_t(t)]))


@dataclass
class LatentTensor:
    """Backbone latent: channels x height x width values at one timestep."""

    values: np.ndarray
    timestep: int = 0

    def validate(self) -> None:
        if self.values.ndim != 3:
            raise DimensionError(f"latent must be CxHxW, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise NumericError(f"non-finite latent at t={self.timestep}")
        if self.timestep < 0:
            raise ScheduleError(f"negative timestep {self.timestep}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def copy(self) -> "LatentTensor":
        return LatentTensor(self.values.copy(), self.timestep)


@dataclass(frozen=True)
class PromptCondition:
    """Tag-style text condition; an empty tag list means unconditional."""

    tags: tuple[str, ...] = ()

    @classmethod
    def from_tags(cls, tags) -> "PromptCondition":
        return cls(tuple(str(t) for t in tags))

    @property
    def is_unconditional(self) -> bool:
        return len(self.tags) == 0

    def text(self) -> str:
        return ", ".join(self.tags)


UNCONDITIONAL = PromptCondition()


@dataclass(frozen=True)
class AttentionProjections:
    """Square query/key/value maps over latent channels, with 1/sqrt(d) scale."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def validate(self, channels: int | None = None) -> None:
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)):
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise DimensionError(f"{name} must be square, got {w.shape}")
            if w.shape != self.w_q.shape:
                raise DimensionError("projection matrices must share one size")
            if not np.isfinite(w).all():
                raise NumericError(f"non-finite entries in {name}")
        if channels is not None and self.w_q.shape[0] != channels:
            raise DimensionError(
                f"projections are {self.w_q.shape[0]}-dim, latent has {channels} channels"
            )

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.dim)

    @classmethod
    def identity(cls, dim: int) -> "AttentionProjections":
        eye = np.eye(dim)
        return cls(w_q=eye, w_k=eye.copy(), w_v=eye.copy())


class BackboneAdapter(abc.ABC):
    """Contract every diffusion backbone (toy or real) must satisfy."""

    name: str = "abstract"
    downsample_factor: int
    latent_channels: int
    schedule: NoiseSchedule
    serial: bool = False

    @abc.abstractmethod
    def encode(self, pixels: np.ndarray) -> LatentTensor:
        """Image (HxWx3, [0,1]) to a clean latent at t=0."""

    @abc.abstractmethod
    def decode(self, latent: LatentTensor) -> np.ndarray:
        """Latent back to an HxWx3 image; output range is the adapter's business."""

    @abc.abstractmethod
    def predict_noise(self, values: np.ndarray, t: int, condition: PromptCondition) -> np.ndarray:
        """Noise estimate for a latent value array at timestep t."""

    def attention_projections(self) -> AttentionProjections:
        return AttentionProjections.identity(self.latent_channels)

    def check_divisible(self, height: int, width: int) -> None:
        f = self.downsample_factor
        if height % f or width % f:
            raise DimensionError(f"image {height}x{width} not divisible by backbone factor {f}")

    def capabilities(self) -> dict:
        """Capability record serialized into run reports."""
        return {
            "name": self.name,
            "downsample_factor": int(self.downsample_factor),
            "latent_channels": int(self.latent_channels),
            "t_max": int(self.schedule.t_max),
            "serial": bool(self.serial),
        }


# Fixed 4x3 channel mix: RGB passthrough plus a luminance-like fourth channel.
# Full column rank, so the decoder's pseudo-inverse is an exact left inverse.
TOY_CHANNEL_MIX = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    ]
)


class ToyBackbone(BackboneAdapter):
    """Deterministic linear backbone for exact desk-scale testing.

    encode: 4x4 average pooling followed by the fixed channel mix above.
    decode: pseudo-inverse of the mix, then nearest-neighbor 4x upsampling.
    decode(encode(x)) equals the 4x4-blockwise mean of x, not x itself.
    Decode output is NOT clipped; stage wrappers clip pixels at file
    boundaries so linearity stays testable here.

    Noise predictor modes:
      "null"      always zero; every reverse step is a pure rescale.
      "constant"  a fixed field set via set_constant_noise.
      "oracle"    (z - a_t z0) / b_t with a stored clean latent z0; this is
                  the exact inversion of the forward corruption, used to
                  verify recovery claims.  Returns zeros where b_t = 0.
    """

    name = "toy"
    downsample_factor = 4
    latent_channels = 4
    serial = False

    def __init__(self, predictor: str = "null", schedule: NoiseSchedule | None = None):
        if predictor not in ("null", "constant", "oracle"):
            raise ValueError(f"unknown predictor mode {predictor!r}")
        self.predictor = predictor
        self.schedule = schedule if schedule is not None else NoiseSchedule.linear()
        self._mix = TOY_CHANNEL_MIX
        self._unmix = np.linalg.pinv(TOY_CHANNEL_MIX)
        self._oracle_z0: np.ndarray | None = None
        self._constant: np.ndarray | None = None

    def set_oracle_latent(self, values: np.ndarray) -> None:
        self._oracle_z0 = np.asarray(values, dtype=np.float64).copy()

    def set_constant_noise(self, values: np.ndarray) -> None:
        self._constant = np.asarray(values, dtype=np.float64).copy()

    def encode(self, pixels: np.ndarray) -> LatentTensor:
        img = np.asarray(pixels, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DimensionError(f"expected HxWx3 image, got {img.shape}")
        self.check_divisible(img.shape[0], img.shape[1])
        pooled = area_downsample(img, self.downsample_factor)
        z = np.einsum("ck,hwk->chw", self._mix, pooled)
        latent = LatentTensor(values=z, timestep=0)
        latent.validate()
        return latent

    def decode(self, latent: LatentTensor) -> np.ndarray:
        latent.validate()
        if latent.channels != self.latent_channels:
            raise DimensionError(
                f"latent has {latent.channels} channels, backbone declares {self.latent_channels}"
            )
        pooled = np.einsum("kc,chw->hwk", self._unmix, latent.values)
        f = self.downsample_factor
        return np.repeat(np.repeat(pooled, f, axis=0), f, axis=1)

    def predict_noise(self, values: np.ndarray, t: int, condition: PromptCondition) -> np.ndarray:
        t = self.schedule.check_t(t)
        if self.predictor == "null":
            return np.zeros_like(values)
        if self.predictor == "constant":
            if self._constant is None:
                raise ValueError("constant predictor selected but no noise field set")
            if self._constant.shape != values.shape:
                raise DimensionError(
                    f"constant noise {self._constant.shape} vs latent {values.shape}"
                )
            return self._constant.copy()
        if self._oracle_z0 is None:
            raise ValueError("oracle predictor selected but no clean latent stored")
        if self._oracle_z0.shape != values.shape:
            raise DimensionError(f"oracle latent {self._oracle_z0.shape} vs input {values.shape}")
        a_t, b_t = self.schedule.alpha(t), self.schedule.beta(t)
        if b_t == 0.0:
            return np.zeros_like(values)
        return (values - a_t * self._oracle_z0) / b_t


@dataclass
class Trajectory:
    """DDIM latents stored by timestep for step-aligned reuse."""

    latents: list[LatentTensor] = field(default_factory=list)

    def append(self, latent: LatentTensor) -> None:
        self.latents.append(latent)

    @property
    def timesteps(self) -> list[int]:
        return [lat.timestep for lat in self.latents]

    @property
    def final(self) -> LatentTensor:
        return self.latents[-1]

    @property
    def initial(self) -> LatentTensor:
        return self.latents[0]

    def at(self, t: int) -> LatentTensor:
        for lat in self.latents:
            if lat.timestep == t:
                return lat
        raise StepAlignmentError(f"trajectory has no latent at t={t}; stored {self.timesteps}")


def timestep_grid(target_t: int, num_steps: int) -> np.ndarray:
    """Ascending integer timesteps 0 = t_0 < ... < t_num_steps = target_t."""
    if num_steps < 0:
        raise ValueError("num_steps must be >= 0")
    if num_steps == 0 or target_t == 0:
        if target_t != 0 and num_steps == 0:
            raise ValueError("num_steps = 0 only reaches target_t = 0")
        return np.array([0], dtype=np.int64)
    if num_steps > target_t:
        raise ScheduleError(f"{num_steps} steps cannot be strictly increasing up to t={target_t}")
    grid = np.floor(np.linspace(0.0, float(target_t), num_steps + 1) + 0.5).astype(np.int64)
    if np.any(np.diff(grid) <= 0):
        raise ScheduleError(f"degenerate timestep grid for target_t={target_t}, steps={num_steps}")
    return grid


def ddim_step(
    backbone: BackboneAdapter,
    latent: LatentTensor,
    t: int,
    t_prev: int,
    condition: PromptCondition = UNCONDITIONAL,
) -> LatentTensor:
    """One deterministic reverse update from t down to t_prev.

    eps = predict(z_t, t); z0_hat = (z_t - b_t eps) / a_t;
    z_prev = a_prev z0_hat + b_prev eps.  t_prev = t returns an exact copy.
    """
    sched = backbone.schedule
    t, t_prev = sched.check_t(t), sched.check_t(t_prev)
    if latent.timestep != t:
        raise StepAlignmentError(f"latent is at t={latent.timestep}, step expects t={t}")
    if t_prev > t:
        raise ScheduleError(f"reverse step requires t_prev <= t, got {t_prev} > {t}")
    if t_prev == t:
        return latent.copy()
    eps = backbone.predict_noise(latent.values, t, condition)
    a_t, b_t = sched.alpha(t), sched.beta(t)
    z0_hat = (latent.values - b_t * eps) / a_t
    out = LatentTensor(
        values=sched.alpha(t_prev) * z0_hat + sched.beta(t_prev) * eps,
        timestep=t_prev,
    )
    if not np.isfinite(out.values).all():
        raise NumericError(f"non-finite latent after reverse step {t} -> {t_prev}")
    return out


def ddim_invert(
    backbone: BackboneAdapter,
    latent0: LatentTensor,
    target_t: int,
    condition: PromptCondition = UNCONDITIONAL,
    num_steps: int = 50,
) -> Trajectory:
    """Run the deterministic update upward from a clean latent to target_t.

    Each ascending hop t_prev -> t evaluates the predictor at the current
    (lower-t) latent, the standard inversion approximation; it is exact for
    predictors that do not depend on z.  The whole trajectory is returned so
    later stages can reuse style latents at matching timesteps.
    """
    if latent0.timestep != 0:
        raise StepAlignmentError(f"inversion starts from t=0, got t={latent0.timestep}")
    target_t = backbone.schedule.check_t(target_t)
    traj = Trajectory()
    traj.append(latent0.copy())
    if target_t == 0:
        return traj
    grid = timestep_grid(target_t, num_steps)
    sched = backbone.schedule
    current = latent0.values
    for i in range(len(grid) - 1):
        t_prev, t = int(grid[i]), int(grid[i + 1])
        eps = backbone.predict_noise(current, t_prev, condition)
        a_prev, b_prev = sched.alpha(t_prev), sched.beta(t_prev)
        z0_hat = (current - b_prev * eps) / a_prev
        current = sched.alpha(t) * z0_hat + sched.beta(t) * eps
        if not np.isfinite(current).all():
            raise NumericError(f"non-finite latent during inversion step {t_prev} -> {t}")
        traj.append(LatentTensor(values=current.copy(), timestep=t))
    return traj
