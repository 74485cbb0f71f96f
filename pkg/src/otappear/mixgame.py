"""Mix-mask generation, image mixing, the mix-and-segment critic losses and
the weighted total loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from otappear.image_io import ImageBuffer
from otappear.neural import SmallDenseNetwork


@dataclass(frozen=True)
class MixMask:
    """H x W mask in [0, 1]; 1 marks real (target) pixels."""

    values: np.ndarray
    seed: int | None = None
    patches: tuple = field(default=(), compare=False)  # (top, left, height, width)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("mask must be 2-D")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("mask values must lie in [0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def constant(cls, height: int, width: int, value: float) -> "MixMask":
        return cls(np.full((height, width), float(value)))


@dataclass(frozen=True)
class LossWeights:
    content: float = 1.0
    appearance: float = 1.0
    recon: float = 1.0
    msd: float = 1.0

    def __post_init__(self):
        for name in ("content", "appearance", "recon", "msd"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0")


def _rect_ramp(height: int, width: int, soft_edge: int) -> np.ndarray:
    """1 inside, rising linearly over ``soft_edge`` pixels from each border."""
    if soft_edge <= 0:
        return np.ones((height, width))
    r = np.arange(height)
    c = np.arange(width)
    dr = np.minimum(r, height - 1 - r)
    dc = np.minimum(c, width - 1 - c)
    d = np.minimum(dr[:, None], dc[None, :])
    return np.minimum(1.0, (d + 1.0) / (soft_edge + 1.0))


def generate_mix_mask(
    height: int,
    width: int,
    num_patches: int = 1,
    patch_fraction_range: tuple[float, float] = (0.1, 0.5),
    soft_edge: int = 0,
    seed: int = 0,
) -> MixMask:
    """Union (pointwise max) of random axis-aligned rectangles on a zero mask.

    Each rectangle's height and width are independent uniform fractions of
    the frame size drawn from ``patch_fraction_range``.
    """
    if height < 1 or width < 1:
        raise ValueError("mask dimensions must be positive")
    lo, hi = patch_fraction_range
    if not (0 < lo <= hi <= 1):
        raise ValueError("patch_fraction_range must satisfy 0 < lo <= hi <= 1")
    if num_patches < 0 or soft_edge < 0:
        raise ValueError("num_patches and soft_edge must be >= 0")
    rng = np.random.default_rng(seed)
    mask = np.zeros((height, width))
    patches = []
    for _ in range(num_patches):
        ph = max(1, int(round(rng.uniform(lo, hi) * height)))
        pw = max(1, int(round(rng.uniform(lo, hi) * width)))
        top = int(rng.integers(0, height - ph + 1))
        left = int(rng.integers(0, width - pw + 1))
        region = mask[top : top + ph, left : left + pw]
        np.maximum(region, _rect_ramp(ph, pw, soft_edge), out=region)
        patches.append((top, left, ph, pw))
    return MixMask(mask, seed, tuple(patches))


def _mask_values(mask) -> np.ndarray:
    return mask.values if isinstance(mask, MixMask) else np.asarray(mask, dtype=np.float64)


def mix_images(y_rt: ImageBuffer, x_t: ImageBuffer, mask) -> ImageBuffer:
    """(1 - M) * generated + M * target, per pixel."""
    m = _mask_values(mask)
    if y_rt.shape != x_t.shape or m.shape != y_rt.shape:
        raise ValueError(f"shape mismatch: {y_rt.shape}, {x_t.shape}, mask {m.shape}")
    m = m[:, :, None]
    return ImageBuffer((1.0 - m) * y_rt.data + m * x_t.data)


@dataclass(frozen=True)
class MSDLoss:
    real_term: float
    fake_term: float
    critic_loss: float
    generator_loss: float


def msd_loss(score_map, mask) -> MSDLoss:
    """Split a pixelwise critic score map into real (mask) and fake (1 - mask) parts.

    The critic minimizes fake - real; the generator minimizes -fake.
    """
    s = np.asarray(score_map, dtype=np.float64)
    m = _mask_values(mask)
    if s.shape != m.shape:
        raise ValueError(f"score map {s.shape} and mask {m.shape} differ")
    real = float(np.mean(m * s))
    fake = float(np.mean((1.0 - m) * s))
    return MSDLoss(real, fake, fake - real, -fake)


def toy_patch_critic(image: ImageBuffer, critic: SmallDenseNetwork, patch_size: int) -> np.ndarray:
    """Score non-overlapping patches with a dense network and broadcast to pixels.

    Images whose sides are not multiples of ``patch_size`` are edge-padded;
    the returned map is cropped back to the image size.
    """
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    if critic.input_dim != patch_size * patch_size * 3 or critic.output_dim != 1:
        raise ValueError(
            f"critic must map {patch_size * patch_size * 3} inputs to 1 score, "
            f"got {critic.input_dim} -> {critic.output_dim}"
        )
    h, w = image.shape
    ph, pw = -h % patch_size, -w % patch_size
    data = np.pad(image.data, ((0, ph), (0, pw), (0, 0)), mode="edge")
    gh, gw = data.shape[0] // patch_size, data.shape[1] // patch_size
    patches = (
        data.reshape(gh, patch_size, gw, patch_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, -1)
    )
    scores = critic(patches)[:, 0].reshape(gh, gw)
    full = np.repeat(np.repeat(scores, patch_size, axis=0), patch_size, axis=1)
    return full[:h, :w]


def total_loss(content: float, appearance: float, recon: float, msd_generator: float,
               weights: LossWeights = LossWeights()) -> float:
    return (
        weights.content * content
        + weights.appearance * appearance
        + weights.recon * recon
        + weights.msd * msd_generator
    )


def l1_loss(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean absolute pixel difference, used for the appearance and reconstruction terms."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return float(np.abs(a.data - b.data).mean())
