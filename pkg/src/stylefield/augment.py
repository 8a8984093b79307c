"""Spatial augmentation shared by images and hidden feature maps.

One AugmentSpec defines a single warp in normalized coordinates, so the same
spec applied to a 64x64 image and a 16x16 hidden map moves content to the
same relative location. Sampling is bilinear with zero fill outside.

For an output location q in [-1, 1]^2 the source location is

    p = R(-angle) @ (q * crop / rescale) + offset

i.e. rotate about the center, then crop a window of the given fraction at
the offset, then rescale content. The sampler draws angles in [-30, 30]
degrees, crop fractions in [0.7, 1.0], and rescale factors in [0.8, 1.25];
the warp itself accepts any finite parameters (tests exercise 90-degree
rotations).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from stylefield.errors import ValidationError
from stylefield.seeding import generator
from stylefield.stylegen.generator import HiddenFeatureMap

ROTATION_RANGE = math.radians(30.0)
CROP_RANGE = (0.7, 1.0)
RESCALE_RANGE = (0.8, 1.25)


@dataclass(frozen=True)
class AugmentSpec:
    rotation: float = 0.0  # radians
    crop: float = 1.0  # window fraction of the frame
    offset: tuple[float, float] = (0.0, 0.0)  # window center, normalized
    rescale: float = 1.0

    def __post_init__(self):
        for name, v in (("rotation", self.rotation), ("crop", self.crop), ("rescale", self.rescale)):
            if not math.isfinite(v):
                raise ValidationError(f"{name} must be finite")
        if self.crop <= 0 or self.rescale <= 0:
            raise ValidationError("crop and rescale must be positive")

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation == 0.0
            and self.crop == 1.0
            and self.rescale == 1.0
            and self.offset == (0.0, 0.0)
        )


def sample_augment(seed: int, index: int = 0) -> AugmentSpec:
    """Draw a spec from the declared parameter ranges."""
    gen = generator(seed, "augment", index)
    u = torch.rand(5, generator=gen).tolist()
    crop = CROP_RANGE[0] + (CROP_RANGE[1] - CROP_RANGE[0]) * u[1]
    max_off = 1.0 - crop
    return AugmentSpec(
        rotation=(2.0 * u[0] - 1.0) * ROTATION_RANGE,
        crop=crop,
        offset=((2.0 * u[2] - 1.0) * max_off, (2.0 * u[3] - 1.0) * max_off),
        rescale=RESCALE_RANGE[0] + (RESCALE_RANGE[1] - RESCALE_RANGE[0]) * u[4],
    )


def _warp_tensor(t: torch.Tensor, spec: AugmentSpec) -> torch.Tensor:
    c, h, w = t.shape
    ys = torch.linspace(-1.0, 1.0, h, dtype=t.dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=t.dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    scale = spec.crop / spec.rescale
    cos_a, sin_a = math.cos(-spec.rotation), math.sin(-spec.rotation)
    px = (cos_a * gx - sin_a * gy) * scale + spec.offset[0]
    py = (sin_a * gx + cos_a * gy) * scale + spec.offset[1]
    grid = torch.stack([px, py], dim=-1)[None]
    return F.grid_sample(
        t[None], grid, mode="bilinear", padding_mode="zeros", align_corners=True
    )[0]


def augment(t, spec: AugmentSpec):
    """Warp an image tensor (3, H, W) or a HiddenFeatureMap; same kind out."""
    if isinstance(t, HiddenFeatureMap):
        return HiddenFeatureMap(tensor=_warp_tensor(t.tensor, spec), stage=t.stage)
    if isinstance(t, torch.Tensor) and t.ndim == 3:
        return _warp_tensor(t, spec)
    raise ValidationError("augment expects a (C, H, W) tensor or a HiddenFeatureMap")
