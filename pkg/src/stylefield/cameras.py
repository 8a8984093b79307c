"""Camera poses on an origin-centered orbit and the shared pinhole ray model.

Both the procedural rasterizer and the radiance field cast rays with
`pixel_rays`, so ground-truth frames and field renders line up exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from stylefield.errors import ValidationError

_EPS = 1e-12


def pose_transform(theta: float, phi: float, radius: float) -> np.ndarray:
    """4x4 world-from-camera matrix for an orbit camera looking at the origin.

    theta is azimuth in (-pi, pi], phi elevation in [-pi/2, pi/2]. Camera
    x is right, y is up, and the view direction is -z.
    """
    pos = radius * np.array(
        [math.cos(phi) * math.sin(theta), math.sin(phi), math.cos(phi) * math.cos(theta)]
    )
    forward = -pos / np.linalg.norm(pos)
    up = np.array([0.0, 1.0, 0.0])
    if abs(float(forward @ up)) > 1.0 - 1e-9:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, forward)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = true_up
    m[:3, 2] = -forward
    m[:3, 3] = pos
    return m


@dataclass(frozen=True)
class CameraPose:
    theta: float
    phi: float
    radius: float
    transform: np.ndarray = field(default=None, compare=False)  # type: ignore[assignment]

    def __post_init__(self):
        if not (-math.pi < self.theta <= math.pi + _EPS):
            raise ValidationError(f"theta {self.theta!r} outside (-pi, pi]")
        if not (-math.pi / 2 - _EPS <= self.phi <= math.pi / 2 + _EPS):
            raise ValidationError(f"phi {self.phi!r} outside [-pi/2, pi/2]")
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValidationError(f"radius {self.radius!r} must be a positive finite number")
        if self.transform is None:
            object.__setattr__(self, "transform", pose_transform(self.theta, self.phi, self.radius))
        else:
            object.__setattr__(self, "transform", np.asarray(self.transform, dtype=np.float64))
            self.validate()

    def validate(self, tol: float = 1e-6) -> None:
        """Re-derive the transform and check the rigid-motion invariants."""
        m = self.transform
        if m.shape != (4, 4):
            raise ValidationError(f"transform shape {m.shape} != (4, 4)")
        rot = m[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > tol:
            raise ValidationError("rotation block is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > tol:
            raise ValidationError("rotation determinant is not +1")
        rebuilt = pose_transform(self.theta, self.phi, self.radius)
        if np.abs(rebuilt - m).max() > tol:
            raise ValidationError("stored transform does not match (theta, phi, radius)")


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.focal > 0 and math.isfinite(self.focal)):
            raise ValidationError("focal must be positive and finite")


def pixel_rays(pose: CameraPose, intrinsics: Intrinsics, height: int, width: int):
    """Per-pixel world-space ray origins and unit directions, row-major.

    Rays pass through pixel centers; image y points down, camera y up.
    Returns (origins (H*W,3), directions (H*W,3)) as float64 arrays.
    """
    j, i = np.meshgrid(np.arange(width), np.arange(height))
    x = (j + 0.5 - intrinsics.cx) / intrinsics.focal
    y = -(i + 0.5 - intrinsics.cy) / intrinsics.focal
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
    rot = pose.transform[:3, :3]
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.transform[:3, 3], dirs.shape).copy()
    return origins, dirs


def pose_grid(
    theta_count: int,
    phi_count: int,
    theta_range: tuple[float, float] = (-math.pi, math.pi),
    phi_range: tuple[float, float] = (0.0, 0.0),
    radius: float = 1.3,
) -> list[CameraPose]:
    """Regular (theta, phi) grid; a full-circle theta span omits the endpoint
    so poses stay unique."""
    if theta_count < 1 or phi_count < 1:
        raise ValidationError("pose grid must be non-empty")
    t0, t1 = theta_range
    full_circle = abs((t1 - t0) - 2 * math.pi) < 1e-9
    if theta_count == 1:
        thetas = np.array([0.5 * (t0 + t1)])
    else:
        thetas = np.linspace(t0, t1, theta_count, endpoint=not full_circle)
    if phi_count == 1:
        phis = np.array([0.5 * (phi_range[0] + phi_range[1])])
    else:
        phis = np.linspace(phi_range[0], phi_range[1], phi_count)
    poses = []
    for p in phis:
        for t in thetas:
            # canonicalize theta into (-pi, pi]
            tw = math.remainder(float(t), 2 * math.pi)
            if tw <= -math.pi:
                tw += 2 * math.pi
            poses.append(CameraPose(tw, float(p), radius))
    return poses
