"""Procedural multi-view datasets: a superquadric-family solid with scalar
appearance attributes, rendered by a deterministic CPU ray-marcher with
Lambertian shading, plus the canonical on-disk dataset layout.

Directory layout (bit-exact):
    scene/meta.json   {"resolution":[H,W],"focal":f,"principal":[cx,cy],
                       "seed":s,"attributes":{...},"background":[r,g,b]}
    scene/poses.json  [{"index":i,"theta":t,"phi":p,"radius":r,
                        "transform":[16 floats row-major]}, ...]
    scene/frames/%05d.png, scene/masks/%05d.png
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from stylefield.cameras import CameraPose, Intrinsics, pixel_rays, pose_grid
from stylefield.errors import DatasetFormatError, DatasetIntegrityError, ValidationError

ATTRIBUTE_NAMES = ("elongation", "bump", "hue", "stripe")

# Object geometry: fits inside a radius-0.24 ball so the scene box
# [-0.5, 0.5]^3 keeps a wide empty margin around it.
_BASE_RADIUS = 0.16
_SHAPE_EXPONENT = 2.0 / 0.8
_BUMP_SCALE = 0.15
_MARCH_STEPS = 96
_BISECT_ITERS = 20


@dataclass(frozen=True)
class SceneSpec:
    """Object recipe, lighting, background, and the pose grid."""

    resolution: tuple[int, int] = (64, 64)
    focal: float | None = None  # pixels; defaults to 1.5 * width
    theta_count: int = 12
    phi_count: int = 3
    theta_range: tuple[float, float] = (-math.pi, math.pi)
    phi_range: tuple[float, float] = (-0.25, 0.25)
    radius: float = 1.3
    attributes: dict = dc_field(
        default_factory=lambda: {"elongation": 0.5, "bump": 0.4, "hue": 0.6, "stripe": 0.5}
    )
    light_dir: tuple[float, float, float] = (0.45, 0.7, 0.55)
    background: tuple[float, float, float] = (0.08, 0.09, 0.11)

    def __post_init__(self):
        h, w = self.resolution
        if h < 16 or w < 16:
            raise ValidationError(f"resolution {self.resolution} below 16x16")
        if self.theta_count < 1 or self.phi_count < 1:
            raise ValidationError("pose grid is empty")
        for name in ATTRIBUTE_NAMES:
            if name not in self.attributes:
                raise ValidationError(f"missing attribute {name!r}")
            v = float(self.attributes[name])
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"attribute {name}={v} outside [0, 1]")

    @property
    def intrinsics(self) -> Intrinsics:
        h, w = self.resolution
        f = self.focal if self.focal is not None else 1.5 * w
        return Intrinsics(focal=float(f), cx=w / 2.0, cy=h / 2.0)

    def poses(self) -> list[CameraPose]:
        return pose_grid(
            self.theta_count, self.phi_count, self.theta_range, self.phi_range, self.radius
        )


@dataclass
class FrameRecord:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], on the 8-bit lattice
    mask: np.ndarray  # (H, W) bool
    pose: CameraPose
    attributes: dict


@dataclass
class SceneDataset:
    frames: list[FrameRecord]
    intrinsics: Intrinsics
    resolution: tuple[int, int]
    seed: int
    attributes: dict
    background: tuple[float, float, float]

    def validate(self) -> None:
        h, w = self.resolution
        seen = []
        for i, fr in enumerate(self.frames):
            if fr.image.shape != (h, w, 3):
                raise DatasetIntegrityError(
                    f"frame {i}: image shape {fr.image.shape} != {(h, w, 3)}", frame=i
                )
            if fr.mask.shape != (h, w):
                raise DatasetIntegrityError(f"frame {i}: mask shape mismatch", frame=i)
            frac = float(fr.mask.mean())
            if not (0.0 < frac < 1.0):
                raise DatasetIntegrityError(
                    f"frame {i}: mask foreground fraction {frac} not in (0, 1)", frame=i
                )
            fr.pose.validate()
            for t, p in seen:
                if abs(t - fr.pose.theta) < 1e-9 and abs(p - fr.pose.phi) < 1e-9:
                    raise ValidationError(f"duplicate pose (theta, phi) at frame {i}")
            seen.append((fr.pose.theta, fr.pose.phi))

    def __len__(self) -> int:
        return len(self.frames)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _object_axes(attrs: dict) -> np.ndarray:
    elong = float(attrs["elongation"])
    return np.array([_BASE_RADIUS, _BASE_RADIUS * (0.6 + 0.7 * elong), _BASE_RADIUS])


def object_field(points: np.ndarray, attrs: dict) -> np.ndarray:
    """Implicit surface function; negative inside the solid."""
    axes = _object_axes(attrs)
    q = _SHAPE_EXPONENT
    scaled = np.abs(points / axes)
    rho = (scaled**q).sum(axis=-1) ** (1.0 / q)
    r = np.linalg.norm(points, axis=-1)
    az = np.arctan2(points[..., 0], points[..., 2])
    el = np.arcsin(np.clip(points[..., 1] / np.maximum(r, 1e-12), -1.0, 1.0))
    bump = 1.0 + _BUMP_SCALE * float(attrs["bump"]) * np.cos(3.0 * az) * np.cos(2.0 * el)
    return rho - bump


def _albedo(points: np.ndarray, attrs: dict) -> np.ndarray:
    base = _hsv_to_rgb(0.9 * float(attrs["hue"]), 0.65, 0.85)
    phase = 2.0 * math.pi * float(attrs["stripe"])
    stripes = 0.8 + 0.2 * np.cos(2.0 * math.pi * points[..., 1] / 0.12 + phase)
    return base[None, :] * stripes[:, None]


def render_frame(spec: SceneSpec, pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Ray-march one view; returns (image float32 on the 8-bit lattice, mask)."""
    h, w = spec.resolution
    origins, dirs = pixel_rays(pose, spec.intrinsics, h, w)
    near, far = spec.radius - 0.3, spec.radius + 0.3
    attrs = spec.attributes

    n = origins.shape[0]
    t_lo = np.full(n, near)
    f_lo = object_field(origins + dirs * t_lo[:, None], attrs)
    hit = np.zeros(n, dtype=bool)
    t_hit_lo = np.zeros(n)
    t_hit_hi = np.zeros(n)
    f_hit_lo = np.zeros(n)
    step = (far - near) / _MARCH_STEPS
    for k in range(1, _MARCH_STEPS + 1):
        t_hi = np.full(n, near + k * step)
        f_hi = object_field(origins + dirs * t_hi[:, None], attrs)
        crossed = (~hit) & (f_lo > 0) & (f_hi <= 0)
        t_hit_lo[crossed] = t_lo[crossed]
        t_hit_hi[crossed] = t_hi[crossed]
        f_hit_lo[crossed] = f_lo[crossed]
        hit |= crossed
        t_lo, f_lo = t_hi, f_hi

    image = np.tile(np.asarray(spec.background, dtype=np.float64), (n, 1))
    if hit.any():
        o, d = origins[hit], dirs[hit]
        lo, hi = t_hit_lo[hit], t_hit_hi[hit]
        flo = f_hit_lo[hit]
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            fm = object_field(o + d * mid[:, None], attrs)
            go_lo = fm > 0
            lo = np.where(go_lo, mid, lo)
            flo = np.where(go_lo, fm, flo)
            hi = np.where(go_lo, hi, mid)
        p = o + d * (0.5 * (lo + hi))[:, None]

        eps = 5e-4
        grad = np.stack(
            [
                object_field(p + np.eye(3)[i] * eps, attrs)
                - object_field(p - np.eye(3)[i] * eps, attrs)
                for i in range(3)
            ],
            axis=-1,
        )
        normal = grad / np.maximum(np.linalg.norm(grad, axis=-1, keepdims=True), 1e-12)
        light = np.asarray(spec.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lambert = np.maximum(normal @ light, 0.0)
        shaded = _albedo(p, attrs) * (0.25 + 0.75 * lambert)[:, None]
        image[hit] = np.clip(shaded, 0.0, 1.0)

    # land on the 8-bit lattice so a save/load round trip is lossless
    image_u8 = np.round(image * 255.0).astype(np.uint8)
    image = (image_u8.astype(np.float32) / 255.0).reshape(h, w, 3)
    return image, hit.reshape(h, w)


def synth_scene(spec: SceneSpec, seed: int) -> SceneDataset:
    """Render the full pose grid. Pure function of (spec, seed)."""
    poses = spec.poses()
    if not poses:
        raise ValidationError("pose grid is empty")
    frames = []
    for pose in poses:
        image, mask = render_frame(spec, pose)
        frames.append(FrameRecord(image=image, mask=mask, pose=pose, attributes=dict(spec.attributes)))
    ds = SceneDataset(
        frames=frames,
        intrinsics=spec.intrinsics,
        resolution=spec.resolution,
        seed=int(seed),
        attributes=dict(spec.attributes),
        background=tuple(spec.background),
    )
    ds.validate()
    return ds


def quantized_background(background) -> np.ndarray:
    """Background color as stored in rendered frames (8-bit lattice)."""
    return np.round(np.asarray(background, dtype=np.float64) * 255.0).astype(np.float32) / 255.0


def synth_collection(
    base: SceneSpec,
    n_variants: int,
    poses_per_variant: int,
    seed: int,
    theta_max: float,
    phi_max: float,
) -> SceneDataset:
    """Attribute-varied multi-object collection inside a pose cone.

    Each variant draws its own attribute vector and its own poses (uniform in
    the cone), so appearance and viewpoint entangle in anything trained on
    the result. Frames carry per-variant attribute labels; the dataset-level
    attributes stay those of the base recipe.
    """
    if n_variants < 1 or poses_per_variant < 1:
        raise ValidationError("collection needs at least one variant and pose")
    rng = np.random.default_rng(seed ^ 0x5EED)
    frames: list[FrameRecord] = []
    used: list[tuple[float, float]] = []
    for vi in range(n_variants):
        attrs = {name: float(rng.uniform(0.0, 1.0)) for name in ATTRIBUTE_NAMES}
        spec = SceneSpec(
            resolution=base.resolution,
            focal=base.focal,
            theta_count=1,
            phi_count=1,
            radius=base.radius,
            attributes=attrs,
            light_dir=base.light_dir,
            background=base.background,
        )
        for _ in range(poses_per_variant):
            while True:
                theta = float(rng.uniform(-theta_max, theta_max))
                phi = float(rng.uniform(-phi_max, phi_max))
                if all(abs(theta - t) > 1e-6 or abs(phi - p) > 1e-6 for t, p in used):
                    break
            used.append((theta, phi))
            pose = CameraPose(theta, phi, base.radius)
            image, mask = render_frame(spec, pose)
            frames.append(FrameRecord(image=image, mask=mask, pose=pose, attributes=attrs))
    ds = SceneDataset(
        frames=frames,
        intrinsics=base.intrinsics,
        resolution=base.resolution,
        seed=int(seed),
        attributes=dict(base.attributes),
        background=tuple(base.background),
    )
    ds.validate()
    return ds


def save_dataset(ds: SceneDataset, path) -> None:
    root = Path(path)
    h, w = ds.resolution
    for fr in ds.frames:
        if fr.image.shape != (h, w, 3):
            raise DatasetIntegrityError("resolution mismatch across frames")
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    meta = {
        "resolution": [h, w],
        "focal": ds.intrinsics.focal,
        "principal": [ds.intrinsics.cx, ds.intrinsics.cy],
        "seed": ds.seed,
        "attributes": ds.attributes,
        "background": list(ds.background),
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    poses = [
        {
            "index": i,
            "theta": fr.pose.theta,
            "phi": fr.pose.phi,
            "radius": fr.pose.radius,
            "transform": [float(v) for v in fr.pose.transform.reshape(-1)],
        }
        for i, fr in enumerate(ds.frames)
    ]
    (root / "poses.json").write_text(json.dumps(poses, indent=1))
    for i, fr in enumerate(ds.frames):
        img_u8 = np.round(np.clip(fr.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(img_u8).save(root / "frames" / f"{i:05d}.png")
        Image.fromarray((fr.mask.astype(np.uint8) * 255)).save(root / "masks" / f"{i:05d}.png")


def load_dataset(path) -> SceneDataset:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetFormatError(f"missing meta.json under {root}")
    meta = json.loads(meta_path.read_text())
    poses_path = root / "poses.json"
    if not poses_path.exists():
        raise DatasetFormatError(f"missing poses.json under {root}")
    pose_records = json.loads(poses_path.read_text())
    frame_files = sorted((root / "frames").glob("*.png")) if (root / "frames").exists() else []
    if len(frame_files) != len(pose_records):
        raise DatasetFormatError(
            f"poses.json lists {len(pose_records)} frames but frames/ holds {len(frame_files)}"
        )
    h, w = meta["resolution"]
    intr = Intrinsics(focal=meta["focal"], cx=meta["principal"][0], cy=meta["principal"][1])
    frames = []
    for rec in pose_records:
        i = rec["index"]
        pose = CameraPose(
            theta=rec["theta"],
            phi=rec["phi"],
            radius=rec["radius"],
            transform=np.array(rec["transform"], dtype=np.float64).reshape(4, 4),
        )
        img_path = root / "frames" / f"{i:05d}.png"
        mask_path = root / "masks" / f"{i:05d}.png"
        try:
            with Image.open(img_path) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise DatasetIntegrityError(
                f"frame {i}: cannot decode {img_path}: {exc}", path=img_path, frame=i
            ) from exc
        try:
            with Image.open(mask_path) as im:
                mask = np.asarray(im.convert("L")) > 127
        except Exception as exc:
            raise DatasetIntegrityError(
                f"frame {i}: cannot decode {mask_path}: {exc}", path=mask_path, frame=i
            ) from exc
        frames.append(FrameRecord(image=image, mask=mask, pose=pose, attributes=meta["attributes"]))
    ds = SceneDataset(
        frames=frames,
        intrinsics=intr,
        resolution=(h, w),
        seed=meta["seed"],
        attributes=meta["attributes"],
        background=tuple(meta.get("background", (0.0, 0.0, 0.0))),
    )
    ds.validate()
    return ds
