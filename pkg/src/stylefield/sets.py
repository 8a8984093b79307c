"""Stylized guide sets: posed guide images with per-image appearance indices
and in/out-of-domain tags, persisted in the scene dataset layout plus a
domain_tags.json sidecar."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from stylefield.cameras import CameraPose, Intrinsics
from stylefield.errors import DatasetFormatError, ValidationError

DOMAIN_IN = "in"
DOMAIN_OUT = "out"


@dataclass
class StylizedEntry:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    pose: CameraPose
    appearance: int
    domain: str
    mask: np.ndarray | None = None  # (H, W) bool; filled during assembly


@dataclass
class StylizedSet:
    entries: list[StylizedEntry]
    resolution: tuple[int, int]
    intrinsics: Intrinsics
    seed: int = 0
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, domain=None, require_masks: bool = True) -> None:
        seen = set()
        h, w = self.resolution
        for i, e in enumerate(self.entries):
            if e.domain not in (DOMAIN_IN, DOMAIN_OUT):
                raise ValidationError(f"entry {i}: bad domain tag {e.domain!r}")
            if e.appearance in seen:
                raise ValidationError(f"entry {i}: duplicate appearance index {e.appearance}")
            seen.add(e.appearance)
            if e.image.shape != (h, w, 3):
                raise ValidationError(f"entry {i}: image shape {e.image.shape}")
            if require_masks:
                if e.mask is None:
                    raise ValidationError(f"entry {i}: missing mask")
                if e.mask.shape != (h, w):
                    raise ValidationError(f"entry {i}: mask shape {e.mask.shape}")
            if domain is not None:
                tag = DOMAIN_IN if domain.contains(e.pose) else DOMAIN_OUT
                if tag != e.domain:
                    raise ValidationError(
                        f"entry {i}: tagged {e.domain!r} but pose partitions as {tag!r}"
                    )

    def merged_with(self, other: "StylizedSet") -> "StylizedSet":
        out = StylizedSet(
            entries=self.entries + other.entries,
            resolution=self.resolution,
            intrinsics=self.intrinsics,
            seed=self.seed,
            warnings=self.warnings + other.warnings,
        )
        out.validate(require_masks=False)
        return out


def save_stylized(s: StylizedSet, path) -> None:
    root = Path(path)
    s.validate(require_masks=True)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    h, w = s.resolution
    meta = {
        "resolution": [h, w],
        "focal": s.intrinsics.focal,
        "principal": [s.intrinsics.cx, s.intrinsics.cy],
        "seed": s.seed,
        "attributes": {},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    poses = []
    tags = []
    for i, e in enumerate(s.entries):
        poses.append(
            {
                "index": i,
                "theta": e.pose.theta,
                "phi": e.pose.phi,
                "radius": e.pose.radius,
                "transform": [float(v) for v in e.pose.transform.reshape(-1)],
            }
        )
        tags.append({"index": i, "domain": e.domain, "appearance": e.appearance})
        img_u8 = np.round(np.clip(e.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(img_u8).save(root / "frames" / f"{i:05d}.png")
        Image.fromarray(e.mask.astype(np.uint8) * 255).save(root / "masks" / f"{i:05d}.png")
    (root / "poses.json").write_text(json.dumps(poses, indent=1))
    payload = {"tags": tags}
    if s.warnings:
        payload["warnings"] = list(s.warnings)
    (root / "domain_tags.json").write_text(json.dumps(payload, indent=1))


def load_stylized(path) -> StylizedSet:
    root = Path(path)
    tags_path = root / "domain_tags.json"
    if not tags_path.exists():
        raise DatasetFormatError(f"missing domain_tags.json under {root}")
    payload = json.loads(tags_path.read_text())
    meta = json.loads((root / "meta.json").read_text())
    pose_records = json.loads((root / "poses.json").read_text())
    tags = {t["index"]: t for t in payload["tags"]}
    if set(tags) != set(range(len(pose_records))):
        raise DatasetFormatError("domain_tags.json indices do not match poses.json")
    entries = []
    for rec in pose_records:
        i = rec["index"]
        pose = CameraPose(
            theta=rec["theta"],
            phi=rec["phi"],
            radius=rec["radius"],
            transform=np.array(rec["transform"]).reshape(4, 4),
        )
        with Image.open(root / "frames" / f"{i:05d}.png") as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(root / "masks" / f"{i:05d}.png") as im:
            mask = np.asarray(im.convert("L")) > 127
        entries.append(
            StylizedEntry(
                image=image,
                pose=pose,
                appearance=tags[i]["appearance"],
                domain=tags[i]["domain"],
                mask=mask,
            )
        )
    h, w = meta["resolution"]
    s = StylizedSet(
        entries=entries,
        resolution=(h, w),
        intrinsics=Intrinsics(meta["focal"], meta["principal"][0], meta["principal"][1]),
        seed=meta["seed"],
        warnings=tuple(payload.get("warnings", ())),
    )
    s.validate(require_masks=True)
    return s
