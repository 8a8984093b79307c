"""Regenerate the committed golden artifacts.

Run once and commit the outputs; the test suite compares against them
bit-for-bit. Usage: python scripts/make_goldens.py
"""

import json
from pathlib import Path

import numpy as np

from stylefield.checkpoint import file_hash
from stylefield.scenes import SceneSpec, save_dataset, synth_scene

GOLDEN_DIR = Path(__file__).parent.parent / "tests" / "goldens"


def frontal_spec(elongation, bump=0.0):
    return SceneSpec(
        resolution=(64, 64),
        theta_count=1,
        phi_count=1,
        theta_range=(0.0, 0.0),
        phi_range=(0.0, 0.0),
        attributes={"elongation": elongation, "bump": bump, "hue": 0.6, "stripe": 0.5},
    )


def bbox_aspect(mask):
    ys, xs = np.nonzero(mask)
    return float((ys.max() - ys.min() + 1) / (xs.max() - xs.min() + 1))


def main():
    GOLDEN_DIR.mkdir(parents=True, exist_ok=True)

    a0 = bbox_aspect(synth_scene(frontal_spec(0.0), seed=0).frames[0].mask)
    a1 = bbox_aspect(synth_scene(frontal_spec(1.0), seed=0).frames[0].mask)
    (GOLDEN_DIR / "elongation_aspect.json").write_text(
        json.dumps(
            {"aspect_elongation_0": a0, "aspect_elongation_1": a1, "aspect_factor": a1 / a0},
            indent=1,
        )
    )
    print(f"aspect: {a0:.4f} -> {a1:.4f} (factor {a1 / a0:.4f})")

    spec = SceneSpec(
        resolution=(32, 32),
        theta_count=2,
        phi_count=1,
        theta_range=(-0.4, 0.4),
        phi_range=(0.1, 0.1),
        attributes={"elongation": 0.7, "bump": 0.5, "hue": 0.25, "stripe": 0.3},
    )
    ds = synth_scene(spec, seed=99)
    root = GOLDEN_DIR / "golden_scene"
    save_dataset(ds, root)
    files = {}
    for f in sorted(root.rglob("*")):
        if f.is_file():
            files[str(f.relative_to(root))] = file_hash(f)
    (GOLDEN_DIR / "golden_scene_checksums.json").write_text(
        json.dumps({"frames": len(ds.frames), "files": files}, indent=1)
    )
    print(f"golden scene: {len(ds.frames)} frames, {len(files)} files")


if __name__ == "__main__":
    main()
