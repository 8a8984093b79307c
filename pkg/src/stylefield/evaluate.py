"""Evaluation stage: quality metrics, preservation contracts, pose error."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from stylefield.editor import depth_loss
from stylefield.errors import ValidationError
from stylefield.field.render import render_image
from stylefield.field.train import TrainFieldConfig, split_holdout
from stylefield.metrics import psnr, ssim
from stylefield.oracle import OracleTrainConfig, pose_error, train_pose_oracle
from stylefield.scenes import load_dataset
from stylefield.seeding import derive_seed
from stylefield.sets import load_stylized


def fg_psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """PSNR restricted to foreground pixels."""
    if not mask.any():
        raise ValidationError("empty foreground mask")
    diff = (a - b)[mask]
    mse = float(np.mean(diff**2))
    return 99.0 if mse == 0 else min(99.0, 10.0 * np.log10(1.0 / mse))


def fg_mean_color(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return np.zeros(3)
    return img[mask].mean(axis=0)


def adjacent_color_deltas(renders, masks, poses):
    """Mean foreground color change between theta-adjacent poses, per ring."""
    rings = {}
    for i, p in enumerate(poses):
        rings.setdefault(round(p.phi, 9), []).append(i)
    deltas = []
    for ring in rings.values():
        order = sorted(ring, key=lambda i: poses[i].theta)
        for a, b in zip(order, order[1:] + order[:1]):
            ca = fg_mean_color(renders[a], masks[a])
            cb = fg_mean_color(renders[b], masks[b])
            deltas.append(float(np.abs(ca - cb).mean()))
    return float(np.mean(deltas))


def evaluate_run(cfg: dict, inputs: dict, stage_dir) -> dict:
    from stylefield.pipeline import load_field, load_oracle, save_oracle, write_trace_csv

    stage_dir = Path(stage_dir)
    scene = load_dataset(inputs["scene"])
    gan_scene = load_dataset(inputs["gan_scene"])
    pre_field = load_field(inputs["field_pre"])
    post_field = load_field(inputs["field_post"])
    guides = load_stylized(inputs["guides"])
    seed = cfg["seed"]

    oracle_dir = stage_dir / "oracle"
    oracle_meta = oracle_dir / "config.json"
    want_iters = cfg["eval"]["oracle_iterations"]
    if oracle_meta.exists() and json.loads(oracle_meta.read_text()).get("iterations") == want_iters:
        oracle = load_oracle(oracle_dir)
    else:
        oracle = train_pose_oracle(
            [scene, gan_scene], OracleTrainConfig(iterations=want_iters), seed=seed
        )
        save_oracle(oracle, oracle_dir)
        meta = json.loads(oracle_meta.read_text())
        meta["iterations"] = want_iters
        oracle_meta.write_text(json.dumps(meta, indent=1, sort_keys=True))

    rows = []
    # original-scene fit on held-out frames
    _, held = split_holdout(len(scene.frames), cfg["nerf"]["holdout_every"])
    for i in held:
        fr = scene.frames[i]
        out = render_image(
            fr.pose, pre_field, 0, 0, scene.intrinsics, scene.resolution,
            jitter_seed=derive_seed(seed, "eval-fit", i),
        )
        rows.append(
            {"view": f"holdout-{i}", "holdout_psnr": psnr(out.color, fr.image),
             "holdout_ssim": ssim(out.color, fr.image)}
        )

    # preservation + drift at every original pose; style adoption at guides
    pre_renders, post_renders = [], []
    for i, fr in enumerate(scene.frames):
        js = derive_seed(seed, "eval-orig", i)
        pre = render_image(fr.pose, pre_field, 0, 0, scene.intrinsics, scene.resolution, jitter_seed=js)
        post = render_image(fr.pose, post_field, 0, 0, scene.intrinsics, scene.resolution, jitter_seed=js)
        bg = ~fr.mask
        rows.append(
            {
                "view": f"orig-{i}",
                "preserve_psnr": psnr(post.color, pre.color),
                "bg_opacity_drift": float(np.abs(post.opacity - pre.opacity)[bg].mean()),
            }
        )
        pre_renders.append(pre)
        post_renders.append(post)

    styled_renders, styled_masks, depth_tvs = [], [], []
    degenerate_masks = 0
    for i, e in enumerate(guides.entries):
        js = derive_seed(seed, "eval-styled", i)
        out = render_image(
            e.pose, post_field, 1, e.appearance, guides.intrinsics, guides.resolution, jitter_seed=js
        )
        styled_renders.append(out.color)
        styled_masks.append(e.mask)
        depth_tvs.append(float(depth_loss(torch.from_numpy(out.depth))))
        row = {"view": f"styled-{i}", "depth_tv": depth_tvs[-1]}
        if e.mask.any():
            row["fg_psnr"] = fg_psnr(out.color, e.image, e.mask)
        else:
            degenerate_masks += 1
        rows.append(row)

    perr = pose_error(
        styled_renders, [(e.pose.theta, e.pose.phi) for e in guides.entries], oracle
    )

    guide_poses = [e.pose for e in guides.entries]
    styled_delta = adjacent_color_deltas(styled_renders, styled_masks, guide_poses)
    orig_delta = adjacent_color_deltas(
        [r.color for r in pre_renders], [fr.mask for fr in scene.frames],
        [fr.pose for fr in scene.frames],
    )

    def agg(key):
        vals = [r[key] for r in rows if key in r]
        return float(np.mean(vals)) if vals else float("nan")

    aggregates = {
        "holdout_psnr": agg("holdout_psnr"),
        "holdout_ssim": agg("holdout_ssim"),
        "preserve_psnr": agg("preserve_psnr"),
        "bg_opacity_drift": agg("bg_opacity_drift"),
        "fg_psnr": agg("fg_psnr"),
        "degenerate_masks": degenerate_masks,
        "depth_tv": agg("depth_tv"),
        "pose_error_deg": perr["error_deg"],
        "oracle_validation_deg": perr["oracle_validation_deg"],
        "styled_adjacent_delta": styled_delta,
        "orig_adjacent_delta": orig_delta,
        "consistency_ratio": styled_delta / max(orig_delta, 1e-9),
    }
    passes = {
        "holdout_psnr>=25": aggregates["holdout_psnr"] >= 25.0,
        "preserve_psnr>=30": aggregates["preserve_psnr"] >= 30.0,
        "bg_opacity_drift<=0.05": aggregates["bg_opacity_drift"] <= 0.05,
        "fg_psnr>=18": aggregates["fg_psnr"] >= 18.0,
        "consistency_ratio<=2": aggregates["consistency_ratio"] <= 2.0,
    }
    report = {"aggregates": aggregates, "passes": passes}
    (stage_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    header = sorted({k for r in rows for k in r})
    table = [[r.get(k, "") for k in header] for r in rows]
    write_trace_csv(stage_dir / "rows.csv", table, header)
    return {"report": "report.json", "rows": "rows.csv", "oracle": "oracle"}
