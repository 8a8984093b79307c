"""Command-line entry point.

    stylefield <subcommand> [--config FILE] [--seed N] [--out-dir DIR] ...

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from stylefield.config import load_config
from stylefield.errors import NumericalError, ValidationError

STAGE_COMMANDS = {
    "synth": ["synth"],
    "train-nerf": ["synth", "train-nerf"],
    "train-gen": ["synth", "train-gen"],
    "train-encoder": ["synth", "train-gen", "train-encoder"],
    "decompose": ["synth", "train-gen", "decompose"],
    "train-adjustor": ["synth", "train-nerf", "train-gen", "train-encoder", "train-adjustor"],
    "train-mapper": ["synth", "train-gen", "train-mapper"],
    "finetune": None,  # full prefix
    "eval": None,
    "pipeline": None,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stylefield", description=__doc__)
    p.add_argument("--config", type=Path, default=None, help="JSON config overlay")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", type=Path, default=Path("runs/default"))
    sub = p.add_subparsers(dest="command", required=True)
    for name in [
        "synth", "train-nerf", "train-gen", "train-encoder", "decompose",
        "train-adjustor", "train-mapper", "finetune", "eval", "pipeline",
    ]:
        sub.add_parser(name)
    ft = sub.choices["finetune"]
    ft.add_argument("--lambda-depth", type=float, default=None)
    ft.add_argument("--iters", type=int, default=None)
    ft.add_argument(
        "--disable-loss", choices=["style", "br", "ori", "depth"], action="append", default=[]
    )
    render = sub.add_parser("render")
    render.add_argument("--theta-deg", type=float, default=0.0)
    render.add_argument("--phi-deg", type=float, default=0.0)
    render.add_argument("--style", type=int, default=0)
    render.add_argument("--appearance", type=int, default=0)
    render.add_argument("--checkpoint", choices=["train-nerf", "finetune"], default="train-nerf")
    render.add_argument("--out", type=Path, required=True)
    si = sub.add_parser("stylize-in")
    so = sub.add_parser("stylize-out")
    for s in (si, so):
        s.add_argument("--out", type=Path, required=True)
    return p


def _stages_for(command: str):
    from stylefield.pipeline import STAGE_ORDER

    preset = STAGE_COMMANDS.get(command)
    if preset is not None:
        return preset
    if command == "pipeline":
        return STAGE_ORDER
    return STAGE_ORDER[: STAGE_ORDER.index(command) + 1]


def _cmd_render(cfg, out_dir, args) -> None:
    from PIL import Image

    from stylefield.cameras import CameraPose
    from stylefield.field.render import render_image
    from stylefield.pipeline import load_field
    from stylefield.scenes import load_dataset

    field = load_field(out_dir / args.checkpoint / "field")
    scene = load_dataset(out_dir / "synth" / "scene")
    pose = CameraPose(math.radians(args.theta_deg), math.radians(args.phi_deg), cfg["scene"]["radius"])
    out = render_image(
        pose, field, args.style, args.appearance, scene.intrinsics, scene.resolution
    )
    img = np.round(np.clip(out.color, 0, 1) * 255).astype(np.uint8)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(args.out)
    print(f"wrote {args.out}")


def _cmd_stylize_half(cfg, out_dir, args, which: str) -> None:
    from stylefield.config import domain_from_config
    from stylefield.editor import field_mask, partition_views
    from stylefield.mapper import build_out_domain_set
    from stylefield.adjustor import build_in_domain_set
    from stylefield.pipeline import (
        load_adjustor, load_field, load_generator, load_mapper, run_pipeline, styled_code,
    )
    from stylefield.scenes import SceneSpec
    from stylefield.sets import save_stylized
    from stylefield.pipeline import _scene_spec

    run_pipeline(cfg, out_dir, stages=_stages_for("train-adjustor"))
    if which == "out":
        run_pipeline(cfg, out_dir, stages=["train-mapper"])
    field = load_field(out_dir / "train-nerf" / "field")
    params = load_adjustor(out_dir / "train-adjustor" / "adjustor")
    dom = domain_from_config(cfg)
    spec = _scene_spec(cfg)
    poses_in, poses_out = partition_views(spec.poses(), dom)
    code = styled_code(params, cfg["stylize"]["edit_column"], cfg["stylize"]["edit_strength"])
    if which == "in":
        gen = load_generator(out_dir / "train-adjustor" / "generator_tuned")
        part = build_in_domain_set(
            code, poses_in, params, gen, dom, spec.intrinsics, spec.resolution
        )
    else:
        gen = load_generator(out_dir / "train-gen" / "generator")
        mapper = load_mapper(out_dir / "train-mapper" / "mapper", gen.config)
        part = build_out_domain_set(
            field, poses_out, code, mapper, gen, dom, spec.intrinsics, spec.resolution,
            stage=cfg["stylize"]["stage"], appearance_start=len(poses_in),
        )
    for e in part.entries:
        e.mask = field_mask(field, e.pose, spec.intrinsics, spec.resolution)
    save_stylized(part, args.out)
    print(f"wrote {len(part.entries)} {which}-domain guides to {args.out}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "finetune":
            if args.lambda_depth is not None:
                cfg["finetune"]["lambda_depth"] = args.lambda_depth
            if args.iters is not None:
                cfg["finetune"]["iterations"] = args.iters
            if args.disable_loss:
                cfg["finetune"]["disable"] = sorted(set(args.disable_loss))
        out_dir = args.out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "render":
            _cmd_render(cfg, out_dir, args)
        elif args.command in ("stylize-in", "stylize-out"):
            _cmd_stylize_half(cfg, out_dir, args, args.command.split("-")[1])
        else:
            from stylefield.pipeline import run_pipeline

            manifests = run_pipeline(
                cfg, out_dir, stages=_stages_for(args.command),
                progress=lambda s: print(f"[stage] {s}", flush=True),
            )
            for m in manifests:
                hit = " (cached)" if m.get("cache_hit") else ""
                print(f"{m['stage']}: {m['timing']['wall_seconds']:.1f}s{hit}")
        return 0
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
