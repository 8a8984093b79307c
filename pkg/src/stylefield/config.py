"""Resolved run configuration: defaults, JSON overlay, and per-stage views."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from stylefield.errors import ValidationError

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "strict": False,
    "scene": {
        "resolution": 64,
        "theta_count": 12,
        "phi_count": 3,
        "phi_range": [-0.25, 0.25],
        "radius": 1.3,
        "attributes": {"elongation": 0.5, "bump": 0.4, "hue": 0.6, "stripe": 0.5},
        "gan_variants": 12,
        "gan_poses_per_variant": 15,
    },
    "domain": {"theta_max_deg": 40.0, "phi_max_deg": 20.0},
    "nerf": {
        "iterations": 10_000,
        "rays_per_step": 176,
        "lr": 2e-3,
        "holdout_every": 12,
    },
    "gan": {"iterations": 3000, "batch": 8, "lr": 1e-3, "r1_gamma": 1.0, "r1_every": 8},
    "encoder": {"iterations": 2500, "batch": 8, "lr": 1e-3, "refine_iterations": 300},
    "decomp": {"n_latents": 4096, "top_k": 16},
    "pivotal": {"iterations": 300, "lr": 1e-3},
    "adjustor": {
        "pair_theta_count": 9,
        "pair_phi_count": 3,
        "iterations": 2000,
        "batch": 2,
        "lr": 2e-3,
        "gamma_reg": 1e-3,
        "differentiable": True,
        "weight_l2": 1.0,
        "weight_perceptual": 0.5,
        "weight_identity": 0.5,
    },
    "mapper": {"iterations": 20_000, "batch": 2, "lr": 5e-4},
    "stylize": {"edit_column": "auto", "edit_strength": 2.0, "stage": 3},
    "finetune": {
        "iterations": None,  # defaults to nerf.iterations / 4
        "rays_per_step": 160,
        "patch": 16,
        "lr": 5e-4,
        "lambda_depth": 0.01,
        "disable": [],
    },
    "eval": {"oracle_iterations": 1500},
}


def _merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in overlay.items():
        if key not in out:
            raise ValidationError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            for k2, v2 in val.items():
                if k2 not in out[key]:
                    raise ValidationError(f"unknown config key {key}.{k2}")
                out[key][k2] = v2
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        text = Path(path).read_text()
        cfg = _merge(cfg, json.loads(text))
    if overrides:
        cfg = _merge(cfg, overrides)
    if cfg["finetune"]["iterations"] is None:
        cfg["finetune"]["iterations"] = cfg["nerf"]["iterations"] // 4
    return cfg


def domain_from_config(cfg: dict):
    from stylefield.editor import ViewDomain

    return ViewDomain(
        theta_max=math.radians(cfg["domain"]["theta_max_deg"]),
        phi_max=math.radians(cfg["domain"]["phi_max_deg"]),
    )
