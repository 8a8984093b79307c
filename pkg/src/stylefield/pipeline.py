"""Stage graph with content-addressed caching.

Each stage writes its artifacts plus a manifest recording the resolved stage
config, input artifact hashes, output hashes, and timing. A stage re-runs
only when its config hash or any input hash changes; matching manifests are
cache hits and cost nothing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import torch

from stylefield import checkpoint as ckpt
from stylefield.adjustor import (
    AdjustorParams,
    AdjustorTrainConfig,
    PoseAdjustor,
    PosedPair,
    build_in_domain_set,
    train_adjustor,
)
from stylefield.cameras import CameraPose, Intrinsics, pose_grid
from stylefield.config import domain_from_config
from stylefield.decomp import OrthogonalBasis, covariance, sample_latents, top_k_eigvecs
from stylefield.editor import FinetuneConfig, ViewDomain, assemble_sets, depth_loss, finetune, partition_views
from stylefield.errors import ValidationError
from stylefield.field.network import ConditionedField, FieldConfig
from stylefield.field.render import render_image
from stylefield.field.train import TrainFieldConfig, holdout_psnr, split_holdout, train_original
from stylefield.mapper import HiddenMapper, TrainMapperConfig, train_mapper
from stylefield.metrics import psnr, ssim
from stylefield.oracle import OracleTrainConfig, PoseOracle, pose_error, train_pose_oracle
from stylefield.scenes import SceneSpec, load_dataset, save_dataset, synth_collection, synth_scene
from stylefield.seeding import apply_strict_mode, derive_seed
from stylefield.sets import DOMAIN_IN, load_stylized, save_stylized
from stylefield.stylegen.encoder import InversionEncoder, invert
from stylefield.stylegen.generator import GeneratorConfig, LatentCode, ToyGenerator
from stylefield.stylegen.train import (
    PivotalConfig,
    TrainEncoderConfig,
    TrainGanConfig,
    finetune_generator,
    train_encoder,
    train_generator,
)

STAGE_ORDER = [
    "synth",
    "train-nerf",
    "train-gen",
    "train-encoder",
    "decompose",
    "train-adjustor",
    "train-mapper",
    "stylize",
    "finetune",
    "eval",
]

# config sections that feed each stage's cache key
STAGE_CONFIG_KEYS = {
    "synth": ["scene", "domain"],
    "train-nerf": ["nerf"],
    "train-gen": ["domain", "gan"],
    "train-encoder": ["encoder"],
    "decompose": ["decomp"],
    "train-adjustor": ["scene", "domain", "decomp", "pivotal", "adjustor"],
    "train-mapper": ["mapper"],
    "stylize": ["scene", "domain", "stylize"],
    "finetune": ["finetune"],
    "eval": ["nerf", "eval"],
}

STAGE_INPUTS = {
    "synth": [],
    "train-nerf": [("synth", "scene")],
    "train-gen": [("synth", "gan_scene")],
    "train-encoder": [("train-gen", "generator")],
    "decompose": [("train-gen", "generator")],
    "train-adjustor": [
        ("synth", "gan_scene"),
        ("train-nerf", "field"),
        ("train-gen", "generator"),
        ("train-encoder", "encoder"),
    ],
    "train-mapper": [("train-gen", "generator")],
    "stylize": [
        ("train-nerf", "field"),
        ("train-adjustor", "adjustor"),
        ("train-adjustor", "generator_tuned"),
        ("train-gen", "generator"),
        ("train-mapper", "mapper"),
    ],
    "finetune": [("synth", "scene"), ("train-nerf", "field"), ("stylize", "guides")],
    "eval": [
        ("synth", "scene"),
        ("synth", "gan_scene"),
        ("train-nerf", "field", "field_pre"),
        ("stylize", "guides"),
        ("finetune", "field", "field_post"),
    ],
}


def artifact_hash(path) -> str:
    """Digest of a file, or of a directory's sorted file digests."""
    p = Path(path)
    if p.is_file():
        return ckpt.file_hash(p)
    if not p.is_dir():
        raise ValidationError(f"missing artifact {p}")
    digest = hashlib.sha256()
    for f in sorted(p.rglob("*")):
        if f.is_file():
            digest.update(str(f.relative_to(p)).encode())
            digest.update(ckpt.file_hash(f).encode())
    return digest.hexdigest()


def _config_hash(cfg: dict, stage: str) -> str:
    view = {k: cfg[k] for k in STAGE_CONFIG_KEYS[stage]}
    view["seed"] = cfg["seed"]
    view["strict"] = cfg["strict"]
    return hashlib.sha256(json.dumps(view, sort_keys=True).encode()).hexdigest()


def write_trace_csv(path, rows, header) -> None:
    lines = [",".join(header)]
    lines += [",".join(f"{v}" for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# component persistence (config.json + tensor blob per component)

def _write_cfg(directory, obj) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / "config.json").write_text(json.dumps(obj, indent=1, sort_keys=True))


def _read_cfg(directory) -> dict:
    return json.loads((Path(directory) / "config.json").read_text())


def save_field(field: ConditionedField, directory) -> None:
    cfg = dataclasses.asdict(field.config)
    cfg["grid"] = dataclasses.asdict(field.config.grid)
    _write_cfg(directory, cfg)
    ckpt.save_module(field, directory)


def load_field(directory) -> ConditionedField:
    from stylefield.field.encoding import HashGridConfig

    raw = _read_cfg(directory)
    raw["grid"] = HashGridConfig(**raw["grid"])
    field = ConditionedField(FieldConfig(**raw))
    ckpt.load_module(field, directory)
    return field


def save_generator(gen: ToyGenerator, directory) -> None:
    cfg = dataclasses.asdict(gen.config)
    cfg["channels"] = list(cfg["channels"])
    cfg["exposed_stages"] = list(cfg["exposed_stages"])
    _write_cfg(directory, cfg)
    ckpt.save_module(gen, directory)


def load_generator(directory) -> ToyGenerator:
    raw = _read_cfg(directory)
    raw["channels"] = tuple(raw["channels"])
    raw["exposed_stages"] = tuple(raw["exposed_stages"])
    gen = ToyGenerator(GeneratorConfig(**raw))
    ckpt.load_module(gen, directory)
    return gen


def save_encoder(enc: InversionEncoder, directory) -> None:
    _write_cfg(directory, {"resolution": enc.config.resolution})
    ckpt.save_module(enc, directory)


def load_encoder(directory, gen_config: GeneratorConfig) -> InversionEncoder:
    enc = InversionEncoder(gen_config)
    ckpt.load_module(enc, directory)
    return enc


def save_mapper(mapper: HiddenMapper, directory) -> None:
    _write_cfg(directory, {"exposed": list(mapper.config.exposed_stages)})
    ckpt.save_module(mapper, directory)


def load_mapper(directory, gen_config: GeneratorConfig) -> HiddenMapper:
    mapper = HiddenMapper(gen_config)
    ckpt.load_module(mapper, directory)
    return mapper


def save_adjustor(params: AdjustorParams, directory) -> None:
    _write_cfg(
        directory,
        {"top_k": params.adjustor.top_k, "stages": params.base_code.n_stages},
    )
    tensors = {f"adjustor.{k}": v for k, v in params.adjustor.state_dict().items()}
    tensors["basis.vectors"] = params.basis.vectors
    tensors["basis.lambdas"] = params.basis.lambdas
    tensors["base_code.stages"] = params.base_code.stages
    ckpt.save_tensors(tensors, directory)


def load_adjustor(directory) -> AdjustorParams:
    meta = _read_cfg(directory)
    tensors = ckpt.load_tensors(directory)
    adjustor = PoseAdjustor(meta["top_k"])
    adjustor.load_state_dict(
        {k[len("adjustor."):]: v for k, v in tensors.items() if k.startswith("adjustor.")}
    )
    basis = OrthogonalBasis(vectors=tensors["basis.vectors"], lambdas=tensors["basis.lambdas"])
    return AdjustorParams(
        adjustor=adjustor, basis=basis, base_code=LatentCode(tensors["base_code.stages"])
    )


def save_oracle(oracle: PoseOracle, directory) -> None:
    _write_cfg(
        directory,
        {"resolution": oracle.resolution, "validation_error_deg": oracle.validation_error_deg},
    )
    ckpt.save_module(oracle, directory)


def load_oracle(directory) -> PoseOracle:
    meta = _read_cfg(directory)
    oracle = PoseOracle(meta["resolution"])
    ckpt.load_module(oracle, directory)
    oracle.validation_error_deg = meta["validation_error_deg"]
    return oracle


# ---------------------------------------------------------------------------
# stage bodies

def _scene_spec(cfg: dict) -> SceneSpec:
    sc = cfg["scene"]
    return SceneSpec(
        resolution=(sc["resolution"], sc["resolution"]),
        theta_count=sc["theta_count"],
        phi_count=sc["phi_count"],
        phi_range=tuple(sc["phi_range"]),
        radius=sc["radius"],
        attributes=dict(sc["attributes"]),
    )


def _stage_synth(cfg, stage_dir, inputs):
    ds = synth_scene(_scene_spec(cfg), cfg["seed"])
    save_dataset(ds, stage_dir / "scene")
    sc = cfg["scene"]
    dom = cfg["domain"]
    gan_ds = synth_collection(
        _scene_spec(cfg),
        n_variants=sc["gan_variants"],
        poses_per_variant=sc["gan_poses_per_variant"],
        seed=derive_seed(cfg["seed"], "gan-collection"),
        theta_max=math.radians(dom["theta_max_deg"]),
        phi_max=math.radians(dom["phi_max_deg"]),
    )
    save_dataset(gan_ds, stage_dir / "gan_scene")
    return {"scene": "scene", "gan_scene": "gan_scene"}


def _stage_train_nerf(cfg, stage_dir, inputs):
    ds = load_dataset(inputs["scene"])
    ncfg = cfg["nerf"]
    tcfg = TrainFieldConfig(
        iterations=ncfg["iterations"],
        rays_per_step=ncfg["rays_per_step"],
        lr=ncfg["lr"],
        holdout_every=ncfg["holdout_every"],
    )
    fcfg = FieldConfig(n_appearances=len(ds.frames) + 4)
    field, trace = train_original(ds, tcfg, fcfg, seed=cfg["seed"])
    save_field(field, stage_dir / "field")
    write_trace_csv(stage_dir / "trace.csv", trace, ["iteration", "loss"])
    info = {
        "ms_per_step": field.ms_per_step,
        "train_seconds": field.train_seconds,
        "holdout_psnr": holdout_psnr(ds, field, tcfg, seed=cfg["seed"]),
    }
    (stage_dir / "info.json").write_text(json.dumps(info, indent=1))
    return {"field": "field", "trace": "trace.csv", "info": "info.json"}


def _stage_train_gen(cfg, stage_dir, inputs):
    ds = load_dataset(inputs["gan_scene"])
    g = cfg["gan"]
    dom = domain_from_config(cfg)
    gcfg = TrainGanConfig(
        iterations=g["iterations"],
        batch=g["batch"],
        lr=g["lr"],
        r1_gamma=g["r1_gamma"],
        r1_every=g["r1_every"],
        pose_cone=(dom.theta_max, dom.phi_max),
    )
    gen, disc, trace = train_generator(ds, gcfg, seed=cfg["seed"])
    save_generator(gen, stage_dir / "generator")
    ckpt.save_module(disc, stage_dir / "discriminator")
    write_trace_csv(stage_dir / "trace.csv", trace, ["iteration", "loss_d", "loss_g"])
    return {"generator": "generator", "discriminator": "discriminator", "trace": "trace.csv"}


def _stage_train_encoder(cfg, stage_dir, inputs):
    gen = load_generator(inputs["generator"])
    e = cfg["encoder"]
    ecfg = TrainEncoderConfig(
        iterations=e["iterations"],
        batch=e["batch"],
        lr=e["lr"],
        refine_iterations=e["refine_iterations"],
    )
    enc, trace = train_encoder(gen, ecfg, seed=cfg["seed"])
    save_encoder(enc, stage_dir / "encoder")
    write_trace_csv(stage_dir / "trace.csv", trace, ["iteration", "loss"])
    return {"encoder": "encoder", "trace": "trace.csv"}


def _stage_decompose(cfg, stage_dir, inputs):
    gen = load_generator(inputs["generator"])
    d = cfg["decomp"]
    with torch.no_grad():
        w = sample_latents(gen.mapping, d["n_latents"], derive_seed(cfg["seed"], "decompose"))
        basis = top_k_eigvecs(covariance(w), d["top_k"], max_iters=4000)
    ckpt.save_tensors(
        {"basis.vectors": basis.vectors, "basis.lambdas": basis.lambdas}, stage_dir / "basis"
    )
    spectrum = {"lambdas": [float(v) for v in basis.lambdas]}
    (stage_dir / "spectrum.json").write_text(json.dumps(spectrum, indent=1))
    return {"basis": "basis", "spectrum": "spectrum.json"}


def _render_pairs(field, poses, intrinsics, resolution, seed):
    pairs = []
    for i, pose in enumerate(poses):
        out = render_image(
            pose, field, style_id=0, app_index=0, intrinsics=intrinsics,
            resolution=resolution, jitter_seed=derive_seed(seed, "pair", i),
        )
        pairs.append(PosedPair(image=out.color, theta=pose.theta, phi=pose.phi))
    return pairs


def _stage_train_adjustor(cfg, stage_dir, inputs):
    field = load_field(inputs["field"])
    gen = load_generator(inputs["generator"])
    enc = load_encoder(inputs["encoder"], gen.config)
    gan_ds = load_dataset(inputs["gan_scene"])
    dom = domain_from_config(cfg)
    a = cfg["adjustor"]
    pair_poses = pose_grid(
        a["pair_theta_count"], a["pair_phi_count"],
        (-dom.theta_max, dom.theta_max), (-dom.phi_max, dom.phi_max),
        radius=cfg["scene"]["radius"],
    )
    pairs = _render_pairs(field, pair_poses, gan_ds.intrinsics, gan_ds.resolution, cfg["seed"])
    frontal_pose = CameraPose(0.0, 0.0, cfg["scene"]["radius"])
    frontal = render_image(
        frontal_pose, field, style_id=0, app_index=0, intrinsics=gan_ds.intrinsics,
        resolution=gan_ds.resolution, jitter_seed=derive_seed(cfg["seed"], "frontal"),
    ).color

    # pivot-locked generator finetune against the frontal render
    base_code = invert(gen, enc, frontal)
    p = cfg["pivotal"]
    tuned, pti_trace = finetune_generator(
        gen, base_code, frontal, PivotalConfig(iterations=p["iterations"], lr=p["lr"])
    )

    acfg = AdjustorTrainConfig(
        iterations=a["iterations"],
        batch=a["batch"],
        lr=a["lr"],
        n_latents=cfg["decomp"]["n_latents"],
        top_k=cfg["decomp"]["top_k"],
        gamma_reg=a["gamma_reg"],
        differentiable=a["differentiable"],
        weight_l2=a["weight_l2"],
        weight_perceptual=a["weight_perceptual"],
        weight_identity=a["weight_identity"],
    )
    params, trace = train_adjustor(pairs, frontal, tuned, enc, acfg, seed=cfg["seed"], domain=dom)
    save_adjustor(params, stage_dir / "adjustor")
    save_generator(tuned, stage_dir / "generator_tuned")
    write_trace_csv(stage_dir / "trace.csv", trace, ["iteration", "loss"])
    write_trace_csv(stage_dir / "pivotal_trace.csv", pti_trace, ["iteration", "loss"])
    return {
        "adjustor": "adjustor",
        "generator_tuned": "generator_tuned",
        "trace": "trace.csv",
        "pivotal_trace": "pivotal_trace.csv",
    }


def _stage_train_mapper(cfg, stage_dir, inputs):
    gen = load_generator(inputs["generator"])
    m = cfg["mapper"]
    mcfg = TrainMapperConfig(iterations=m["iterations"], batch=m["batch"], lr=m["lr"])
    mapper, trace, held = train_mapper(gen, mcfg, seed=cfg["seed"])
    save_mapper(mapper, stage_dir / "mapper")
    write_trace_csv(stage_dir / "trace.csv", trace, ["iteration", "loss"])
    write_trace_csv(stage_dir / "held.csv", held, ["iteration", "loss"])
    return {"mapper": "mapper", "trace": "trace.csv", "held": "held.csv"}


def pick_style_column(params: AdjustorParams, domain: ViewDomain, radius: float) -> int:
    """The edit direction should change appearance, not viewpoint: pick the
    basis column whose view-relatedness gate is smallest on average over the
    in-cone grid."""
    from stylefield.adjustor import predict_adjust

    poses = pose_grid(7, 3, (-domain.theta_max, domain.theta_max),
                      (-domain.phi_max, domain.phi_max), radius=radius)
    gates = []
    for pose in poses:
        k, _ = predict_adjust(pose.theta, pose.phi, params)
        gates.append(k)
    mean_gate = torch.stack(gates).mean(dim=0)
    return int(mean_gate.argmin())


def styled_code(params: AdjustorParams, column, strength: float,
                domain: ViewDomain | None = None, radius: float = 1.3) -> LatentCode:
    """Apply a fixed basis-direction edit to the inverted frontal code.

    column "auto" picks the least view-related coordinate; strength is in
    units of that direction's standard deviation sqrt(lambda)."""
    if column == "auto":
        if domain is None:
            raise ValidationError("auto edit column needs the view domain")
        column = pick_style_column(params, domain, radius)
    if not (0 <= int(column) < params.basis.vectors.shape[1]):
        raise ValidationError(f"edit column {column} outside basis width")
    column = int(column)
    sigma = float(params.basis.lambdas[column].clamp(min=1e-12).sqrt())
    return params.base_code.shifted(strength * sigma * params.basis.vectors[:, column])


def _stage_stylize(cfg, stage_dir, inputs):
    field = load_field(inputs["field"])
    params = load_adjustor(inputs["adjustor"])
    tuned = load_generator(inputs["generator_tuned"])
    base_gen = load_generator(inputs["generator"])
    mapper = load_mapper(inputs["mapper"], base_gen.config)
    dom = domain_from_config(cfg)
    sc = cfg["scene"]
    spec = _scene_spec(cfg)
    poses = spec.poses()
    code = styled_code(
        params, cfg["stylize"]["edit_column"], cfg["stylize"]["edit_strength"],
        domain=dom, radius=sc["radius"],
    )
    guides = assemble_sets(
        field,
        params,
        mapper,
        tuned,
        code,
        poses,
        dom,
        spec.intrinsics,
        spec.resolution,
        stage=cfg["stylize"]["stage"],
        jitter_seed=derive_seed(cfg["seed"], "stylize"),
        mapper_gen=base_gen,
    )
    save_stylized(guides, stage_dir / "guides")
    return {"guides": "guides"}


def _stage_finetune(cfg, stage_dir, inputs):
    field = load_field(inputs["field"])
    guides = load_stylized(inputs["guides"])
    ori = load_dataset(inputs["scene"])
    f = cfg["finetune"]
    fcfg = FinetuneConfig(
        iterations=f["iterations"],
        rays_per_step=f["rays_per_step"],
        patch=f["patch"],
        lr=f["lr"],
        lambda_depth=f["lambda_depth"],
        disable_style="style" in f["disable"],
        disable_br="br" in f["disable"],
        disable_ori="ori" in f["disable"],
        disable_depth="depth" in f["disable"],
    )
    field, _, trace = finetune(field, guides, ori, fcfg, seed=cfg["seed"])
    save_field(field, stage_dir / "field")
    write_trace_csv(
        stage_dir / "losses.csv", trace, ["iteration", "style", "br", "ori", "depth", "total"]
    )
    return {"field": "field", "losses": "losses.csv"}


def _stage_eval(cfg, stage_dir, inputs):
    from stylefield.evaluate import evaluate_run

    report = evaluate_run(cfg, inputs, stage_dir)
    return report


STAGE_BODIES = {
    "synth": _stage_synth,
    "train-nerf": _stage_train_nerf,
    "train-gen": _stage_train_gen,
    "train-encoder": _stage_train_encoder,
    "decompose": _stage_decompose,
    "train-adjustor": _stage_train_adjustor,
    "train-mapper": _stage_train_mapper,
    "stylize": _stage_stylize,
    "finetune": _stage_finetune,
    "eval": _stage_eval,
}


def _input_paths(out_dir: Path, stage: str) -> dict[str, Path]:
    paths = {}
    for entry in STAGE_INPUTS[stage]:
        src_stage, output = entry[0], entry[1]
        alias = entry[2] if len(entry) > 2 else output
        manifest_path = out_dir / src_stage / "manifest.json"
        if not manifest_path.exists():
            raise ValidationError(
                f"stage {stage!r} needs {src_stage!r} to run first (missing {manifest_path})"
            )
        manifest = json.loads(manifest_path.read_text())
        paths[alias] = out_dir / src_stage / manifest["outputs"][output]
    return paths


def run_stage(cfg: dict, out_dir, stage: str, force: bool = False) -> dict:
    """Run one stage (or reuse its cache). Returns the manifest dict."""
    if stage not in STAGE_BODIES:
        raise ValidationError(f"unknown stage {stage!r}")
    out_dir = Path(out_dir)
    stage_dir = out_dir / stage
    manifest_path = stage_dir / "manifest.json"
    cfg_hash = _config_hash(cfg, stage)
    input_paths = _input_paths(out_dir, stage)
    input_hashes = {name: artifact_hash(p) for name, p in input_paths.items()}

    if manifest_path.exists() and not force:
        old = json.loads(manifest_path.read_text())
        if old.get("config_hash") == cfg_hash and old.get("input_hashes") == input_hashes:
            missing = [
                o for o in old["outputs"].values() if not (stage_dir / o).exists()
            ]
            if not missing:
                old["cache_hit"] = True
                return old

    stage_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    outputs = STAGE_BODIES[stage](cfg, stage_dir, {k: str(v) for k, v in input_paths.items()})
    wall = time.time() - t0
    manifest = {
        "run_id": out_dir.name,
        "stage": stage,
        "config": {k: cfg[k] for k in STAGE_CONFIG_KEYS[stage]},
        "config_hash": cfg_hash,
        "seed": cfg["seed"],
        "input_hashes": input_hashes,
        "outputs": outputs,
        "output_hashes": {k: artifact_hash(stage_dir / v) for k, v in outputs.items()},
        "timing": {"wall_seconds": wall},
        "cache_hit": False,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def run_pipeline(cfg: dict, out_dir, stages=None, force: bool = False, progress=None) -> list[dict]:
    """Execute stages in dependency order; unchanged stages cache-hit."""
    if cfg.get("strict"):
        apply_strict_mode()
    manifests = []
    for stage in stages or STAGE_ORDER:
        if progress is not None:
            progress(stage)
        manifests.append(run_stage(cfg, out_dir, stage, force=force))
    return manifests
