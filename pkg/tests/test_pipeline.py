"""Stage graph contracts on a micro configuration: caching, selective
re-runs, manifest completeness."""

import json
from pathlib import Path

import pytest

from stylefield.config import load_config
from stylefield.errors import ValidationError
from stylefield.pipeline import STAGE_ORDER, run_pipeline, run_stage

MICRO = {
    "scene": {"theta_count": 4, "phi_count": 2, "gan_variants": 3, "gan_poses_per_variant": 4},
    "nerf": {"iterations": 40, "holdout_every": 4, "rays_per_step": 64},
    "gan": {"iterations": 10, "batch": 2},
    "encoder": {"iterations": 12, "refine_iterations": 4},
    "decomp": {"n_latents": 128, "top_k": 6},
    "pivotal": {"iterations": 4},
    "adjustor": {"iterations": 6, "batch": 1},
    "mapper": {"iterations": 8},
    "finetune": {"iterations": 10, "rays_per_step": 32, "patch": 4},
    "eval": {"oracle_iterations": 60},
}


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro")
    cfg = load_config(None, MICRO)
    manifests = run_pipeline(cfg, out)
    return cfg, out, manifests


def test_all_stages_complete(micro_run):
    cfg, out, manifests = micro_run
    assert [m["stage"] for m in manifests] == STAGE_ORDER
    for m in manifests:
        stage_dir = out / m["stage"]
        assert (stage_dir / "manifest.json").exists()
        for rel in m["outputs"].values():
            assert (stage_dir / rel).exists()
        assert set(m["output_hashes"]) == set(m["outputs"])


def test_reinvocation_is_all_cache_hits(micro_run):
    cfg, out, _ = micro_run
    manifests = run_pipeline(cfg, out)
    assert all(m.get("cache_hit") for m in manifests)


def test_lambda_change_reruns_exactly_finetune_and_eval(micro_run):
    cfg, out, _ = micro_run
    cfg2 = json.loads(json.dumps(cfg))
    cfg2["finetune"]["lambda_depth"] = 0.5
    manifests = run_pipeline(cfg2, out)
    rerun = [m["stage"] for m in manifests if not m.get("cache_hit")]
    assert rerun == ["finetune", "eval"]
    # and back: the original manifests are stale now, so they re-run again
    manifests = run_pipeline(cfg, out)
    rerun = [m["stage"] for m in manifests if not m.get("cache_hit")]
    assert rerun == ["finetune", "eval"]


def test_eval_report_reconciles_with_rows(micro_run):
    cfg, out, _ = micro_run
    report = json.loads((out / "eval" / "report.json").read_text())
    rows_text = (out / "eval" / "rows.csv").read_text().strip().splitlines()
    header = rows_text[0].split(",")
    col = header.index("preserve_psnr")
    vals = [float(r.split(",")[col]) for r in rows_text[1:] if r.split(",")[col] != ""]
    mean = sum(vals) / len(vals)
    assert abs(mean - report["aggregates"]["preserve_psnr"]) < 1e-9


def test_unknown_stage_rejected(micro_run):
    cfg, out, _ = micro_run
    with pytest.raises(ValidationError):
        run_stage(cfg, out, "not-a-stage")


def test_missing_dependency_rejected(tmp_path):
    cfg = load_config(None, MICRO)
    with pytest.raises(ValidationError):
        run_stage(cfg, tmp_path, "train-nerf")


def test_manifest_records_timing_and_seed(micro_run):
    _, out, manifests = micro_run
    for m in manifests:
        assert "wall_seconds" in m["timing"]
        assert m["seed"] == 0
