import numpy as np
import pytest

from stylefield.errors import ValidationError
from stylefield.oracle import (
    OracleTrainConfig,
    PoseOracle,
    angle_error_deg,
    mean_pairwise_distance_deg,
    pose_error,
    train_pose_oracle,
)
from stylefield.scenes import SceneSpec, synth_scene


@pytest.fixture(scope="module")
def oracle_and_scene():
    spec = SceneSpec(resolution=(32, 32), theta_count=10, phi_count=3, phi_range=(-0.3, 0.3))
    ds = synth_scene(spec, seed=5)
    oracle = train_pose_oracle([ds], OracleTrainConfig(iterations=700, batch=12), seed=2)
    return oracle, ds


def test_untrained_oracle_rejected():
    oracle = PoseOracle(32)
    with pytest.raises(ValidationError):
        pose_error([np.zeros((32, 32, 3), dtype=np.float32)], [(0.0, 0.0)], oracle)


def test_oracle_self_consistency(oracle_and_scene):
    oracle, ds = oracle_and_scene
    images = [fr.image for fr in ds.frames]
    targets = [(fr.pose.theta, fr.pose.phi) for fr in ds.frames]
    report = pose_error(images, targets, oracle)
    assert report["error_deg"] <= report["oracle_validation_deg"] + 1.0
    assert len(report["per_view_deg"]) == len(images)


def test_shuffled_targets_approach_pairwise_baseline(oracle_and_scene):
    oracle, ds = oracle_and_scene
    images = [fr.image for fr in ds.frames]
    targets = [(fr.pose.theta, fr.pose.phi) for fr in ds.frames]
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(targets))
    shuffled = [targets[i] for i in perm]
    rep_true = pose_error(images, targets, oracle)
    rep_shuf = pose_error(images, shuffled, oracle)
    baseline = mean_pairwise_distance_deg(targets)
    assert rep_shuf["error_deg"] > 3.0 * rep_true["error_deg"]
    assert 0.4 * baseline <= rep_shuf["error_deg"] <= 1.6 * baseline


def test_pose_error_deterministic(oracle_and_scene):
    oracle, ds = oracle_and_scene
    images = [fr.image for fr in ds.frames[:5]]
    targets = [(fr.pose.theta, fr.pose.phi) for fr in ds.frames[:5]]
    a = pose_error(images, targets, oracle)
    b = pose_error(images, targets, oracle)
    assert a["error_deg"] == b["error_deg"]


def test_angle_error_wraps():
    pred = np.array([[3.1, 0.0]])
    target = np.array([[-3.1, 0.0]])
    assert angle_error_deg(pred, target) < 5.0  # wraps across +-pi, not 355 deg
