"""Supervised pose regressor used as the measurement oracle for view error.

Trained on labeled procedural renders; predicts (sin t, cos t, phi) so the
azimuth estimate has no wrap discontinuity. Ships its own held-out validation
error, which reports alongside any measurement made with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from stylefield.errors import ValidationError
from stylefield.seeding import derive_seed, generator, init_module


@dataclass(frozen=True)
class OracleTrainConfig:
    iterations: int = 1500
    batch: int = 16
    lr: float = 1e-3
    val_fraction: float = 0.15


class PoseOracle(nn.Module):
    def __init__(self, resolution: int = 64):
        super().__init__()
        self.resolution = resolution
        chans = (16, 32, 64, 96)
        convs = []
        prev = 3
        for c in chans:
            convs.append(nn.Conv2d(prev, c, 3, stride=2, padding=1))
            prev = c
        self.convs = nn.ModuleList(convs)
        feat = chans[-1] * (resolution // 2 ** len(chans)) ** 2
        self.fc1 = nn.Linear(feat, 64)
        self.fc2 = nn.Linear(64, 3)  # sin theta, cos theta, phi
        self.validation_error_deg: float | None = None

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.fc2(F.leaky_relu(self.fc1(x.flatten(1)), 0.2))

    def predict_angles(self, images: torch.Tensor) -> np.ndarray:
        """(N, 2) array of (theta, phi) in radians."""
        with torch.no_grad():
            out = self(images)
        theta = torch.atan2(out[:, 0], out[:, 1])
        return torch.stack([theta, out[:, 2]], dim=-1).numpy()


def _to_batch(images) -> torch.Tensor:
    arr = np.stack([im.transpose(2, 0, 1) for im in images])
    return torch.from_numpy(arr).float()


def angle_error_deg(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean of (|wrapped dtheta| + |dphi|) / 2 in degrees."""
    dt = np.angle(np.exp(1j * (pred[:, 0] - target[:, 0])))
    dp = pred[:, 1] - target[:, 1]
    return float(np.degrees(0.5 * (np.abs(dt) + np.abs(dp))).mean())


def train_pose_oracle(datasets, config: OracleTrainConfig | None = None, seed: int = 0) -> PoseOracle:
    """Fit on every frame of the given datasets; stores held-out validation
    error (degrees MAE) on the model."""
    cfg = config or OracleTrainConfig()
    images, targets = [], []
    resolution = None
    for ds in datasets:
        h, w = ds.resolution
        resolution = h if resolution is None else resolution
        if (h, w) != (resolution, resolution):
            raise ValidationError("oracle datasets must share a square resolution")
        for fr in ds.frames:
            images.append(fr.image)
            targets.append((fr.pose.theta, fr.pose.phi))
    if len(images) < 8:
        raise ValidationError("too few labeled frames for the oracle")
    x = _to_batch(images)
    t = torch.tensor(targets, dtype=torch.float32)
    y = torch.stack([t[:, 0].sin(), t[:, 0].cos(), t[:, 1]], dim=-1)

    n = x.shape[0]
    perm = torch.randperm(n, generator=generator(seed, "oracle-split"))
    n_val = max(1, int(n * cfg.val_fraction))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    oracle = PoseOracle(resolution)
    init_module(oracle, derive_seed(seed, "oracle-init"))
    opt = torch.optim.Adam(oracle.parameters(), lr=cfg.lr)
    rng = generator(seed, "oracle-batch")
    for _ in range(cfg.iterations):
        sel = train_idx[torch.randint(0, len(train_idx), (cfg.batch,), generator=rng)]
        loss = F.mse_loss(oracle(x[sel]), y[sel])
        opt.zero_grad()
        loss.backward()
        opt.step()
    pred = oracle.predict_angles(x[val_idx])
    oracle.validation_error_deg = angle_error_deg(pred, t[val_idx].numpy())
    return oracle


def pose_error(images, target_angles, oracle: PoseOracle) -> dict:
    """Mean absolute angular error (degrees) of oracle estimates vs targets.

    target_angles is a sequence of (theta, phi). The report carries the
    oracle's own validation error as the measurement error bar.
    """
    if oracle.validation_error_deg is None:
        raise ValidationError("oracle has not been trained")
    x = _to_batch(images)
    pred = oracle.predict_angles(x)
    target = np.asarray(target_angles, dtype=np.float64)
    return {
        "error_deg": angle_error_deg(pred, target),
        "oracle_validation_deg": oracle.validation_error_deg,
        "per_view_deg": [
            float(np.degrees(0.5 * (abs(np.angle(np.exp(1j * (p[0] - t[0])))) + abs(p[1] - t[1]))))
            for p, t in zip(pred, target)
        ],
    }


def mean_pairwise_distance_deg(target_angles) -> float:
    """Baseline for shuffled targets: mean pairwise (|dtheta| + |dphi|) / 2."""
    t = np.asarray(target_angles, dtype=np.float64)
    n = len(t)
    total = 0.0
    for i in range(n):
        dt = np.abs(np.angle(np.exp(1j * (t[i, 0] - t[:, 0]))))
        dp = np.abs(t[i, 1] - t[:, 1])
        total += float(np.degrees(0.5 * (dt + dp)).sum())
    return total / (n * n)
