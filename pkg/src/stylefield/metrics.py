"""Image quality metrics and evaluation reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from stylefield.errors import ValidationError

PSNR_CAP = 99.0
_LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images report the
    99 dB cap instead of infinity."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _window_filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    h, w = img.shape
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        for j in range(k):
            out += win[i, j] * img[i : i + h - k + 1, j : j + w - k + 1]
    return out


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed structural similarity on luma: 11-wide Gaussian window,
    constants (0.01 R)^2 and (0.03 R)^2 with R = 1, mean over windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a @ _LUMA
        b = b @ _LUMA
    win = _gaussian_window()
    if a.shape[0] < win.shape[0] or a.shape[1] < win.shape[0]:
        raise ValidationError("image smaller than the SSIM window")
    mu_a = _window_filter(a, win)
    mu_b = _window_filter(b, win)
    saa = _window_filter(a * a, win) - mu_a**2
    sbb = _window_filter(b * b, win) - mu_b**2
    sab = _window_filter(a * b, win) - mu_a * mu_b
    c1, c2 = 0.01**2, 0.03**2
    val = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    return float(val.mean())


@dataclass
class EvalReport:
    rows: list[dict] = dc_field(default_factory=list)  # per-view metric rows
    thresholds: dict = dc_field(default_factory=dict)

    def add(self, **kv) -> None:
        self.rows.append(kv)

    def aggregate(self, key: str) -> float:
        vals = [r[key] for r in self.rows if key in r]
        if not vals:
            raise ValidationError(f"no rows carry {key!r}")
        return float(np.mean(vals))

    def summary(self) -> dict:
        keys = sorted({k for r in self.rows for k in r if isinstance(r[k], (int, float))})
        agg = {k: self.aggregate(k) for k in keys}
        passes = {}
        for name, (key, op, bound) in self.thresholds.items():
            value = agg[key]
            passes[name] = bool(value >= bound) if op == ">=" else bool(value <= bound)
        return {"aggregates": agg, "passes": passes}
