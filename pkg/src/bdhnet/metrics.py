"""PSNR and SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    per_image: list = field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs, names=None, peak: float = 1.0) -> "MetricReport":
        rows = []
        for i, (a, b) in enumerate(pairs):
            name = names[i] if names is not None else str(i)
            rows.append({"name": name, "psnr": psnr(a, b, peak), "ssim": ssim(a, b, peak)})
        if not rows:
            raise ValueError("no image pairs")
        return cls(float(np.mean([r["psnr"] for r in rows])),
                   float(np.mean([r["ssim"] for r in rows])), rows)


def _squeeze(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    return a


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical images report the 99 dB cap."""
    a, b = _squeeze(a), _squeeze(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5)."""
    a, b = _squeeze(a), _squeeze(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects a grayscale image")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a * mu_a
    s_bb = _filter_valid(b * b, g) - mu_b * mu_b
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))
