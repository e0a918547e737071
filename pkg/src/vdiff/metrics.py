"""PSNR and SSIM for [T, C, H, W] videos (or single [C, H, W] frames)."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .numerics import DTYPE, ShapeError


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = torch.as_tensor(a, dtype=DTYPE), torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mse = torch.mean((a - b) ** 2).item()
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a, b, peak: float = 1.0, win: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM (valid filtering), averaged over channels then frames."""
    a, b = torch.as_tensor(a, dtype=DTYPE), torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a[None], b[None]
    t, c, h, w = a.shape
    win = min(win, h, w)
    win -= 1 - win % 2  # keep it odd
    k = _gaussian_window(win, sigma).expand(c, 1, win, win)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2

    def filt(x):
        return F.conv2d(x, k, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    per_frame = (num / den).flatten(1).mean(dim=1)
    return per_frame.mean().item()
