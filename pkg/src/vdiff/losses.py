"""Training objectives over [T, C, H, W] videos and [T, D] latents."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .numerics import ShapeError, fft2d


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(hq: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-frame mean absolute error, summed over frames."""
    _same_shape(hq, gt, "l1_loss")
    return (hq - gt).abs().flatten(1).mean(dim=1).sum()


def msfr_loss(hq: torch.Tensor, gt: torch.Tensor, scales: int = 3) -> torch.Tensor:
    """Multi-scale L1 distance between 2D spectra.

    Scale k is obtained by k-1 rounds of 2x average pooling. Each scale's
    summed |d_re| + |d_im| over channels and bins is divided by its pixel
    count H_k * W_k; results are summed over scales and frames.
    """
    _same_shape(hq, gt, "msfr_loss")
    if scales < 1:
        raise ValueError("msfr_loss: need at least one scale")
    h, w = hq.shape[-2:]
    if min(h, w) < 2 ** (scales - 1):
        raise ShapeError(f"msfr_loss: {h}x{w} frames cannot be pooled {scales - 1} times")
    total = hq.new_zeros(())
    a, b = hq, gt
    for k in range(scales):
        if k:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
        re_a, im_a = fft2d(a)
        re_b, im_b = fft2d(b)
        dist = (re_a - re_b).abs() + (im_a - im_b).abs()
        total = total + dist.sum() / (a.shape[-2] * a.shape[-1])
    return total


def deblur_loss(hq, gt, lam: float = 0.1, scales: int = 3) -> torch.Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    l1 = l1_loss(hq, gt)
    if lam == 0:
        return l1
    return l1 + lam * msfr_loss(hq, gt, scales)


def diff_loss(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    """L1 between target and sampled latents, per-frame mean summed over frames."""
    _same_shape(z, z_hat, "diff_loss")
    return (z - z_hat).abs().mean(dim=1).sum()


def total_loss(hq, gt, z, z_hat, lam: float = 0.1, scales: int = 3) -> torch.Tensor:
    return deblur_loss(hq, gt, lam, scales) + diff_loss(z, z_hat)
