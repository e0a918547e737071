"""Single-level orthonormal 2D Haar transform over [T, C, H, W] videos.

Subband convention for a 2x2 block ``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
    HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2

Details are stacked subband-major along channels: ``[LH | HL | HH]``, each C wide.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .numerics import ShapeError


@dataclass
class WaveletPyramid:
    approx: torch.Tensor        # [T, C, H/2, W/2]
    detail: torch.Tensor        # [T, 3C, H/2, W/2]
    original_hw: tuple[int, int]

    def __add__(self, other: "WaveletPyramid") -> "WaveletPyramid":
        return WaveletPyramid(self.approx + other.approx, self.detail + other.detail, self.original_hw)

    def scale(self, s: float) -> "WaveletPyramid":
        return WaveletPyramid(self.approx * s, self.detail * s, self.original_hw)


def _pad_even(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    if ph or pw:
        # one-sample symmetric pad == edge replication
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x


def analyze(x: torch.Tensor) -> WaveletPyramid:
    if x.dim() != 4:
        raise ShapeError(f"analyze: expected [T, C, H, W], got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"analyze: spatial extents must be >= 2, got {h}x{w}")
    xp = _pad_even(x)
    a = xp[..., 0::2, 0::2]
    b = xp[..., 0::2, 1::2]
    c = xp[..., 1::2, 0::2]
    d = xp[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return WaveletPyramid(ll, torch.cat([lh, hl, hh], dim=1), (h, w))


def synthesize(p: WaveletPyramid) -> torch.Tensor:
    ll, det = p.approx, p.detail
    if ll.dim() != 4 or det.dim() != 4:
        raise ShapeError("synthesize: subbands must be rank 4")
    t, c, h2, w2 = ll.shape
    if det.shape != (t, 3 * c, h2, w2):
        raise ShapeError(f"synthesize: detail shape {tuple(det.shape)} inconsistent with approx {tuple(ll.shape)}")
    oh, ow = p.original_hw
    if not (2 * h2 - 1 <= oh <= 2 * h2 and 2 * w2 - 1 <= ow <= 2 * w2):
        raise ShapeError(f"synthesize: original size {p.original_hw} does not fit subbands {h2}x{w2}")
    lh, hl, hh = det[:, :c], det[:, c:2 * c], det[:, 2 * c:]
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    cc = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    # interleave back to full resolution without in-place writes (autograd friendly)
    top = torch.stack([a, b], dim=-1).reshape(t, c, h2, 2 * w2)
    bot = torch.stack([cc, d], dim=-1).reshape(t, c, h2, 2 * w2)
    full = torch.stack([top, bot], dim=-2).reshape(t, c, 2 * h2, 2 * w2)
    return full[..., :oh, :ow]
