"""Bidirectional recurrent propagation over per-frame wavelet features."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .numerics import DTYPE, ShapeError


def _conv(cin, cout, k=3):
    return nn.Conv2d(cin, cout, k, padding=k // 2, dtype=DTYPE)


class ResBlock(nn.Module):
    """conv-ReLU-conv with identity skip, no normalization."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _conv(channels, channels)
        self.conv2 = _conv(channels, channels)

    def forward(self, x):
        h = torch.relu(nx.conv2d(x, self.conv1.weight, self.conv1.bias))
        return x + nx.conv2d(h, self.conv2.weight, self.conv2.bias)


class PoolBranch(nn.Module):
    """AvgPool -> ResBlock -> MaxPool -> ResBlock -> Conv2D.

    Only the average pool downsamples (by 2); the max pool is a 3x3 stride-1
    filter, so the branch output sits at half resolution.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.res1 = ResBlock(channels)
        self.res2 = ResBlock(channels)
        self.conv = _conv(channels, channels)
        with torch.no_grad():
            self.conv.bias.fill_(1.0)

    def forward(self, x):
        h = F.avg_pool2d(x, 2, ceil_mode=True)
        h = self.res1(h)
        h = F.max_pool2d(h, 3, stride=1, padding=1)
        h = self.res2(h)
        return nx.conv2d(h, self.conv.weight, self.conv.bias)


class PropagationCell(nn.Module):
    """One direction of the fuse: (Y_i, X_next) -> Y_next, all [1, C, H, W]."""

    def __init__(self, channels: int, blocks: int = 3, slope: float = 0.1):
        super().__init__()
        self.channels = channels
        self.slope = slope
        self.entry = _conv(2 * channels, 2 * channels)
        self.gate1 = _conv(channels, channels)
        self.gate2 = _conv(channels, channels)
        self.pool = PoolBranch(channels)
        self.trunk = nn.ModuleList(ResBlock(channels) for _ in range(blocks))

    def fuse(self, y, x):
        """Gated fusion F_pro of hidden state and incoming frame."""
        if y.shape != x.shape:
            raise ShapeError(f"propagate_step: hidden {tuple(y.shape)} vs frame {tuple(x.shape)}")
        if x.shape[-3] != self.channels:
            raise ShapeError(f"propagate_step: expected {self.channels} channels, got {x.shape[-3]}")
        xh = nx.leaky_relu(nx.conv2d(torch.cat([y, x], dim=-3), self.entry.weight, self.entry.bias),
                           self.slope)
        x1, x2 = xh[..., :self.channels, :, :], xh[..., self.channels:, :, :]
        g1 = nx.sigmoid(nx.conv2d(x1, self.gate1.weight, self.gate1.bias))
        g2 = nx.sigmoid(nx.conv2d(x2, self.gate2.weight, self.gate2.bias))
        return x1 * g1 + x2 * g2

    def modulate(self, f_pro):
        p = self.pool(f_pro)
        up = F.interpolate(p, size=f_pro.shape[-2:], mode="bilinear", align_corners=False)
        return f_pro * up

    def forward(self, y, x):
        h = self.modulate(self.fuse(y, x))
        for block in self.trunk:
            h = block(h)
        return h


def propagate_step(y: torch.Tensor, x_next: torch.Tensor, cell: PropagationCell) -> torch.Tensor:
    squeeze = x_next.dim() == 3
    if squeeze:
        y, x_next = y.unsqueeze(0), x_next.unsqueeze(0)
    out = cell(y, x_next)
    return out.squeeze(0) if squeeze else out


def run_direction(x: torch.Tensor, cell: PropagationCell, reverse: bool = False) -> torch.Tensor:
    """Recurrent pass over frames of ``x`` [N, C, H, W] starting from a zero state."""
    n = x.shape[0]
    if n < 1:
        raise ShapeError("bidirectional_fuse: empty frame sequence")
    order = range(n - 1, -1, -1) if reverse else range(n)
    y = torch.zeros_like(x[:1])
    outs = [None] * n
    for i in order:
        y = cell(y, x[i:i + 1])
        outs[i] = y
    return torch.cat(outs, dim=0)


class BidirectionalFuse(nn.Module):
    """Forward pass left-to-right, then backward pass right-to-left over its outputs."""

    def __init__(self, channels: int, blocks: int = 3):
        super().__init__()
        self.forward_cell = PropagationCell(channels, blocks)
        self.backward_cell = PropagationCell(channels, blocks)

    def forward(self, x):
        if x.dim() != 4:
            raise ShapeError(f"bidirectional_fuse: expected [N, C, H, W], got {tuple(x.shape)}")
        fwd = run_direction(x, self.forward_cell)
        return run_direction(fwd, self.backward_cell, reverse=True)


def bidirectional_fuse(x: torch.Tensor, fwd: PropagationCell, bwd: PropagationCell) -> torch.Tensor:
    return run_direction(run_direction(x, fwd), bwd, reverse=True)
