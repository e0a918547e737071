"""Wavelet-aware dynamic transformer backbone.

Feature tensors are videos laid out [T, C, H, W]; the prior is [T, D].
Temporal (3D) convolutions run on the [C, T, H, W] view, spatial (2D) ones
batch over frames with weights shared along time.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .numerics import DTYPE, ShapeError
from .wavelet import WaveletPyramid, analyze, synthesize
from .wbpf import BidirectionalFuse


@dataclass
class WadtConfig:
    channels: int = 8
    n1: int = 2
    n2: int = 1
    heads: int = 1
    prior_dim: int = 32
    wbpf_blocks: int = 3
    global_residual: bool = True
    zero_tail: bool = False         # start as the identity map (needs global_residual)

    def __post_init__(self):
        if self.channels % (4 * self.heads):
            raise ValueError(f"channels={self.channels} must be divisible by 4*heads={4 * self.heads}")
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("n1 and n2 must be >= 1")


def video_conv3d(x: torch.Tensor, conv: nn.Conv3d) -> torch.Tensor:
    """Apply a Conv3d module to a [T, C, H, W] video, returning [T, C', H, W]."""
    return nx.conv3d(x.transpose(0, 1), conv.weight, conv.bias).transpose(0, 1)


def frame_conv2d(x: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
    return nx.conv2d(x, conv.weight, conv.bias, groups=conv.groups)


class PriorModulation(nn.Module):
    """F_hat = (W1 z) * LN(F) + W2 z, LN over channels at each pixel."""

    def __init__(self, channels: int, prior_dim: int):
        super().__init__()
        self.channels, self.prior_dim = channels, prior_dim
        self.scale = nn.Linear(prior_dim, channels, dtype=DTYPE)
        self.shift = nn.Linear(prior_dim, channels, dtype=DTYPE)
        with torch.no_grad():
            self.scale.bias.fill_(1.0)

    def forward(self, f: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if f.dim() != 4 or f.shape[1] != self.channels:
            raise ShapeError(f"modulate: expected [T, {self.channels}, H, W], got {tuple(f.shape)}")
        if z.shape != (f.shape[0], self.prior_dim):
            raise ShapeError(f"modulate: prior shape {tuple(z.shape)} does not match "
                             f"{f.shape[0]} frames x {self.prior_dim}")
        s = F.linear(z, self.scale.weight, self.scale.bias)[:, :, None, None]
        b = F.linear(z, self.shift.weight, self.shift.bias)[:, :, None, None]
        return s * nx.layernorm(f, dims=1) + b


class WadMSA(nn.Module):
    """Prior-modulated transposed (channel) attention with residual."""

    def __init__(self, channels: int, prior_dim: int, heads: int = 1):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must be divisible by heads")
        self.channels, self.heads = channels, heads
        self.mod = PriorModulation(channels, prior_dim)
        self.qkv3 = nn.Conv3d(channels, 3 * channels, 3, padding=1, dtype=DTYPE)
        self.qkv2 = nn.Conv2d(3 * channels, 3 * channels, 3, padding=1, groups=3 * channels, dtype=DTYPE)
        self.proj = nn.Conv2d(channels, channels, 1, dtype=DTYPE)
        # inverse temperature = exp(log_temp) > 0
        self.log_temp = nn.Parameter(torch.zeros(heads, dtype=DTYPE))

    def qkv(self, f_hat):
        qkv = frame_conv2d(video_conv3d(f_hat, self.qkv3), self.qkv2)
        return qkv.chunk(3, dim=1)

    def attention(self, q, k):
        """Per frame and head, a (c x c) row-stochastic matrix over key channels."""
        t, c, h, w = q.shape
        ch = c // self.heads
        q = F.normalize(q.reshape(t, self.heads, ch, h * w), dim=-1)
        k = F.normalize(k.reshape(t, self.heads, ch, h * w), dim=-1)
        logits = nx.matmul(q, k.transpose(-2, -1)) * self.log_temp.exp()[None, :, None, None]
        return nx.softmax(logits, dim=-1)

    def forward(self, f: torch.Tensor, z: torch.Tensor, return_attention: bool = False):
        q, k, v = self.qkv(self.mod(f, z))
        attn = self.attention(q, k)
        t, c, h, w = v.shape
        out = nx.matmul(attn, v.reshape(t, self.heads, c // self.heads, h * w)).reshape(t, c, h, w)
        out = frame_conv2d(out, self.proj) + f
        return (out, attn) if return_attention else out


class WadFFN(nn.Module):
    """Gated conv feed-forward over the prior-modulated feature.

    out = gelu(W2a W3a F_hat) * (W2b W3b F_hat) + F_hat
    """

    def __init__(self, channels: int, prior_dim: int):
        super().__init__()
        self.mod = PriorModulation(channels, prior_dim)
        self.gate3 = nn.Conv3d(channels, channels, 3, padding=1, dtype=DTYPE)
        self.gate2 = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, dtype=DTYPE)
        self.value3 = nn.Conv3d(channels, channels, 3, padding=1, dtype=DTYPE)
        self.value2 = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, dtype=DTYPE)

    def forward(self, f: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        f_hat = self.mod(f, z)
        gate = nx.gelu(frame_conv2d(video_conv3d(f_hat, self.gate3), self.gate2))
        value = frame_conv2d(video_conv3d(f_hat, self.value3), self.value2)
        return gate * value + f_hat


class WadtLayer(nn.Module):
    def __init__(self, channels: int, prior_dim: int, heads: int = 1):
        super().__init__()
        self.msa = WadMSA(channels, prior_dim, heads)
        self.ffn = WadFFN(channels, prior_dim)

    def forward(self, f, z):
        return self.ffn(self.msa(f, z), z)


class Wadt(nn.Module):
    """Shallow Conv3D -> WT -> WT -> N1 layers -> IWT -> WBPF -> N2 layers -> IWT -> Conv3D."""

    def __init__(self, cfg: WadtConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.shallow = nn.Conv3d(3, c, 3, padding=1, dtype=DTYPE)
        self.layers1 = nn.ModuleList(WadtLayer(c, cfg.prior_dim, cfg.heads) for _ in range(cfg.n1))
        self.fuse = BidirectionalFuse(c, cfg.wbpf_blocks)
        self.layers2 = nn.ModuleList(WadtLayer(c, cfg.prior_dim, cfg.heads) for _ in range(cfg.n2))
        self.tail = nn.Conv3d(c, 3, 3, padding=1, dtype=DTYPE)
        if cfg.zero_tail:
            nn.init.zeros_(self.tail.weight)
            nn.init.zeros_(self.tail.bias)

    def forward(self, v_blur: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if v_blur.dim() != 4 or v_blur.shape[1] != 3:
            raise ShapeError(f"wadt_forward: expected [T, 3, H, W], got {tuple(v_blur.shape)}")
        t, _, h, w = v_blur.shape
        ph, pw = (-h) % 4, (-w) % 4
        x = F.pad(v_blur, (0, pw, 0, ph), mode="replicate") if (ph or pw) else v_blur

        f_in = video_conv3d(x, self.shallow)
        p1 = analyze(f_in)
        p2 = analyze(p1.approx)
        f = p2.approx
        for layer in self.layers1:
            f = layer(f, z)
        f = synthesize(WaveletPyramid(f, p2.detail, p2.original_hw))
        f = self.fuse(f)
        if not torch.isfinite(f).all():
            # the gated recurrence is multiplicative and can overflow on a wildly off prior
            raise FloatingPointError("wadt: propagated features overflowed; the prior is far outside "
                                     "the trained range (undertrained prior generator?)")
        for layer in self.layers2:
            f = layer(f, z)
        f = synthesize(WaveletPyramid(f, p1.detail, p1.original_hw))
        out = video_conv3d(f, self.tail)[..., :h, :w]
        return out + v_blur if self.cfg.global_residual else out


def wadt_forward(v_blur: torch.Tensor, z: torch.Tensor, model: Wadt) -> torch.Tensor:
    return model(v_blur, z)
