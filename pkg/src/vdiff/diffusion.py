"""Conditional diffusion over compact per-frame latents ([T, D] matrices)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .numerics import DTYPE, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: tuple[float, ...]
    alphas: tuple[float, ...] = field(init=False)
    alpha_bars: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        betas = tuple(float(b) for b in self.betas)
        if not betas:
            raise ValueError("schedule needs at least one step")
        if any(not 0.0 < b < 1.0 for b in betas):
            raise ValueError(f"every beta must lie in (0, 1), got {betas}")
        alphas = tuple(1.0 - b for b in betas)
        bars, acc = [], 1.0
        for a in alphas:
            acc *= a
            bars.append(acc)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", tuple(bars))

    @classmethod
    def linear(cls, steps: int = 4, beta_start: float = 0.1, beta_end: float = 0.99) -> "NoiseSchedule":
        """Linearly spaced betas; a single-step schedule uses ``beta_end``."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if steps == 1:
            return cls((beta_end,))
        return cls(tuple(beta_start + (beta_end - beta_start) * i / (steps - 1) for i in range(steps)))

    @property
    def steps(self) -> int:
        return len(self.betas)

    def _check(self, t: int):
        if not 1 <= t <= self.steps:
            raise ValueError(f"step t={t} outside 1..{self.steps}")

    def beta(self, t):
        self._check(t)
        return self.betas[t - 1]

    def alpha(self, t):
        self._check(t)
        return self.alphas[t - 1]

    def alpha_bar(self, t):
        """Cumulative product up to step t; step 0 is 1 by convention."""
        if t == 0:
            return 1.0
        self._check(t)
        return self.alpha_bars[t - 1]


def forward_diffuse(z0: torch.Tensor, t: int, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """Closed-form sample of z_t given z_0."""
    if noise.shape != z0.shape:
        raise ShapeError(f"forward_diffuse: noise {tuple(noise.shape)} vs latent {tuple(z0.shape)}")
    schedule._check(t)
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


def iterative_forward(z0: torch.Tensor, schedule: NoiseSchedule, noises: Sequence[torch.Tensor]) -> torch.Tensor:
    """Apply q(z_t | z_{t-1}) one step at a time with the supplied draws."""
    if len(noises) != schedule.steps:
        raise ValueError(f"need {schedule.steps} noise draws, got {len(noises)}")
    z = z0
    for t, eps in enumerate(noises, start=1):
        b = schedule.beta(t)
        z = math.sqrt(1.0 - b) * z + math.sqrt(b) * eps
    return z


def posterior_mean(z_t, z0, t: int, schedule: NoiseSchedule):
    """Mean of q(z_{t-1} | z_t, z_0)."""
    ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t - 1)
    b, a = schedule.beta(t), schedule.alpha(t)
    return (math.sqrt(ab_prev) * b / (1 - ab)) * z0 + (math.sqrt(a) * (1 - ab_prev) / (1 - ab)) * z_t


def reverse_step(z_t: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic denoising update z_t -> z_{t-1} (no variance term)."""
    a, ab = schedule.alpha(t), schedule.alpha_bar(t)
    return (z_t - eps * ((1.0 - a) / math.sqrt(1.0 - ab))) / math.sqrt(a)


def timestep_embedding(level: float, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of the noise level 1 - alpha_bar_t, scaled to [0, 1000]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    arg = 1000.0 * level * freqs
    emb = torch.cat([torch.sin(arg), torch.cos(arg)])
    return F.pad(emb, (0, dim - 2 * half))


class NoisePredictor(nn.Module):
    """Per-frame MLP: (z_t, c, embed(t)) -> predicted noise, all rows independent."""

    def __init__(self, prior_dim: int, hidden: int = 64, embed_dim: int = 16):
        super().__init__()
        self.prior_dim, self.embed_dim = prior_dim, embed_dim
        self.fc1 = nn.Linear(2 * prior_dim + embed_dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, prior_dim, dtype=DTYPE)

    def forward(self, z_t: torch.Tensor, c: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
        if z_t.shape != c.shape or z_t.dim() != 2 or z_t.shape[1] != self.prior_dim:
            raise ShapeError(f"predict_noise: z_t {tuple(z_t.shape)} and c {tuple(c.shape)} "
                             f"must both be [T, {self.prior_dim}]")
        emb = timestep_embedding(1.0 - schedule.alpha_bar(t), self.embed_dim)
        h = torch.cat([z_t, c, emb.expand(z_t.shape[0], -1)], dim=1)
        h = nx.gelu(self.fc1(h))
        h = nx.gelu(self.fc2(h))
        return self.out(h)


def predict_noise(z_t, c, t, schedule, predictor: NoisePredictor):
    return predictor(z_t, c, t, schedule)


Predictor = Callable[[torch.Tensor, torch.Tensor, int, NoiseSchedule], torch.Tensor]


def sample_prior(c: torch.Tensor, schedule: NoiseSchedule, predictor: Predictor, seed: int | None = None,
                 z_T: torch.Tensor | None = None) -> torch.Tensor:
    """Run the full reverse chain t = T..1 from Gaussian noise conditioned on ``c``.

    The starting noise comes from a private generator seeded with ``seed``
    unless ``z_T`` is given explicitly.
    """
    if z_T is None:
        if seed is None:
            raise ValueError("sample_prior needs a seed or an explicit z_T")
        gen = torch.Generator().manual_seed(int(seed))
        z_T = torch.randn(c.shape, generator=gen, dtype=DTYPE)
    elif z_T.shape != c.shape:
        raise ShapeError(f"sample_prior: z_T {tuple(z_T.shape)} vs condition {tuple(c.shape)}")
    z = z_T
    for t in range(schedule.steps, 0, -1):
        z = reverse_step(z, predictor(z, c, t, schedule), t, schedule)
    return z


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


class LatentEncoder(nn.Module):
    """Per-frame stride-2 conv stack, global average pool, linear head to D.

    The same class serves as the latent encoder (on sharp frames) and the
    condition encoder (on blurry frames); the two never share weights.
    """

    def __init__(self, prior_dim: int, width: int = 16, depth: int = 3, slope: float = 0.1):
        super().__init__()
        self.depth, self.slope = depth, slope
        chans = [3] + [width] * depth
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, dtype=DTYPE)
                                   for i in range(depth))
        self.head = nn.Linear(width, prior_dim, dtype=DTYPE)

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        if video.dim() != 4 or video.shape[1] != 3:
            raise ShapeError(f"encode_latent: expected [T, 3, H, W], got {tuple(video.shape)}")
        h, w = video.shape[-2:]
        if not (_is_pow2(h) and _is_pow2(w)) or min(h, w) < 2 ** self.depth:
            raise ShapeError(f"encode_latent: H and W must be powers of two >= {2 ** self.depth}, got {h}x{w}")
        x = video
        for conv in self.convs:
            x = nx.leaky_relu(nx.conv2d(x, conv.weight, conv.bias, stride=2, padding=1), self.slope)
        return self.head(x.mean(dim=(-2, -1)))


def encode_latent(video: torch.Tensor, encoder: LatentEncoder) -> torch.Tensor:
    return encoder(video)
