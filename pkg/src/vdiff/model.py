"""The assembled restoration model: encoders, noise predictor and backbone."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from .diffusion import LatentEncoder, NoisePredictor, NoiseSchedule, sample_prior
from .wadt import Wadt, WadtConfig

PRIOR_MODES = ("oracle", "sampled", "zero")


@dataclass
class ModelConfig:
    channels: int = 8
    n1: int = 2
    n2: int = 1
    heads: int = 1
    latent_channels: int = 8        # prior dim is 4x this
    wbpf_blocks: int = 3
    encoder_width: int = 16
    encoder_depth: int = 3
    predictor_hidden: int = 128
    embed_dim: int = 16
    diffusion_steps: int = 4
    beta_start: float = 0.1
    beta_end: float = 0.99
    global_residual: bool = True
    zero_tail: bool = False
    use_prior: bool = True

    @property
    def prior_dim(self) -> int:
        return 4 * self.latent_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def schedule(self, steps: int | None = None) -> NoiseSchedule:
        return NoiseSchedule.linear(steps or self.diffusion_steps, self.beta_start, self.beta_end)


class VDDiff(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.prior_dim
        self.le = LatentEncoder(d, cfg.encoder_width, cfg.encoder_depth)
        self.ce = LatentEncoder(d, cfg.encoder_width, cfg.encoder_depth)
        self.denoiser = NoisePredictor(d, cfg.predictor_hidden, cfg.embed_dim)
        self.wadt = Wadt(WadtConfig(cfg.channels, cfg.n1, cfg.n2, cfg.heads, d,
                                    cfg.wbpf_blocks, cfg.global_residual, cfg.zero_tail))

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0) -> "VDDiff":
        """Construct with parameters drawn from a fixed seed, leaving global RNG untouched."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(cfg)

    def zero_prior(self, video: torch.Tensor) -> torch.Tensor:
        return video.new_zeros((video.shape[0], self.cfg.prior_dim))

    def sample(self, blur: torch.Tensor, seed: int, steps: int | None = None) -> torch.Tensor:
        c = self.ce(blur)
        return sample_prior(c, self.cfg.schedule(steps), self.denoiser, seed)

    def prior(self, blur, gt=None, mode: str = "sampled", seed: int = 0, steps: int | None = None):
        if mode not in PRIOR_MODES:
            raise ValueError(f"unknown prior mode {mode!r}")
        if mode == "zero" or not self.cfg.use_prior:
            return self.zero_prior(blur)
        if mode == "oracle":
            if gt is None:
                raise ValueError("oracle prior needs the sharp video")
            return self.le(gt)
        return self.sample(blur, seed, steps)

    def restore(self, blur, prior) -> torch.Tensor:
        return self.wadt(blur, prior)

    def stage_parameters(self, stage: int) -> list[tuple[str, nn.Parameter]]:
        """Trainable (name, parameter) pairs for a training stage."""
        prefixes = {1: ("le.", "wadt."), 2: ("ce.", "denoiser."), 3: ("ce.", "denoiser.", "wadt.")}[stage]
        if not self.cfg.use_prior:
            prefixes = ("wadt.",)
        return [(n, p) for n, p in self.named_parameters() if n.startswith(prefixes)]
