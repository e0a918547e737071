"""Three-stage training, evaluation, and model <-> checkpoint plumbing."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError
from .datakit import Clip
from .losses import deblur_loss, diff_loss, l1_loss, msfr_loss
from .metrics import psnr, ssim
from .model import ModelConfig, VDDiff
from .numerics import DTYPE

log = logging.getLogger(__name__)

LOG_COLUMNS = {
    1: ("step", "loss", "l1", "msfr"),
    2: ("step", "loss", "diff"),
    3: ("step", "loss", "deblur", "diff", "l1", "msfr"),
}


@dataclass
class TrainStageConfig:
    stage: int = 1
    steps: int = 300
    lr: float = 3e-3
    weight_decay: float = 4e-5
    batch_size: int = 1
    seq_len: int = 4
    eval_seq_len: int = 4
    lam: float = 0.1
    msfr_scales: int = 3
    seed: int = 0
    flips: bool = True
    clip_grad: float = 1.0          # max global grad norm; 0 disables

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.msfr_scales < 1:
            raise ValueError("msfr_scales must be >= 1")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "TrainStageConfig":
        """Desk defaults for one stage, with keyword overrides."""
        return cls(**{"stage": stage, **STAGE_DEFAULTS[stage], **overrides})


# stage two only fits a small MLP and is cheap per step, but needs many steps
STAGE_DEFAULTS = {
    1: {"steps": 300, "lr": 3e-3},
    2: {"steps": 3000, "lr": 1e-3},
    3: {"steps": 300, "lr": 5e-4},
}


def model_to_arrays(model: VDDiff) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}


def model_from_checkpoint(ck: Checkpoint) -> VDDiff:
    cfg = ModelConfig.from_dict(ck.config.get("model", {}))
    model = VDDiff(cfg)
    state = model.state_dict()
    missing = sorted(set(state) - set(ck.params))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    model.load_state_dict({k: torch.from_numpy(ck.params[k].copy()) for k in state})
    return model


def to_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(x), dtype=DTYPE)


class Trainer:
    """Runs one stage; holds the optimizer and the data-sampling generator.

    Every random choice (clip, window, flips, diffusion seed) is drawn from a
    single torch generator whose state is saved in checkpoints, so a resumed
    run replays the same loss trace as an uninterrupted one.
    """

    def __init__(self, model: VDDiff, clips: Sequence[Clip], cfg: TrainStageConfig,
                 resume: Checkpoint | None = None):
        if not clips:
            raise ValueError("training dataset is empty")
        if cfg.stage == 2 and not model.cfg.use_prior:
            raise ValueError("stage two trains the prior generator; it is meaningless with use_prior=false")
        short = [c.name for c in clips if c.frames < cfg.seq_len]
        if short:
            raise ValueError(f"clips shorter than seq_len={cfg.seq_len}: {short}")
        self.model, self.cfg = model, cfg
        self.data = [(to_tensor(c.blur), to_tensor(c.gt)) for c in clips]
        self.named = model.stage_parameters(cfg.stage)
        for p in model.parameters():
            p.requires_grad_(False)
        for _, p in self.named:
            p.requires_grad_(True)
        self.opt = torch.optim.AdamW([p for _, p in self.named], lr=cfg.lr, weight_decay=cfg.weight_decay,
                                     foreach=False)
        self.gen = torch.Generator().manual_seed(cfg.seed * 1000 + cfg.stage)
        self.step = 0
        self.schedule = model.cfg.schedule()
        if resume is not None:
            self._restore(resume)

    # -- state -------------------------------------------------------------
    def _restore(self, ck: Checkpoint):
        if ck.stage != self.cfg.stage:
            raise CheckpointError(f"cannot resume stage {self.cfg.stage} from a stage-{ck.stage} checkpoint")
        self.step = ck.step
        if "generator" in ck.rng:
            self.gen.set_state(torch.from_numpy(ck.rng["generator"].copy()))
        for name, p in self.named:
            key = f"exp_avg/{name}"
            if key in ck.optimizer:
                self.opt.state[p] = {
                    "step": torch.tensor(float(ck.optimizer[f"step/{name}"])),
                    "exp_avg": torch.from_numpy(ck.optimizer[key].copy()),
                    "exp_avg_sq": torch.from_numpy(ck.optimizer[f"exp_avg_sq/{name}"].copy()),
                }

    def checkpoint(self, extra_config: dict | None = None) -> Checkpoint:
        opt = {}
        for name, p in self.named:
            st = self.opt.state.get(p)
            if st:
                opt[f"step/{name}"] = np.array(float(st["step"]), dtype=np.float64)
                opt[f"exp_avg/{name}"] = st["exp_avg"].detach().numpy().copy()
                opt[f"exp_avg_sq/{name}"] = st["exp_avg_sq"].detach().numpy().copy()
        config = {"model": self.model.cfg.to_dict(), "train": self.cfg.to_dict()}
        config.update(extra_config or {})
        return Checkpoint(stage=self.cfg.stage, step=self.step, config=config,
                          params=model_to_arrays(self.model), optimizer=opt,
                          rng={"generator": self.gen.get_state().numpy().copy()})

    # -- sampling ----------------------------------------------------------
    def _randint(self, n: int) -> int:
        return int(torch.randint(0, n, (1,), generator=self.gen).item())

    def sample_item(self):
        blur, gt = self.data[self._randint(len(self.data))]
        start = self._randint(blur.shape[0] - self.cfg.seq_len + 1)
        blur, gt = blur[start:start + self.cfg.seq_len], gt[start:start + self.cfg.seq_len]
        if self.cfg.flips:
            if self._randint(2):
                blur, gt = blur.flip(-1), gt.flip(-1)
            if self._randint(2):
                blur, gt = blur.flip(-2), gt.flip(-2)
        seed = self._randint(2 ** 31 - 1)
        return blur, gt, seed

    # -- objectives --------------------------------------------------------
    def item_loss(self, blur, gt, seed) -> tuple[torch.Tensor, dict[str, float]]:
        m, cfg = self.model, self.cfg
        if cfg.stage == 1 or not m.cfg.use_prior:
            z = m.le(gt) if m.cfg.use_prior else m.zero_prior(blur)
            hq = m.restore(blur, z)
            l1 = l1_loss(hq, gt)
            ms = msfr_loss(hq, gt, cfg.msfr_scales)
            loss = l1 + cfg.lam * ms
            if cfg.stage == 3:
                return loss, {"deblur": loss.item(), "diff": 0.0, "l1": l1.item(), "msfr": ms.item()}
            return loss, {"l1": l1.item(), "msfr": ms.item()}
        with torch.no_grad():
            z = m.le(gt)
        z_hat = m.sample(blur, seed)
        ld = diff_loss(z, z_hat)
        if cfg.stage == 2:
            return ld, {"diff": ld.item()}
        hq = m.restore(blur, z_hat)
        l1 = l1_loss(hq, gt)
        ms = msfr_loss(hq, gt, cfg.msfr_scales)
        deb = l1 + cfg.lam * ms
        return deb + ld, {"deblur": deb.item(), "diff": ld.item(), "l1": l1.item(), "msfr": ms.item()}

    def train_step(self) -> dict:
        self.opt.zero_grad(set_to_none=True)
        totals: dict[str, float] = {}
        loss_sum = 0.0
        for _ in range(self.cfg.batch_size):
            blur, gt, seed = self.sample_item()
            loss, parts = self.item_loss(blur, gt, seed)
            (loss / self.cfg.batch_size).backward()
            loss_sum += loss.item() / self.cfg.batch_size
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + v / self.cfg.batch_size
        gnorm = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p in self.named if p.grad is not None))
        if not math.isfinite(gnorm):
            raise FloatingPointError(f"non-finite gradient norm at step {self.step + 1}")
        if self.cfg.clip_grad > 0 and gnorm > self.cfg.clip_grad:
            scale = self.cfg.clip_grad / gnorm
            for _, p in self.named:
                if p.grad is not None:
                    p.grad.mul_(scale)
        self.opt.step()
        self.step += 1
        row = {"step": self.step, "loss": loss_sum, **totals}
        return {k: row[k] for k in LOG_COLUMNS[self.cfg.stage]} | {"grad_norm": gnorm}

    def run(self, on_step: Callable[[dict], None] | None = None,
            on_checkpoint: Callable[["Trainer"], None] | None = None, checkpoint_every: int = 0) -> list[dict]:
        rows = []
        self.model.train()
        while self.step < self.cfg.steps:
            row = self.train_step()
            rows.append(row)
            if on_step:
                on_step(row)
            if checkpoint_every and on_checkpoint and self.step % checkpoint_every == 0:
                on_checkpoint(self)
        for p in self.model.parameters():
            p.requires_grad_(True)
        return rows


def train_stage_one(clips, cfg: TrainStageConfig, model_cfg: ModelConfig | None = None,
                    model_seed: int | None = None, **kw) -> tuple[Checkpoint, list[dict]]:
    cfg = TrainStageConfig.from_dict({**cfg.to_dict(), "stage": 1})
    model = VDDiff.build(model_cfg or ModelConfig(), cfg.seed if model_seed is None else model_seed)
    trainer = Trainer(model, clips, cfg)
    rows = trainer.run(**kw)
    return trainer.checkpoint(), rows


def _train_from(prev: Checkpoint, min_stage: int, stage: int, clips, cfg: TrainStageConfig, **kw):
    if prev is None or prev.stage < min_stage:
        have = None if prev is None else prev.stage
        raise CheckpointError(f"stage {stage} requires a stage-{min_stage} checkpoint (got {have})")
    cfg = TrainStageConfig.from_dict({**cfg.to_dict(), "stage": stage})
    model = model_from_checkpoint(prev)
    trainer = Trainer(model, clips, cfg)
    rows = trainer.run(**kw)
    return trainer.checkpoint(), rows


def train_stage_two(clips, stage1: Checkpoint, cfg: TrainStageConfig, **kw):
    return _train_from(stage1, 1, 2, clips, cfg, **kw)


def train_stage_three(clips, stage2: Checkpoint, cfg: TrainStageConfig, **kw):
    return _train_from(stage2, 2, 3, clips, cfg, **kw)


def default_prior_mode(ck: Checkpoint) -> str:
    cfg = ModelConfig.from_dict(ck.config.get("model", {}))
    if not cfg.use_prior:
        return "zero"
    return "oracle" if ck.stage == 1 else "sampled"


@torch.no_grad()
def restore_clip(model: VDDiff, blur: np.ndarray, gt: np.ndarray | None = None, seq_len: int = 4,
                 mode: str = "sampled", seed: int = 0, steps: int | None = None) -> np.ndarray:
    """Deblur a whole clip in independent chunks of ``seq_len`` frames, clamped to [0, 1]."""
    model.eval()
    b = to_tensor(blur)
    g = to_tensor(gt) if gt is not None else None
    out = []
    for k, start in enumerate(range(0, b.shape[0], seq_len)):
        vb = b[start:start + seq_len]
        vg = g[start:start + seq_len] if g is not None else None
        z = model.prior(vb, vg, mode=mode, seed=seed + k, steps=steps)
        out.append(model.restore(vb, z).clamp(0.0, 1.0))
    return torch.cat(out).numpy()


def evaluate(model: VDDiff, clips: Sequence[Clip], seq_len: int = 4, mode: str = "sampled",
             seed: int = 0, steps: int | None = None) -> list[dict]:
    rows = []
    for i, clip in enumerate(clips):
        hq = restore_clip(model, clip.blur, clip.gt, seq_len, mode, seed + 1009 * i, steps)
        rows.append({"clip": clip.name, "frames": clip.frames,
                     "psnr": psnr(hq, clip.gt), "ssim": ssim(hq, clip.gt)})
    return rows


@torch.no_grad()
def mean_deblur_loss(model: VDDiff, clips: Sequence[Clip], seq_len: int = 4, lam: float = 0.1,
                     scales: int = 3) -> float:
    """Stage-one objective over whole clips (oracle prior, no flips), averaged per chunk."""
    vals = []
    for clip in clips:
        b, g = to_tensor(clip.blur), to_tensor(clip.gt)
        for start in range(0, b.shape[0] - seq_len + 1, seq_len):
            vb, vg = b[start:start + seq_len], g[start:start + seq_len]
            hq = model.restore(vb, model.prior(vb, vg, mode="oracle"))
            vals.append(deblur_loss(hq, vg, lam, scales).item())
    if not vals:
        raise ValueError(f"no clip has {seq_len} frames")
    return sum(vals) / len(vals)


def baseline(clips: Sequence[Clip]) -> list[dict]:
    return [{"clip": c.name, "frames": c.frames, "psnr": psnr(c.blur, c.gt), "ssim": ssim(c.blur, c.gt)}
            for c in clips]


def mean_metric(rows: Sequence[dict], key: str) -> float:
    vals = [r[key] for r in rows]
    return sum(vals) / len(vals) if vals else math.nan
