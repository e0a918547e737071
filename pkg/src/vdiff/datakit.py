"""Synthetic blurry/sharp video pairs and the PNG frame-directory format.

On disk a dataset looks like::

    root/manifest.csv                  clip,split,frames
    root/<clip>/blur/00000.png ...     8-bit RGB
    root/<clip>/gt/00000.png ...
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST = "manifest.csv"


class DatasetError(ValueError):
    pass


@dataclass
class BlurDatasetSpec:
    clips: int = 8
    frames: int = 4
    height: int = 32
    width: int = 32
    blur_window: int = 5            # sharp sub-frames averaged per blurry frame
    velocity: tuple[float, float] = (3.0, 8.0)   # px / frame, uniform range
    direction: float | None = None  # radians; None draws a random heading per clip
    seed: int = 0
    eval_fraction: float = 0.25

    def __post_init__(self):
        if self.blur_window < 1:
            raise ValueError("blur_window must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"resolution {self.height}x{self.width} is below the 8x8 minimum")
        if self.frames < 1 or self.clips < 1:
            raise ValueError("need at least one clip with one frame")
        lo, hi = self.velocity
        if lo < 0 or hi < lo:
            raise ValueError(f"bad velocity range {self.velocity}")


@dataclass
class Clip:
    name: str
    blur: np.ndarray   # [T, 3, H, W] float64 in [0, 1]
    gt: np.ndarray

    @property
    def frames(self) -> int:
        return self.blur.shape[0]


class ValueNoise:
    """Periodic multi-octave value noise evaluated at continuous coordinates."""

    def __init__(self, rng: np.random.Generator, period: int = 64,
                 cells=(8, 4), weights=(0.6, 0.4)):
        self.period = period
        self.octaves = []
        for cell, wgt in zip(cells, weights):
            n = period // cell
            self.octaves.append((cell, wgt, rng.random((3, n, n))))

    @staticmethod
    def _smooth(t):
        return t * t * (3 - 2 * t)

    def __call__(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        out = np.zeros((3,) + y.shape)
        for cell, wgt, lattice in self.octaves:
            n = lattice.shape[-1]
            gy, gx = y / cell, x / cell
            y0, x0 = np.floor(gy), np.floor(gx)
            ty, tx = self._smooth(gy - y0), self._smooth(gx - x0)
            y0 = y0.astype(np.int64) % n
            x0 = x0.astype(np.int64) % n
            y1, x1 = (y0 + 1) % n, (x0 + 1) % n
            top = lattice[:, y0, x0] * (1 - tx) + lattice[:, y0, x1] * tx
            bot = lattice[:, y1, x0] * (1 - tx) + lattice[:, y1, x1] * tx
            out += wgt * (top * (1 - ty) + bot * ty)
        return out


def synthesize_clip(spec: BlurDatasetSpec, index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Render one (blur, gt) pair of [T, 3, H, W] arrays.

    The scene drifts at a constant velocity; each output frame integrates
    ``blur_window`` sub-frames spread evenly over one frame interval and the
    sharp target is the middle sub-frame.
    """
    rng = np.random.default_rng([spec.seed, index])
    texture = ValueNoise(rng)
    speed = rng.uniform(*spec.velocity)
    angle = rng.uniform(0.0, 2 * math.pi)
    if spec.direction is not None:
        angle = spec.direction + (math.pi if angle > math.pi else 0.0)
    vy, vx = speed * math.sin(angle), speed * math.cos(angle)
    oy, ox = rng.uniform(0, texture.period, size=2)

    L = spec.blur_window
    yy, xx = np.meshgrid(np.arange(spec.height, dtype=np.float64),
                         np.arange(spec.width, dtype=np.float64), indexing="ij")
    centre = L // 2
    blur = np.empty((spec.frames, 3, spec.height, spec.width))
    gt = np.empty_like(blur)
    for f in range(spec.frames):
        subs = []
        for j in range(L):
            tau = f + (j - (L - 1) / 2) / L
            subs.append(texture(yy + oy - vy * tau, xx + ox - vx * tau))
        sharp = subs[centre]
        gt[f] = sharp
        # accumulate offsets from the sharp frame so static scenes stay bit-exact
        blur[f] = sharp + sum(s - sharp for s in subs) / L
    return blur, gt


def synthesize_dataset(spec: BlurDatasetSpec) -> list[Clip]:
    width = max(3, len(str(spec.clips - 1)))
    clips = []
    for i in range(spec.clips):
        blur, gt = synthesize_clip(spec, i)
        clips.append(Clip(f"clip_{i:0{width}d}", blur, gt))
    return clips


def split_names(names: list[str], eval_fraction: float) -> dict[str, str]:
    """Trailing clips (sorted order) go to the eval split."""
    names = sorted(names)
    n_eval = 0 if eval_fraction <= 0 else max(1, round(len(names) * eval_fraction))
    n_eval = min(n_eval, len(names) - 1) if len(names) > 1 else n_eval
    return {n: ("eval" if i >= len(names) - n_eval else "train") for i, n in enumerate(names)}


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def _write_frames(frames: np.ndarray, folder: Path):
    folder.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        Image.fromarray(to_uint8(frame).transpose(1, 2, 0), mode="RGB").save(folder / f"{i:05d}.png")


def save_clip(clip: Clip, root) -> Path:
    path = Path(root) / clip.name
    _write_frames(clip.blur, path / "blur")
    _write_frames(clip.gt, path / "gt")
    return path


def write_frames(frames: np.ndarray, folder) -> None:
    _write_frames(frames, Path(folder))


def read_frames(folder) -> np.ndarray:
    folder = Path(folder)
    files = [p for p in folder.iterdir() if p.suffix.lower() == ".png"]
    files.sort(key=lambda p: int(p.stem))
    if not files:
        return np.zeros((0, 3, 0, 0))
    out = []
    for p in files:
        with Image.open(p) as im:
            out.append(np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0)
    return np.stack(out)


def load_clip(path) -> Clip:
    path = Path(path)
    name = path.name
    for sub in ("blur", "gt"):
        if not (path / sub).is_dir():
            raise DatasetError(f"clip {name!r}: missing {sub}/ directory")
    blur, gt = read_frames(path / "blur"), read_frames(path / "gt")
    if len(blur) == 0 or len(gt) == 0:
        raise DatasetError(f"clip {name!r}: no frames")
    if len(blur) != len(gt):
        raise DatasetError(f"clip {name!r}: {len(blur)} blur frames but {len(gt)} gt frames")
    if blur.shape != gt.shape:
        raise DatasetError(f"clip {name!r}: blur/gt frame sizes differ")
    return Clip(name, blur, gt)


def write_manifest(root, clips: list[Clip], splits: dict[str, str]) -> Path:
    path = Path(root) / MANIFEST
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip", "split", "frames"])
        for c in sorted(clips, key=lambda c: c.name):
            w.writerow([c.name, splits.get(c.name, "train"), c.frames])
    return path


def read_manifest(root) -> dict[str, str]:
    path = Path(root) / MANIFEST
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {row["clip"]: row["split"] for row in csv.DictReader(fh)}


def load_dataset(root, split: str | None = None) -> list[Clip]:
    """Load clips sorted by name, optionally filtered by manifest split."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {str(root)!r} does not exist")
    manifest = read_manifest(root)
    names = sorted(d.name for d in root.iterdir() if d.is_dir())
    if split is not None:
        if not manifest:
            raise DatasetError(f"split {split!r} requested but {root}/{MANIFEST} is missing")
        names = [n for n in names if manifest.get(n) == split]
    return [load_clip(root / n) for n in names]


def save_dataset(root, clips: list[Clip], eval_fraction: float = 0.25) -> dict[str, str]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        save_clip(clip, root)
    splits = split_names([c.name for c in clips], eval_fraction)
    write_manifest(root, clips, splits)
    return splits


def quantize(clip: Clip) -> Clip:
    """The clip as it would read back from disk."""
    return Clip(clip.name, to_uint8(clip.blur) / 255.0, to_uint8(clip.gt) / 255.0)


__all__ = [
    "BlurDatasetSpec", "Clip", "DatasetError", "synthesize_clip", "synthesize_dataset",
    "save_clip", "load_clip", "load_dataset", "save_dataset", "write_manifest", "read_manifest",
    "split_names", "read_frames", "write_frames", "to_uint8", "quantize",
]
