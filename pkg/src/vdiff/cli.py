"""Command-line entry point: ``vdiff {synth,train,infer,eval,ablate}``.

Configuration is a flat set of ``key=value`` pairs. They come from an optional
plain-text file (``--config``, one pair per line, ``#`` comments), then
repeatable ``--set key=value`` overrides, then the dedicated flags. Each
command accepts its own key set and rejects anything else. The effective
configuration is echoed to ``<out>/config.txt``, which can be fed back
through ``--config`` to reproduce the run.

On failure a ``_FAILED`` marker holding the error message is left in the
output directory and the exit status is nonzero.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import torch

from . import datakit
from .checkpoint import Checkpoint, CheckpointError
from .model import PRIOR_MODES, ModelConfig, VDDiff
from .training import (LOG_COLUMNS, STAGE_DEFAULTS, TrainStageConfig, Trainer, baseline,
                       default_prior_mode, evaluate, mean_metric, model_from_checkpoint, restore_clip,
                       train_stage_one, train_stage_three, train_stage_two)

log = logging.getLogger("vdiff")

CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "checkpoint.ckpt"
FAILED_MARKER = "_FAILED"
EXIT_FAILED = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    pass


# -- typed key=value configuration ---------------------------------------------

def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none") else float(s)


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


def _opt_str(s: str) -> str | None:
    return None if s.strip().lower() in ("", "none") else s.strip()


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


DATA_KEYS = {
    "data.clips": Key(int, 8, "number of clips"),
    "data.frames": Key(int, 4, "frames per clip"),
    "data.height": Key(int, 32),
    "data.width": Key(int, 32),
    "data.blur_window": Key(int, 5, "sharp sub-frames averaged per blurry frame"),
    "data.velocity_min": Key(float, 3.0, "px/frame"),
    "data.velocity_max": Key(float, 8.0, "px/frame"),
    "data.direction": Key(_opt_float, None, "radians; none draws a heading per clip"),
    "data.eval_fraction": Key(float, 0.25),
}

_MODEL_DEFAULTS = ModelConfig()
MODEL_KEYS = {
    f"model.{name}": Key(_bool if isinstance(val, bool) else type(val), val)
    for name, val in _MODEL_DEFAULTS.to_dict().items()
}

_TRAIN_DEFAULTS = TrainStageConfig()
TRAIN_KEYS = {
    f"train.{name}": Key(_bool if isinstance(val, bool) else type(val), val)
    for name, val in _TRAIN_DEFAULTS.to_dict().items() if name not in ("stage", "seed", "steps", "lr")
}
# steps / lr default per stage
TRAIN_KEYS["train.steps"] = Key(_opt_int, None, "none = stage default")
TRAIN_KEYS["train.lr"] = Key(_opt_float, None, "none = stage default")

COMMAND_KEYS: dict[str, dict[str, Key]] = {
    "synth": {"seed": Key(int, 0), **DATA_KEYS},
    "train": {
        "seed": Key(int, 0),
        "stage": Key(int, 1),
        "data": Key(_opt_str, None, "dataset root"),
        "split": Key(_opt_str, "train", "manifest split to train on; none = all clips"),
        "init": Key(_opt_str, None, "previous-stage checkpoint (file or training output dir)"),
        "resume": Key(_bool, True, "continue from <out>/checkpoint.ckpt when present"),
        "checkpoint_every": Key(int, 50),
        **MODEL_KEYS,
        **TRAIN_KEYS,
    },
    "infer": {
        "seed": Key(int, 0),
        "checkpoint": Key(_opt_str, None),
        "input": Key(_opt_str, None, "clip dir (uses blur/) or a directory of frames"),
        "seq_len": Key(int, 4),
        "diffusion_steps": Key(_opt_int, None, "none = trained value"),
        "mode": Key(_opt_str, None, "sampled | zero; none = by checkpoint stage"),
    },
    "eval": {
        "seed": Key(int, 0),
        "checkpoint": Key(_opt_str, None, "none = untrained model from model.* keys"),
        "data": Key(_opt_str, None),
        "split": Key(_opt_str, "eval", "none = all clips"),
        "seq_len": Key(int, 4),
        "diffusion_steps": Key(_opt_int, None),
        "mode": Key(_opt_str, None, "oracle | sampled | zero; none = by checkpoint stage"),
        "sweep_steps": Key(_int_list, [1, 2, 4, 8]),
        "sweep_seq_len": Key(_int_list, [1, 2, 4]),
        **MODEL_KEYS,
    },
    "ablate": {
        "seed": Key(int, 0),
        "data": Key(_opt_str, None),
        "seq_len": Key(int, 4),
        "stage1_steps": Key(int, STAGE_DEFAULTS[1]["steps"]),
        "stage2_steps": Key(int, STAGE_DEFAULTS[2]["steps"]),
        "stage3_steps": Key(int, STAGE_DEFAULTS[3]["steps"]),
        "sweep_steps": Key(_int_list, [1, 2, 4, 8]),
        **MODEL_KEYS,
        **{k: v for k, v in TRAIN_KEYS.items() if k not in ("train.steps", "train.lr")},
    },
}

# dedicated flags -> config key, per command
FLAG_KEYS = {
    "seed": {c: "seed" for c in COMMAND_KEYS},
    "stage": {"train": "stage"},
    "steps": {"train": "train.steps"},
    "diffusion_steps": {"train": "model.diffusion_steps", "infer": "diffusion_steps",
                        "eval": "diffusion_steps", "ablate": "model.diffusion_steps"},
    "seq_len": {"train": "train.seq_len", "infer": "seq_len", "eval": "seq_len", "ablate": "seq_len"},
    "data": {"train": "data", "eval": "data", "ablate": "data"},
    "checkpoint": {"infer": "checkpoint", "eval": "checkpoint"},
    "input": {"infer": "input"},
    "init": {"train": "init"},
}


def parse_pairs(lines, source: str) -> list[tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def resolve_config(command: str, config_path: str | None, sets: list[str],
                   flags: dict[str, Any]) -> dict[str, Any]:
    """Merge defaults < config file < --set < dedicated flags; reject unknown keys."""
    keys = COMMAND_KEYS[command]
    cfg = {k: key.default for k, key in keys.items()}
    pairs: list[tuple[str, str, str]] = []
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file {config_path!r} not found")
        pairs += [(k, v, str(path)) for k, v in parse_pairs(path.read_text().splitlines(), str(path))]
    pairs += [(k, v, "--set") for k, v in parse_pairs(sets, "--set")]
    explicit = set()
    for k, v, src in pairs:
        if k not in keys:
            raise ConfigError(f"{src}: unknown key {k!r} for command {command!r}")
        try:
            cfg[k] = keys[k].parse(v)
        except ValueError as e:
            raise ConfigError(f"{src}: bad value for {k!r}: {e}") from None
        explicit.add(k)
    for flag, value in flags.items():
        if value is None:
            continue
        key = FLAG_KEYS[flag].get(command)
        if key is None:
            raise ConfigError(f"--{flag.replace('_', '-')} does not apply to {command!r}")
        cfg[key] = value
        explicit.add(key)
    # the model comes from a checkpoint here, so model.* keys would be silently ignored
    from_checkpoint = ((command == "train" and cfg["stage"] != 1)
                       or (command == "eval" and cfg["checkpoint"]))
    if from_checkpoint:
        given = sorted(explicit & MODEL_KEYS.keys())
        if given:
            raise ConfigError(f"the model is read from a checkpoint; {given} do not apply")
        cfg = {k: v for k, v in cfg.items() if k not in MODEL_KEYS}
    return cfg


def echo_config(out: Path, command: str, cfg: dict[str, Any]) -> Path:
    lines = [f"# vdiff {command}"] + [f"{k}={_fmt(cfg[k])}" for k in sorted(cfg)]
    path = out / CONFIG_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def _section(cfg: dict[str, Any], prefix: str) -> dict[str, Any]:
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def _require(cfg: dict[str, Any], key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"{key!r} is required (use --{key.replace('_', '-')} or --set {key}=...)")
    return cfg[key]


def _num(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def write_csv(path: Path, header: list[str], rows: list[list[Any]]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, float) else v for v in row])
    return path


# -- commands ------------------------------------------------------------------

def dataset_spec(cfg: dict[str, Any]) -> datakit.BlurDatasetSpec:
    d = _section(cfg, "data.")
    return datakit.BlurDatasetSpec(
        clips=d["clips"], frames=d["frames"], height=d["height"], width=d["width"],
        blur_window=d["blur_window"], velocity=(d["velocity_min"], d["velocity_max"]),
        direction=d["direction"], seed=cfg["seed"], eval_fraction=d["eval_fraction"])


def cmd_synth(cfg: dict[str, Any], out: Path) -> int:
    spec = dataset_spec(cfg)
    clips = datakit.synthesize_dataset(spec)
    datakit.save_dataset(out, clips, spec.eval_fraction)
    # report on what actually landed on disk
    mean = mean_metric(baseline([datakit.quantize(c) for c in clips]), "psnr")
    print(f"clips={len(clips)} blur_psnr={_num(mean)}")
    return 0


def _load_clips(root: str, split: str | None) -> list[datakit.Clip]:
    clips = datakit.load_dataset(root, split)
    if not clips:
        raise datakit.DatasetError(f"no clips in {root!r}" + (f" for split {split!r}" if split else ""))
    return clips


def _checkpoint_path(p: str) -> Path:
    path = Path(p)
    return path / CHECKPOINT_NAME if path.is_dir() else path


def _stage_config(cfg: dict[str, Any]) -> TrainStageConfig:
    stage = cfg["stage"]
    if stage not in (1, 2, 3):
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
    train = {k: v for k, v in _section(cfg, "train.").items() if v is not None}
    return TrainStageConfig.for_stage(stage, seed=cfg["seed"], **train)


def _same_run(a: dict, b: dict) -> bool:
    """Two training configs describe the same trajectory (the step budget may differ)."""
    drop = ("steps",)
    return {k: v for k, v in a.items() if k not in drop} == {k: v for k, v in b.items() if k not in drop}


def cmd_train(cfg: dict[str, Any], out: Path) -> int:
    tcfg = _stage_config(cfg)
    stage = tcfg.stage
    clips = _load_clips(_require(cfg, "data"), cfg["split"])
    ck_path = out / CHECKPOINT_NAME
    log_path = out / "loss.csv"
    columns = list(LOG_COLUMNS[stage]) + ["grad_norm"]

    resume = None
    if cfg["resume"] and ck_path.exists():
        resume = Checkpoint.load(ck_path)
        if resume.stage != stage:
            raise CheckpointError(f"{ck_path} holds a stage-{resume.stage} checkpoint, not stage {stage}")
        if not _same_run(resume.config.get("train", {}), tcfg.to_dict()):
            raise ConfigError(f"{ck_path} was written with a different training config; "
                              "use a fresh --out or --set resume=false")
    if resume is not None:
        model = model_from_checkpoint(resume)
    elif stage == 1:
        model = VDDiff.build(ModelConfig.from_dict(_section(cfg, "model.")), tcfg.seed)
    else:
        if not cfg["init"]:
            raise CheckpointError(f"stage {stage} needs a stage-{stage - 1} checkpoint (--init)")
        prev = Checkpoint.load(_checkpoint_path(cfg["init"]))
        if prev.stage < stage - 1:
            raise CheckpointError(f"stage {stage} needs a stage-{stage - 1} checkpoint, "
                                  f"{cfg['init']!r} is stage {prev.stage}")
        model = model_from_checkpoint(prev)

    trainer = Trainer(model, clips, tcfg, resume=resume)
    kept = []
    if resume is not None and log_path.exists():
        # drop rows logged after the checkpoint was taken; they will be replayed
        with open(log_path, newline="") as fh:
            kept = [line for line in fh.read().splitlines()[1:] if line][:resume.step]
    with open(log_path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        fh.writelines(line + "\n" for line in kept)
    extra = {"data": cfg["data"], "split": cfg["split"]}

    def save(t: Trainer):
        t.checkpoint(extra).save(ck_path)

    with open(log_path, "a", newline="") as fh:
        def on_step(row):
            fh.write(",".join(str(row[c]) if c == "step" else _num(row[c]) for c in columns) + "\n")
            fh.flush()
            if row["step"] % 50 == 0 or row["step"] == 1:
                log.info("stage %d step %d loss %.5f", stage, row["step"], row["loss"])

        trainer.run(on_step=on_step, on_checkpoint=save, checkpoint_every=cfg["checkpoint_every"])
    save(trainer)
    print(f"stage={stage} steps={trainer.step} checkpoint={ck_path}")
    return 0


def _prior_mode(cfg: dict[str, Any], ck: Checkpoint | None) -> str:
    mode = cfg["mode"] or (default_prior_mode(ck) if ck is not None else "zero")
    if mode not in PRIOR_MODES:
        raise ConfigError(f"mode must be one of {PRIOR_MODES}, got {mode!r}")
    return mode


def cmd_infer(cfg: dict[str, Any], out: Path) -> int:
    ck = Checkpoint.load(_checkpoint_path(_require(cfg, "checkpoint")))
    model = model_from_checkpoint(ck)
    mode = _prior_mode(cfg, ck)
    if mode == "oracle":
        raise ConfigError("infer has no sharp frames; use mode=sampled or mode=zero")
    src = Path(_require(cfg, "input"))
    folder = src / "blur" if (src / "blur").is_dir() else src
    if not folder.is_dir():
        raise datakit.DatasetError(f"input {str(src)!r} is not a directory")
    blur = datakit.read_frames(folder)
    if len(blur) == 0:
        raise datakit.DatasetError(f"no frames in {str(folder)!r}")
    t0 = time.perf_counter()
    hq = restore_clip(model, blur, None, cfg["seq_len"], mode, cfg["seed"], cfg["diffusion_steps"])
    wall = time.perf_counter() - t0
    datakit.write_frames(hq, out / "frames")
    # wall time goes to stdout only, so files stay reproducible
    print(f"frames={len(hq)} wall_time={wall:.3f}s")
    return 0


def _eval_model(cfg: dict[str, Any]) -> tuple[VDDiff, Checkpoint | None]:
    if cfg["checkpoint"]:
        ck = Checkpoint.load(_checkpoint_path(cfg["checkpoint"]))
        return model_from_checkpoint(ck), ck
    return VDDiff.build(ModelConfig.from_dict(_section(cfg, "model.")), cfg["seed"]), None


def _summary(rows) -> tuple[float, float]:
    return mean_metric(rows, "psnr"), mean_metric(rows, "ssim")


def cmd_eval(cfg: dict[str, Any], out: Path) -> int:
    model, ck = _eval_model(cfg)
    mode = _prior_mode(cfg, ck)
    clips = _load_clips(_require(cfg, "data"), cfg["split"])
    seed, steps, seq_len = cfg["seed"], cfg["diffusion_steps"], cfg["seq_len"]
    rows = evaluate(model, clips, seq_len, mode, seed, steps)
    base = baseline(clips)
    table = [[r["clip"], r["frames"], r["psnr"], r["ssim"], b["psnr"], b["ssim"]] for r, b in zip(rows, base)]
    table.append(["mean", sum(r["frames"] for r in rows), *_summary(rows), *_summary(base)])
    write_csv(out / "metrics.csv", ["clip", "frames", "psnr", "ssim", "blur_psnr", "blur_ssim"], table)

    sweep = []
    for t in cfg["sweep_steps"]:
        if mode != "sampled":
            break
        sweep.append([t, *_summary(evaluate(model, clips, seq_len, mode, seed, t))])
    write_csv(out / "sweep_steps.csv", ["diffusion_steps", "psnr", "ssim"], sweep)
    sweep = [[n, *_summary(evaluate(model, clips, n, mode, seed, steps))] for n in cfg["sweep_seq_len"]]
    write_csv(out / "sweep_seqlen.csv", ["seq_len", "psnr", "ssim"], sweep)
    psnr, ssim = _summary(rows)
    print(f"clips={len(rows)} mode={mode} psnr={_num(psnr)} ssim={_num(ssim)}")
    return 0


def cmd_ablate(cfg: dict[str, Any], out: Path) -> int:
    """Full three-stage model vs. a prior-free model given the same backbone budget."""
    root = _require(cfg, "data")
    train = _load_clips(root, "train")
    held = _load_clips(root, "eval")
    seed, n = cfg["seed"], cfg["seq_len"]
    model_cfg = ModelConfig.from_dict(_section(cfg, "model."))
    shared = {k: v for k, v in _section(cfg, "train.").items() if v is not None}

    def stage(i: int, steps: int) -> TrainStageConfig:
        return TrainStageConfig.for_stage(i, seed=seed, **{**shared, "steps": steps})

    ck1, _ = train_stage_one(train, stage(1, cfg["stage1_steps"]), ModelConfig.from_dict(
        {**model_cfg.to_dict(), "use_prior": True}))
    ck2, _ = train_stage_two(train, ck1, stage(2, cfg["stage2_steps"]))
    ck3, _ = train_stage_three(train, ck2, stage(3, cfg["stage3_steps"]))
    plain, _ = train_stage_one(train, stage(1, cfg["stage1_steps"] + cfg["stage3_steps"]),
                               ModelConfig.from_dict({**model_cfg.to_dict(), "use_prior": False}))
    full = model_from_checkpoint(ck3)
    variants = [
        ("blur_baseline", _summary(baseline(held))),
        ("stage1_oracle_prior", _summary(evaluate(model_from_checkpoint(ck1), held, n, "oracle", seed))),
        ("stage2_sampled_prior", _summary(evaluate(model_from_checkpoint(ck2), held, n, "sampled", seed))),
        ("full", _summary(evaluate(full, held, n, "sampled", seed))),
        ("full_zero_prior", _summary(evaluate(full, held, n, "zero", seed))),
        ("no_prior", _summary(evaluate(model_from_checkpoint(plain), held, n, "zero", seed))),
    ]
    write_csv(out / "ablation.csv", ["variant", "psnr", "ssim"], [[v, *m] for v, m in variants])
    sweep = [[t, *_summary(evaluate(full, held, n, "sampled", seed, t))] for t in cfg["sweep_steps"]]
    write_csv(out / "sweep_steps.csv", ["diffusion_steps", "psnr", "ssim"], sweep)
    for name, (p, s) in variants:
        print(f"{name:22s} psnr={_num(p)} ssim={_num(s)}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vdiff", description="Wavelet-aware diffusion video deblurring (desk scale).")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} command")
        p.add_argument("--config", help="plain-text key=value file")
        p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--stage", type=int, choices=(1, 2, 3))
        p.add_argument("--steps", type=int)
        p.add_argument("--diffusion-steps", type=int)
        p.add_argument("--seq-len", type=int)
        p.add_argument("--data", help="dataset root")
        p.add_argument("--checkpoint")
        p.add_argument("--input")
        p.add_argument("--init", help="previous-stage checkpoint")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _threads() -> int:
    raw = os.environ.get("VDIFF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"VDIFF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"VDIFF_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    marker = out / FAILED_MARKER
    try:
        out.mkdir(parents=True, exist_ok=True)
        marker.unlink(missing_ok=True)
        torch.set_num_threads(_threads())
        flags = {f: getattr(args, f) for f in FLAG_KEYS}
        cfg = resolve_config(args.command, args.config, args.sets, flags)
        echo_config(out, args.command, cfg)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, CheckpointError, datakit.DatasetError, ValueError, FloatingPointError, OSError) as e:
        msg = f"{type(e).__name__}: {e}"
        print(f"vdiff {args.command}: error: {msg}", file=sys.stderr)
        try:
            out.mkdir(parents=True, exist_ok=True)
            marker.write_text(msg + "\n")
        except OSError:
            pass
        return EXIT_USAGE if isinstance(e, ConfigError) else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
