"""Acceptance checks, one per criterion, each printing a single PASS/FAIL line.

Run under pytest (``pytest tests/test_acceptance.py -v``) or directly as a
script (``python3 tests/test_acceptance.py``) for just the eight summary lines.
"""
from __future__ import annotations

import functools
import math
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from vdiff import cli
from vdiff.datakit import BlurDatasetSpec, quantize, split_names, synthesize_dataset
from vdiff.diffusion import (LatentEncoder, NoisePredictor, NoiseSchedule, encode_latent, iterative_forward,
                             posterior_mean, predict_noise, reverse_step, sample_prior)
from vdiff.losses import l1_loss, msfr_loss, total_loss
from vdiff.model import ModelConfig, VDDiff
from vdiff.numerics import check_gradients
from vdiff.training import (TrainStageConfig, baseline, evaluate, mean_deblur_loss, mean_metric,
                            model_from_checkpoint, train_stage_one, train_stage_three, train_stage_two)
from vdiff.wadt import PriorModulation, WadFFN, WadMSA
from vdiff.wavelet import analyze, synthesize
from vdiff.wbpf import PropagationCell, propagate_step, run_direction

torch.set_num_threads(1)


def line(n: int, ok: bool, detail: str) -> str:
    return f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


# -- 1. wavelet round trip -------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_rt = worst_energy = 0.0
    odd = 0
    for _ in range(100):
        t, c = int(rng.integers(1, 5)), int(rng.integers(1, 9))
        h, w = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        odd += (h % 2) or (w % 2)
        x = torch.tensor(rng.normal(size=(t, c, h, w)))
        p = analyze(x)
        worst_rt = max(worst_rt, (synthesize(p) - x).abs().max().item())
        # energy is preserved for the evenly extended signal the transform actually sees
        xp = torch.nn.functional.pad(x, (0, w % 2, 0, h % 2), mode="replicate")
        e_in = float((xp ** 2).sum())
        e_out = float((p.approx ** 2).sum() + (p.detail ** 2).sum())
        worst_energy = max(worst_energy, abs(e_out - e_in) / e_in)
    dt = time.perf_counter() - t0
    ok = worst_rt < 1e-10 and worst_energy < 1e-9 and dt < 5 and odd > 0
    return ok, f"max|err|={worst_rt:.2e} (<1e-10) parseval rel={worst_energy:.2e} (<1e-9) odd={odd}/100 {dt:.2f}s"


# -- 2. diffusion algebra --------------------------------------------------------------------

def criterion_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        steps = int(rng.integers(1, 9))
        betas = np.sort(rng.uniform(0.01, 0.99, size=steps))
        s = NoiseSchedule(tuple(betas))
        t = int(rng.integers(1, steps + 1))
        z_t, eps = rng.normal(size=2)
        ab = s.alpha_bar(t)
        z0 = (z_t - math.sqrt(1 - ab) * eps) / math.sqrt(ab)   # noise-to-data relation
        worst = max(worst, abs(posterior_mean(z_t, z0, t, s) - reverse_step(z_t, eps, t, s)))

    s = NoiseSchedule.linear(4)
    z0 = torch.tensor(rng.normal(size=(4, 32)))

    def oracle(z, c, t, sched):
        ab = sched.alpha_bar(t)
        return (z - math.sqrt(ab) * z0) / math.sqrt(1 - ab)

    rec = (sample_prior(torch.zeros_like(z0), s, oracle, seed=0) - z0).abs().max().item()
    dt = time.perf_counter() - t0
    ok = worst < 1e-12 and rec < 1e-10 and dt < 5
    return ok, f"substitution max|diff|={worst:.2e} (<1e-12) oracle T=4 recovery={rec:.2e} (<1e-10) {dt:.2f}s"


# -- 3. forward-process marginals --------------------------------------------------------------

def criterion_3():
    t0 = time.perf_counter()
    m = 100_000
    s = NoiseSchedule((0.1, 0.2))
    z0 = 0.8
    gen = torch.Generator().manual_seed(3)
    noises = [torch.randn(m, generator=gen, dtype=torch.float64) for _ in range(2)]
    z2 = iterative_forward(torch.full((m,), z0, dtype=torch.float64), s, noises)
    mean, var = z2.mean().item(), z2.var().item()
    want_mean, want_var = math.sqrt(0.72) * z0, 0.28
    sd_mean = math.sqrt(want_var / m)
    sd_var = want_var * math.sqrt(2 / (m - 1))
    k_mean, k_var = abs(mean - want_mean) / sd_mean, abs(var - want_var) / sd_var
    dt = time.perf_counter() - t0
    ok = k_mean < 4 and k_var < 4 and dt < 30
    return ok, f"mean {mean:.5f} vs {want_mean:.5f} ({k_mean:.2f} sd) var {var:.5f} vs 0.28 ({k_var:.2f} sd) {dt:.2f}s"


# -- 4. gradient suite -----------------------------------------------------------------------

def _g(*shape, gen, scale=1.0):
    return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).requires_grad_()


def _jitter(module, gen, scale=0.2):
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * scale)
    return module


def _away_from(pred, gen):
    """A target at least 0.05 from ``pred`` everywhere, keeping |.| terms off their kink."""
    off = 0.05 + 0.1 * torch.rand(pred.shape, generator=gen, dtype=torch.float64)
    sign = torch.where(torch.rand(pred.shape, generator=gen) < 0.5, -1.0, 1.0).to(torch.float64)
    return (pred.detach() + sign * off).detach()


TINY = ModelConfig(channels=4, n1=1, n2=1, latent_channels=2, wbpf_blocks=1, encoder_width=4, encoder_depth=2,
                   predictor_hidden=8, embed_dim=4, diffusion_steps=2)


def _case(i):
    """Independent seeding per case, so adding or reordering cases leaves the others unchanged."""
    torch.manual_seed(40 + i)   # module initialisers draw from the global generator
    return torch.Generator().manual_seed(40 + i)


def gradient_cases():
    cases = {}

    gen = _case(0)
    hq = _g(2, 3, 4, 4, gen=gen)
    gt = _away_from(hq, gen)
    cases["l1_loss"] = (lambda: l1_loss(hq, gt), {"hq": hq}, None)

    # The spectral L1 is piecewise linear in its input, so a coordinate's gradient is a signed sum of
    # DFT twiddles that often cancels to exactly zero, where the difference quotient is pure roundoff.
    # Probe directional derivatives along random directions instead of along the axes.
    gen = _case(1)
    hq0 = torch.randn(1, 2, 8, 8, generator=gen, dtype=torch.float64)
    gt2 = _away_from(hq0, gen)
    dirs = torch.randn(24, hq0.numel(), generator=gen, dtype=torch.float64)
    theta = torch.zeros(24, dtype=torch.float64, requires_grad=True)
    cases["msfr_loss"] = (lambda: msfr_loss(hq0 + (theta @ dirs).view(hq0.shape), gt2, 3), {"theta": theta}, None)

    for i, (name, cls) in enumerate((("modulate", PriorModulation), ("wad_msa", WadMSA), ("wad_ffn", WadFFN)), 2):
        gen = _case(i)
        mod = _jitter(cls(4, 6), gen)
        f, z = _g(2, 4, 4, 4, gen=gen), _g(2, 6, gen=gen)
        w = torch.randn(2, 4, 4, 4, generator=gen, dtype=torch.float64)
        cases[name] = (lambda mod=mod, f=f, z=z, w=w: (mod(f, z) * w).sum(),
                       {"f": f, "z": z, **dict(mod.named_parameters())}, 8)

    gen = _case(5)
    cell = _jitter(PropagationCell(2, 1), gen, 0.1)
    y, x = _g(1, 2, 4, 4, gen=gen), _g(1, 2, 4, 4, gen=gen)
    wc = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
    cases["propagate_step"] = (lambda: (propagate_step(y, x, cell) * wc).sum(),
                               {"y": y, "x": x, **dict(cell.named_parameters())}, 6)

    gen = _case(6)
    enc = _jitter(LatentEncoder(6, width=3, depth=2), gen, 0.1)
    v = _g(2, 3, 8, 8, gen=gen, scale=0.5)
    we = torch.randn(2, 6, generator=gen, dtype=torch.float64)
    cases["encode_latent"] = (lambda: (encode_latent(v, enc) * we).sum(),
                              {"video": v, **dict(enc.named_parameters())}, 8)

    gen = _case(7)
    sched = NoiseSchedule.linear(4)
    pred = _jitter(NoisePredictor(6, hidden=8, embed_dim=4), gen, 0.1)
    zt, c = _g(3, 6, gen=gen), _g(3, 6, gen=gen)
    wp = torch.randn(3, 6, generator=gen, dtype=torch.float64)
    cases["predict_noise"] = (lambda: (predict_noise(zt, c, 3, sched, pred) * wp).sum(),
                              {"z_t": zt, "c": c, **dict(pred.named_parameters())}, 8)

    # full objective through encoders, the whole reverse chain and the backbone; an odd frame count keeps
    # the per-frame L1 sign sums of the latent term away from exact cancellation
    gen = _case(8)
    model = _jitter(VDDiff.build(TINY, 4), gen, 0.05)
    blur = torch.rand(3, 3, 8, 8, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        hq1 = model.restore(blur, model.sample(blur, seed=9))
    target = _away_from(hq1, gen)

    def full_total():
        z = model.le(target)
        z_hat = model.sample(blur, seed=9)
        return total_loss(model.restore(blur, z_hat), target, z, z_hat, lam=0.1, scales=2)

    cases["L_total"] = (full_total, dict(model.named_parameters()), 3)
    return cases


def criterion_4():
    t0 = time.perf_counter()
    results = {}
    for name, (fn, params, coords) in gradient_cases().items():
        results[name] = check_gradients(fn, params, h=1e-5, max_coords=coords, floor=1e-8, seed=0)
    dt = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in results.values())
    ok = worst < 1e-4 and dt < 300
    parts = " ".join(f"{k}={r.max_rel_err:.1e}" for k, r in results.items())
    return ok, f"max rel err={worst:.2e} (<1e-4) over {sum(r.checked for r in results.values())} coords " \
               f"[{parts}] {dt:.1f}s"


# -- 5. WBPF causality ---------------------------------------------------------------------------

def criterion_5():
    gen = torch.Generator().manual_seed(5)
    torch.manual_seed(5)
    fwd, bwd = PropagationCell(4, 2), PropagationCell(4, 2)
    x = torch.randn(6, 4, 8, 8, generator=gen, dtype=torch.float64) * 0.5
    leak_f = leak_b = 0.0
    reach = True
    for j in range(6):
        xp = x.clone()
        xp[j] += torch.randn(xp[j].shape, generator=gen, dtype=torch.float64)
        df = (run_direction(x, fwd) - run_direction(xp, fwd)).abs().flatten(1).max(dim=1).values
        db = (run_direction(x, bwd, reverse=True) - run_direction(xp, bwd, reverse=True)).abs() \
            .flatten(1).max(dim=1).values
        leak_f = max(leak_f, df[:j].max().item() if j else 0.0)
        leak_b = max(leak_b, db[j + 1:].max().item() if j < 5 else 0.0)
        reach &= bool((df[j:] > 0).all() and (db[:j + 1] > 0).all())
    ok = leak_f < 1e-14 and leak_b < 1e-14 and reach
    return ok, f"forward leak={leak_f:.1e} backward leak={leak_b:.1e} (<1e-14) downstream frames all react={reach}"


# -- 6 / 7. toy training ---------------------------------------------------------------------------

@functools.cache
def toy_data():
    clips = [quantize(c) for c in synthesize_dataset(BlurDatasetSpec(clips=8, frames=4, height=32, width=32,
                                                                     blur_window=5, seed=0))]
    split = split_names([c.name for c in clips], 0.25)
    return [c for c in clips if split[c.name] == "train"], [c for c in clips if split[c.name] == "eval"]


@functools.cache
def stage_one():
    train, _ = toy_data()
    t0 = time.perf_counter()
    ck, rows = train_stage_one(train, TrainStageConfig.for_stage(1, steps=300), ModelConfig())
    return ck, rows, time.perf_counter() - t0


@functools.cache
def full_pipeline():
    train, held = toy_data()
    ck1, _, _ = stage_one()
    ck2, _ = train_stage_two(train, ck1, TrainStageConfig.for_stage(2))
    ck3, _ = train_stage_three(train, ck2, TrainStageConfig.for_stage(3))
    # the prior-free variant trains its backbone for as many steps as the full model's did
    steps = TrainStageConfig.for_stage(1).steps + TrainStageConfig.for_stage(3).steps
    plain, _ = train_stage_one(train, TrainStageConfig.for_stage(1, steps=steps), ModelConfig(use_prior=False))
    full = model_from_checkpoint(ck3)
    return {
        "stage2": mean_metric(evaluate(model_from_checkpoint(ck2), held, mode="sampled"), "psnr"),
        "full": mean_metric(evaluate(full, held, mode="sampled"), "psnr"),
        "no_prior": mean_metric(evaluate(model_from_checkpoint(plain), held, mode="zero"), "psnr"),
        "sweep": {t: mean_metric(evaluate(full, held, mode="sampled", steps=t), "psnr") for t in (1, 2, 4, 8)},
    }


def criterion_6():
    train, held = toy_data()
    ck, _, dt = stage_one()
    init = mean_deblur_loss(VDDiff.build(ModelConfig(), 0), train)
    final = mean_deblur_loss(model_from_checkpoint(ck), train)
    base = mean_metric(baseline(held), "psnr")
    got = mean_metric(evaluate(model_from_checkpoint(ck), held, mode="oracle"), "psnr")
    ok = final < 0.5 * init and got >= base + 1.0 and dt < 1800
    return ok, (f"L_deblur {init:.3f} -> {final:.3f} ({final / init:.1%} of initial, <50%) "
                f"eval PSNR {got:.2f} vs blur {base:.2f} (+{got - base:.2f} dB, >=1.0) train {dt:.0f}s")


def criterion_7():
    r = full_pipeline()
    a = r["full"] >= r["no_prior"]
    gap = abs(r["sweep"][4] - r["sweep"][8])
    b = gap <= 0.2
    sweep = " ".join(f"T{t}={v:.2f}" for t, v in r["sweep"].items())
    return a and b, (f"(a) full {r['full']:.2f} >= no-prior {r['no_prior']:.2f}: {a}; "
                     f"(b) |T4-T8|={gap:.3f} dB (<=0.2): {b} [{sweep}]")


def stage_three_vs_two():
    r = full_pipeline()
    return r["full"] >= r["stage2"] - 0.1, f"stage three {r['full']:.2f} vs stage two {r['stage2']:.2f} (-0.1 dB slack)"


# -- 8. CLI determinism ------------------------------------------------------------------------------

TINY_SETS = ["model.channels=4", "model.n1=1", "model.n2=1", "model.latent_channels=2", "model.wbpf_blocks=1",
             "model.encoder_width=4", "model.encoder_depth=2", "model.predictor_hidden=16", "model.embed_dim=4"]


def _cli_session(root: Path) -> dict[str, bytes]:
    def run(*args, sets=()):
        argv = list(args) + [a for s in sets for a in ("--set", s)]
        code = cli.main(argv)
        if code:
            raise RuntimeError(f"vdiff {' '.join(argv)} exited {code}")

    d = str(root / "data")
    run("synth", "--out", d, "--seed", "7", sets=["data.clips=4", "data.height=16", "data.width=16"])
    run("train", "--stage", "1", "--steps", "20", "--data", d, "--out", str(root / "s1"),
        sets=TINY_SETS + ["train.lr=0.01", "train.msfr_scales=2"])
    run("train", "--stage", "2", "--steps", "200", "--data", d, "--init", str(root / "s1"), "--out", str(root / "s2"),
        sets=["train.lr=0.01"])
    run("train", "--stage", "3", "--steps", "10", "--data", d, "--init", str(root / "s2"), "--out", str(root / "s3"),
        sets=["train.msfr_scales=2"])
    run("infer", "--checkpoint", str(root / "s3"), "--input", f"{d}/clip_003", "--out", str(root / "infer"),
        "--seed", "3")
    run("eval", "--checkpoint", str(root / "s3"), "--data", d, "--out", str(root / "eval"))
    run("ablate", "--data", d, "--out", str(root / "ablate"),
        sets=TINY_SETS + ["stage1_steps=20", "stage2_steps=200", "stage3_steps=10", "train.msfr_scales=2"])
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def criterion_8():
    # rerun in the same place so recorded paths agree; every byte must then match
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp) / "run"
        first = _cli_session(root)
        shutil.rmtree(root)
        second = _cli_session(root)
    differ = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    kinds = {k.rsplit(".", 1)[-1] for k in first}
    ok = not differ and {"csv", "png", "ckpt", "txt"} <= kinds
    return ok, (f"{len(first)} files across synth/train x3/infer/eval/ablate, {len(differ)} differ "
                f"{differ[:3] if differ else ''}").rstrip()


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8}


SLOW = {6, 7}   # full training runs


@pytest.mark.parametrize("n", [pytest.param(n, marks=pytest.mark.slow) if n in SLOW else n for n in sorted(CRITERIA)])
def test_criterion(n, capsys):
    ok, detail = CRITERIA[n]()
    with capsys.disabled():
        print("\n" + line(n, ok, detail))
    assert ok, detail


@pytest.mark.slow
def test_stage_three_not_worse_than_stage_two(capsys):
    ok, detail = stage_three_vs_two()
    with capsys.disabled():
        print(f"\nstage-three paired check: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def main() -> int:
    failed = 0
    for n, fn in sorted(CRITERIA.items()):
        ok, detail = fn()
        failed += not ok
        print(line(n, ok, detail), flush=True)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
