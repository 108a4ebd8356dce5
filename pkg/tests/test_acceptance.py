"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The expensive fixtures (corpus, stage A, fine-tunes, benchmark evaluations)
are session-scoped and shared across criteria; everything is seeded, so the
whole suite is reproducible. Expect roughly 60-90 minutes on a 2-core CPU;
run with `pytest -v tests/test_acceptance.py` (add -s to watch progress).
"""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from ivedit.bench import (
    edit_video,
    evaluate,
    frechet_distance,
    source_flow_pairs,
    warp_error,
)
from ivedit.cli import ablation_settings, load_bench_dir, load_train_dir, main as cli_main
from ivedit.codec import SPATIAL_FACTOR
from ivedit.denoiser import load_checkpoint, read_checkpoint_tensors, save_checkpoint
from ivedit.diffusion import NoiseSchedule, SamplerConfig, ddim_sample, make_schedule, q_sample, seeded_noise
from ivedit.flow import FlowField, OcclusionMask, estimate_flow
from ivedit.media import Application, Frame, VideoClip
from ivedit.motref import bilinear_warp
from ivedit.training import (
    StageAConfig,
    TrainConfig,
    backward_flows_per_level,
    draw_mmm_sample,
    make_grid_mask,
    mmm_loss_given,
    sample_training_clip,
    train_mmm,
    train_stage_a,
)

SEED = 0
STAGE_A_STEPS = 2000
MMM_STEPS = 600
ABLATION_STEPS = 300
EVAL_STEPS = 50       # criterion 7, paper-default sampler
ABLATION_EVAL_STEPS = 20


def report(num: int, description: str, ok: bool, detail: str = ""):
    suffix = f" ({detail})" if detail else ""
    print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'} - {description}{suffix}", flush=True)
    assert ok, f"criterion {num}: {description}{suffix}"


# ---------------------------------------------------------------------------
# Shared expensive fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def corpus(work):
    out = work / "data"
    assert cli_main(["gen-data", "--out", str(out), "--seed", str(SEED)]) == 0
    return out


@pytest.fixture(scope="session")
def train_set(corpus):
    return load_train_dir(corpus)


@pytest.fixture(scope="session")
def bench_set(corpus):
    return load_bench_dir(corpus)


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture(scope="session")
def stage_a(work, train_set, schedule):
    model = train_stage_a(
        train_set, StageAConfig(steps=STAGE_A_STEPS, seed=SEED), schedule,
        log_path=work / "stage_a_log.csv",
    )
    save_checkpoint(model, work / "stage_a.ived")
    return work / "stage_a.ived"


@pytest.fixture(scope="session")
def flow_cache():
    return {}


def _finetune(path, stage_a, train_set, schedule, flow_cache, cfg):
    model = load_checkpoint(stage_a)
    train_mmm(model, train_set, cfg, schedule, flow_cache=flow_cache)
    save_checkpoint(model, path)
    return path


@pytest.fixture(scope="session")
def mmm_default(work, stage_a, train_set, schedule, flow_cache):
    cfg = TrainConfig(steps=MMM_STEPS, seed=SEED)
    return _finetune(work / "mmm.ived", stage_a, train_set, schedule, flow_cache, cfg)


@pytest.fixture(scope="session")
def ablation_ckpts(work, stage_a, train_set, schedule, flow_cache, mmm_default):
    """Fine-tuned variants for criteria 8-10; ratio 0.75 / frame_wise / exp2
    all reuse one run trained at ablation step count."""
    base = TrainConfig(steps=ABLATION_STEPS, seed=SEED)
    variants = {
        "exp0": dataclasses.replace(base, mask_ratio=0.0, train_groups=("motion",)),
        "exp1": dataclasses.replace(base, train_groups=("motion",)),
        "exp2": base,
        "ratio_0": dataclasses.replace(base, mask_ratio=0.0),
        "ratio_25": dataclasses.replace(base, mask_ratio=0.25),
        "ratio_50": dataclasses.replace(base, mask_ratio=0.5),
        "clip_wise": dataclasses.replace(base, mask_strategy="clip_wise"),
    }
    paths = {}
    for name, cfg in variants.items():
        paths[name] = _finetune(work / f"{name}.ived", stage_a, train_set, schedule, flow_cache, cfg)
    return paths


@pytest.fixture(scope="session")
def eval_cache(work, bench_set, schedule):
    """Memoized benchmark evaluations keyed by (checkpoint, mode, steps, subset)."""
    cache = {}

    def run(ckpt_path, mode, steps, subset="all"):
        key = (str(ckpt_path), mode, steps, subset)
        if key not in cache:
            triplets = bench_set
            if subset == "om":
                triplets = [t for t in bench_set if t.application == Application.OBJECT_MODIFICATION]
            model = load_checkpoint(ckpt_path)
            sampler = SamplerConfig(num_steps=steps, guidance_scale=7.5, seed=SEED)
            cache[key] = evaluate(triplets, model, sampler, mode=mode, schedule=schedule)
        return cache[key]

    return run


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_01_inflation_identity(stage_a, bench_set, schedule):
    # motion/motref groups in the stage-A checkpoint are still at their
    # zero-initialized state: inflated editing must equal frame-wise editing
    # bit for bit on an 8-frame triplet.
    model = load_checkpoint(stage_a)
    triplet = next(t for t in bench_set if len(t.video) == 8)
    sampler = SamplerConfig(num_steps=8, guidance_scale=7.5, seed=SEED)
    inflated = edit_video(triplet, model, sampler, schedule=schedule, window=8, inflated=True)
    frame_wise = edit_video(triplet, model, sampler, schedule=schedule, window=1, inflated=False)
    ok = all(np.array_equal(a.values, b.values) for a, b in zip(inflated.frames, frame_wise.frames))
    report(1, "inflated editing bit-identical to frame-wise at initialization", ok)


def test_criterion_02_gradient_correctness(train_set, schedule):
    # end-to-end mmm_loss gradients vs central differences, float64,
    # 2-frame clip on a 16x16 latent (64x64 frames), 40 parameters
    from ivedit.denoiser import EditingModel

    model = EditingModel().double()
    rng = np.random.default_rng(SEED)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.from_numpy(rng.standard_normal(tuple(p.shape)) * 0.02).to(p.dtype))
    cfg = TrainConfig(stride=4, clip_length=3, steps=0, seed=SEED)
    reference, frames = sample_training_clip(train_set, cfg, np.random.default_rng(SEED))
    assert frames.height // SPATIAL_FACTOR == 16
    sample = draw_mmm_sample(len(frames), (16, 16), cfg, schedule, np.random.default_rng(SEED + 1))
    flows = backward_flows_per_level(frames.frames, model.config.num_levels, torch.float64)

    def loss_fn():
        return mmm_loss_given(model, reference, frames, sample, schedule, flows_down=flows)

    loss = loss_fn()
    loss.backward()
    groups = model.parameter_groups()
    failures, total = 0, 0
    for gname in ("spatial", "refenc", "motion", "motref"):
        params = {n: p for n, p in groups[gname].items() if p.grad is not None}
        names = sorted(params)
        for _ in range(10):
            name = names[rng.integers(len(names))]
            p = params[name]
            idx = tuple(rng.integers(s) for s in p.shape)
            analytic = p.grad[idx].item()
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + 1e-4
                up = loss_fn().item()
                p[idx] = orig - 1e-4
                down = loss_fn().item()
                p[idx] = orig
            fd = (up - down) / 2e-4
            denom = max(abs(analytic), abs(fd), 1e-6)
            if abs(analytic - fd) / denom > 1e-3:
                failures += 1
            total += 1
    ok = total == 40 and failures <= 2  # >= 95% of 40
    report(2, "mmm_loss gradients match finite differences", ok, f"{total - failures}/{total} within 1e-3")


def test_criterion_03_freeze_contract(stage_a, mmm_default):
    before = read_checkpoint_tensors(stage_a)
    after = read_checkpoint_tensors(mmm_default)
    frozen = [n for n in before if n.startswith(("spatial/", "refenc/"))]
    ok = all(np.array_equal(before[n], after[n]) for n in frozen)
    changed = [n for n in after if n.startswith(("motion/", "motref/")) and not np.array_equal(before[n], after[n])]
    report(3, f"spatial/refenc tensors bit-identical after {MMM_STEPS} fine-tune steps", ok,
           f"{len(frozen)} frozen tensors checked, {len(changed)} temporal tensors moved")


def test_criterion_04_flow_quality(bench_set):
    frames = [t.video.frames[0] for t in bench_set[:2]]
    shifts = [(4, 0), (0, 4), (-3, 2), (2, -4), (1, 1), (-2, -2), (0, -4), (-4, 0), (3, 1), (1, -3)]
    epes = []
    for frame in frames:
        for dx, dy in shifts:
            v = frame.values
            out = v.copy()
            if dx > 0:
                out = np.concatenate([np.repeat(out[:, :, :1], dx, 2), out[:, :, :-dx]], 2)
            elif dx < 0:
                out = np.concatenate([out[:, :, -dx:], np.repeat(out[:, :, -1:], -dx, 2)], 2)
            if dy > 0:
                out = np.concatenate([np.repeat(out[:, :1], dy, 1), out[:, :-dy]], 1)
            elif dy < 0:
                out = np.concatenate([out[:, -dy:], np.repeat(out[:, -1:], -dy, 1)], 1)
            flow = estimate_flow(frame, Frame(out))
            interior = flow.values[:, 8:-8, 8:-8]
            epes.append(float(np.sqrt((interior[0] - dx) ** 2 + (interior[1] - dy) ** 2).mean()))
    ok = len(epes) == 20 and float(np.mean(epes)) < 0.5
    report(4, "pyramidal flow mean EPE < 0.5 px on 20 translated textured frames", ok,
           f"mean EPE {np.mean(epes):.3f}")


def test_criterion_05_warp_and_metric_oracles():
    rng = np.random.default_rng(SEED)
    # integer-shift warp oracle, exact
    field = torch.from_numpy(rng.standard_normal((3, 6, 7)))
    flow = torch.zeros(2, 6, 7, dtype=field.dtype)
    flow[0] = 1.0
    shifted = torch.cat([field[:, :, 1:], field[:, :, -1:]], dim=2)
    ok_shift = torch.equal(bilinear_warp(field, flow), shifted)
    # half-pixel case to 1e-6
    row = torch.tensor([[[0.0, 1.0, 0.0, 1.0]]], dtype=torch.float64)
    half = torch.zeros(2, 1, 4, dtype=torch.float64)
    half[0] = 0.5
    ok_half = bool((bilinear_warp(row, half) - torch.tensor([[[0.5, 0.5, 0.5, 1.0]]])).abs().max() < 1e-6)
    # Frechet 1-D closed forms to 1e-6
    a = np.array([[-1.0], [1.0]]) / np.sqrt(2)
    ok_f1 = abs(frechet_distance(a, a + 1.0) - 1.0) < 1e-6
    ok_f2 = abs(frechet_distance(a, 2.0 * a) - 1.0) < 1e-6
    # constructively warped two-frame video scores < 1e-6
    base = Frame((np.round(rng.uniform(size=(3, 32, 32)) * 255) / 255).astype(np.float32))
    flow_np = rng.uniform(-2, 2, size=(2, 32, 32)).astype(np.float32)
    warped = bilinear_warp(
        torch.from_numpy(base.values.astype(np.float64)), torch.from_numpy(flow_np.astype(np.float64))
    ).numpy()
    video = VideoClip([base, Frame(np.clip(warped, 0, 1).astype(np.float32))])
    we = warp_error(video, [FlowField(flow_np, src_index=1, dst_index=0)],
                    [OcclusionMask(np.ones((32, 32), dtype=np.uint8))])
    ok_we = we < 1e-6
    ok = ok_shift and ok_half and ok_f1 and ok_f2 and ok_we
    report(5, "warp oracles and Frechet closed forms match", ok,
           f"shift={ok_shift} half={ok_half} f1={ok_f1} f2={ok_f2} warp_error={we:.2e}")


def test_criterion_06_schedule_sampler_identities(schedule):
    rng = np.random.default_rng(SEED)
    z0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    # exact limits via a schedule holding alpha_bar exactly 1 and 0
    limit_sched = NoiseSchedule(beta=np.array([0.0, 1.0]), alpha=np.array([1.0, 0.0]),
                                alpha_bar=np.array([1.0, 0.0]))
    ok_hi = np.array_equal(q_sample(z0, 1, eps, limit_sched), z0)
    ok_lo = np.array_equal(q_sample(z0, 2, eps, limit_sched), eps)
    # zero-stub DDIM telescopes to z_T / sqrt(alpha_bar at the first step)
    cfg = SamplerConfig(num_steps=50, guidance_scale=1.0, seed=SEED)
    z_init = seeded_noise((6, 6), cfg.seed)

    class NullCond:
        def with_null_reference(self):
            return self

    out = ddim_sample(lambda z, c, t: np.zeros_like(z), NullCond(), schedule, cfg, z_init=z_init)
    expected = z_init / np.sqrt(schedule.alpha_bar_at(1000))
    ok_stub = np.abs(out - expected).max() < 1e-5 * np.abs(expected).max()
    # same-seed bit-identical sampling
    a = ddim_sample(lambda z, c, t: np.zeros_like(z), NullCond(), schedule, cfg, shape=(3, 3))
    b = ddim_sample(lambda z, c, t: np.zeros_like(z), NullCond(), schedule, cfg, shape=(3, 3))
    ok_seed = np.array_equal(a, b)
    ok = ok_hi and ok_lo and ok_stub and ok_seed
    report(6, "q_sample limits exact; zero-stub DDIM telescopes; seeding bit-identical", ok)


def test_criterion_07_direction_vs_frame_wise_baseline(mmm_default, eval_cache):
    baseline = eval_cache(mmm_default, "frame_wise_baseline", EVAL_STEPS)
    inflated = eval_cache(mmm_default, "inflated", EVAL_STEPS)
    ratio = inflated.warp_error / baseline.warp_error
    ok = ratio <= 0.9 and inflated.temporal_consistency > baseline.temporal_consistency
    report(7, "inflated fine-tuned editing beats the frame-wise baseline", ok,
           f"warp ratio {ratio:.3f} (need <= 0.9); TC {inflated.temporal_consistency:.4f} "
           f"vs {baseline.temporal_consistency:.4f}")


def _om_warp(report_obj):
    return report_obj.per_application["object_modification"]["warp_error"]


def test_criterion_08_components_ordering(ablation_ckpts, eval_cache):
    we = {name: _om_warp(eval_cache(ablation_ckpts[name], "inflated", ABLATION_EVAL_STEPS, subset="om"))
          for name in ("exp0", "exp1", "exp2")}
    ok = we["exp2"] <= we["exp1"] * 1.02 and we["exp1"] <= we["exp0"]
    report(8, "component ablation orders Exp2 <= Exp1 <= Exp0 on warp error", ok,
           f"exp0={we['exp0']:.5f} exp1={we['exp1']:.5f} exp2={we['exp2']:.5f}")


def test_criterion_09_mask_ratio_ordering(ablation_ckpts, eval_cache):
    we = {}
    for name in ("ratio_0", "ratio_25", "ratio_50"):
        we[name] = eval_cache(ablation_ckpts[name], "inflated", ABLATION_EVAL_STEPS).warp_error
    we["ratio_75"] = eval_cache(ablation_ckpts["exp2"], "inflated", ABLATION_EVAL_STEPS).warp_error
    ok_each = all(we[name] < we["ratio_0"] for name in ("ratio_25", "ratio_50", "ratio_75"))
    ok_75 = we["ratio_75"] <= we["ratio_25"] * 1.02
    ok = ok_each and ok_75
    report(9, "nonzero mask ratios beat ratio 0; 0.75 within 2% of 0.25 or better", ok,
           " ".join(f"{k}={v:.5f}" for k, v in sorted(we.items())))


def test_criterion_10_mask_strategy_ordering(ablation_ckpts, eval_cache):
    frame_wise = _om_warp(eval_cache(ablation_ckpts["exp2"], "inflated", ABLATION_EVAL_STEPS, subset="om"))
    clip_wise = _om_warp(eval_cache(ablation_ckpts["clip_wise"], "inflated", ABLATION_EVAL_STEPS, subset="om"))
    ok = frame_wise <= clip_wise
    report(10, "frame-wise grid masking not worse than clip-wise on warp error", ok,
           f"frame_wise={frame_wise:.5f} clip_wise={clip_wise:.5f}")


def test_criterion_11_grid_mask_exactness():
    counts = {}
    for ratio in (0.0, 0.25, 0.5, 0.75, 1.0):
        mask = make_grid_mask(16, 16, 8, ratio, np.random.default_rng(SEED))
        counts[ratio] = int((mask.reshape(8, 2, 8, 2)[:, 0, :, 0] == 0).sum())
    ok = counts == {0.0: 0, 0.25: 16, 0.5: 32, 0.75: 48, 1.0: 64}
    report(11, "grid masks occlude exactly {0,16,32,48,64} cells at N=8", ok, str(counts))


def test_criterion_12_end_to_end_determinism(work, corpus, mmm_default):
    triplet_dir = sorted((Path(corpus) / "bench").iterdir())[0]
    png_sets = []
    for name in ("d1", "d2"):
        out = work / name
        assert cli_main(["edit", "--triplet", str(triplet_dir), "--ckpt", str(mmm_default),
                         "--out", str(out), "--seed", "3", "--steps", "10"]) == 0
        png_sets.append([p.read_bytes() for p in sorted((out / "frames").glob("*.png"))])
    ok_pngs = png_sets[0] == png_sets[1] and len(png_sets[0]) == 8
    reports = []
    for name in ("r1", "r2"):
        out = work / name
        assert cli_main(["eval", "--bench", str(corpus), "--ckpt", str(mmm_default),
                         "--out", str(out), "--mode", "frame_wise_baseline", "--steps", "2",
                         "--seed", "1"]) == 0
        reports.append((out / "report.csv").read_bytes() + (out / "report.json").read_bytes())
    ok_reports = reports[0] == reports[1]
    ok = ok_pngs and ok_reports
    report(12, "repeated runs produce byte-identical PNGs and reports", ok)
