"""Command-line entry point: data generation, two-stage training, editing,
evaluation, and ablation sweeps.

Every run writes run_meta.json with the fully resolved configuration and the
package version; re-running with that file as --config reproduces outputs
byte-identically. Exit codes: 0 success, 2 configuration error, 3 data or
format error, 4 training or contract failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import evaluate
from .denoiser import load_checkpoint, save_checkpoint
from .diffusion import SamplerConfig, make_schedule
from .errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    DatasetError,
    InputError,
    IveditError,
    TrainingError,
)
from .media import (
    Application,
    Frame,
    Mask,
    SpriteConfig,
    Triplet,
    VideoClip,
    generate_sprite_video,
    load_triplet,
    save_triplet,
)
from .training import StageAConfig, TrainConfig, train_mmm, train_stage_a


@contextlib.contextmanager
def _output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(f"output directory {out_dir} is locked by another run (remove {lock})")
    try:
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_run_meta(out_dir: Path, command: str, config: dict):
    meta = {"command": command, "config": config, "version": __version__}
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if "config" in data and isinstance(data["config"], dict):  # accept a saved run_meta.json
        data = data["config"]
    return data


def _dataclass_from(cls, data: dict, overrides: dict):
    merged = dict(data)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(merged) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    if "train_groups" in merged and isinstance(merged["train_groups"], list):
        merged["train_groups"] = tuple(merged["train_groups"])
    return cls(**merged)


def _config_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _rect_masks(masks):
    rect = []
    for m in masks:
        v = np.zeros_like(m.values)
        if m.values.any():
            rows = np.flatnonzero(m.values.any(axis=1))
            cols = np.flatnonzero(m.values.any(axis=0))
            v[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = 1
        rect.append(Mask(v))
    return rect


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.size < 16 or args.size % 4:
        raise ConfigurationError(f"--size must be >= 16 and divisible by 4, got {args.size}")
    if args.triplets % 2:
        raise ConfigurationError("--triplets must be even (split across the two applications)")
    with _output_lock(out):
        master = np.random.default_rng(args.seed)
        choice = np.random.default_rng(master.integers(2**63))

        def child_seed():
            return int(master.integers(2**63))

        for k in range(args.clips):
            cfg = SpriteConfig(
                num_frames=args.train_frames, height=args.size, width=args.size,
                num_sprites=int(choice.integers(1, 3)),
                motion="linear" if choice.random() < 0.6 else "circular",
                seed=child_seed(),
            )
            clip, mask_seqs = generate_sprite_video(cfg)
            triplet = Triplet(
                video=clip, masks=mask_seqs[0], reference=clip.frames[0],
                application=Application.TEXTURE_TRANSFER, id=f"train_{k:03d}",
            )
            save_triplet(triplet, out / "train" / f"clip_{k:03d}")

        half = args.triplets // 2
        for j in range(args.triplets):
            app = Application.TEXTURE_TRANSFER if j < half else Application.OBJECT_MODIFICATION
            cfg = SpriteConfig(
                num_frames=args.bench_frames, height=args.size, width=args.size,
                num_sprites=int(choice.integers(1, 3)),
                motion="linear" if choice.random() < 0.6 else "circular",
                seed=child_seed(),
            )
            clip, mask_seqs = generate_sprite_video(cfg)
            masks = mask_seqs[0] if app == Application.TEXTURE_TRANSFER else _rect_masks(mask_seqs[0])
            ref_cfg = SpriteConfig(
                num_frames=2, height=args.size, width=args.size, num_sprites=1,
                motion="linear", seed=child_seed(),
            )
            ref_clip, _ = generate_sprite_video(ref_cfg)
            tid = f"tt_{j:03d}" if app == Application.TEXTURE_TRANSFER else f"om_{j - half:03d}"
            triplet = Triplet(video=clip, masks=masks, reference=ref_clip.frames[0], application=app, id=tid)
            save_triplet(triplet, out / "bench" / f"triplet_{j:03d}")

        config = {
            "out": str(out), "clips": args.clips, "triplets": args.triplets,
            "train_frames": args.train_frames, "bench_frames": args.bench_frames,
            "size": args.size, "seed": args.seed,
        }
        _write_run_meta(out, "gen-data", config)
    print(f"wrote {args.clips} training clips and {args.triplets} benchmark triplets under {out}")
    return 0


def load_train_dir(path) -> list:
    root = Path(path) / "train" if (Path(path) / "train").is_dir() else Path(path)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"no training clips under {root}")
    return [load_triplet(p) for p in dirs]


def load_bench_dir(path) -> list:
    root = Path(path) / "bench" if (Path(path) / "bench").is_dir() else Path(path)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"no benchmark triplets under {root}")
    triplets = [load_triplet(p) for p in dirs]
    return sorted(triplets, key=lambda t: t.id)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    out = Path(args.out)
    file_cfg = _load_config_file(args.config)
    overrides = {"steps": args.steps, "seed": args.seed, "learning_rate": args.lr}
    schedule = make_schedule()
    with _output_lock(out):
        dataset = load_train_dir(args.data)
        if args.stage == "a":
            cfg = _dataclass_from(StageAConfig, file_cfg, overrides)
            model = train_stage_a(dataset, cfg, schedule, log_path=out / "train_log.csv")
        else:
            if not args.init:
                raise ConfigurationError("Stage A checkpoint required: pass --init for --stage mmm")
            cfg = _dataclass_from(TrainConfig, file_cfg, overrides)
            model = load_checkpoint(args.init)
            train_mmm(model, dataset, cfg, schedule, log_path=out / "train_log.csv")
        save_checkpoint(model, out / "checkpoint.ived")
        _write_run_meta(out, f"train-{args.stage}", _config_dict(cfg))
    print(f"checkpoint written to {out / 'checkpoint.ived'}")
    return 0


# ---------------------------------------------------------------------------
# edit
# ---------------------------------------------------------------------------


def cmd_edit(args) -> int:
    from .bench import edit_video
    from .media import _save_png_rgb

    out = Path(args.out)
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise FormatError(f"checkpoint not found: {ckpt}")
    with _output_lock(out):
        triplet = load_triplet(args.triplet)
        model = load_checkpoint(ckpt)
        sampler = SamplerConfig(num_steps=args.steps, guidance_scale=args.guidance, seed=args.seed)
        edited = edit_video(triplet, model, sampler, window=args.window, inflated=not args.frame_wise)
        frames_dir = out / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(edited.frames):
            _save_png_rgb(frame.values, frames_dir / f"frame_{i:05d}.png")
        config = {
            "triplet": str(args.triplet), "ckpt": str(ckpt), "seed": args.seed, "steps": args.steps,
            "guidance": args.guidance, "window": args.window, "frame_wise": bool(args.frame_wise),
        }
        _write_run_meta(out, "edit", config)
    print(f"edited {len(edited)} frames into {out / 'frames'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    out = Path(args.out)
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise FormatError(f"checkpoint not found: {ckpt}")
    with _output_lock(out):
        triplets = load_bench_dir(args.bench)
        model = load_checkpoint(ckpt)
        sampler = SamplerConfig(num_steps=args.steps, guidance_scale=args.guidance, seed=args.seed)
        config = {
            "bench": str(args.bench), "ckpt": str(ckpt), "mode": args.mode, "seed": args.seed,
            "steps": args.steps, "guidance": args.guidance, "window": args.window,
        }
        report = evaluate(
            triplets, model, sampler, mode=args.mode, window=args.window, out_dir=out,
            metadata={"checkpoint": str(ckpt), "seed": args.seed},
        )
        _write_run_meta(out, "eval", config)
    print(
        f"{args.mode}: warp_error={report.warp_error:.6f} "
        f"temporal_consistency={report.temporal_consistency:.6f} "
        f"frechet={report.frechet:.6f} ref_alignment={report.ref_alignment:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATION_AXES = ("mask_ratio", "mask_strategy", "stride", "components")


def ablation_settings(axis: str, base: TrainConfig) -> list:
    if axis == "mask_ratio":
        return [(f"ratio_{int(r * 100):02d}", dataclasses.replace(base, mask_ratio=r)) for r in (0.0, 0.25, 0.5, 0.75)]
    if axis == "mask_strategy":
        return [(s, dataclasses.replace(base, mask_strategy=s)) for s in ("frame_wise", "clip_wise")]
    if axis == "stride":
        return [(f"stride_{s}", dataclasses.replace(base, stride=s)) for s in (2, 4, 8)]
    if axis == "components":
        return [
            ("exp0", dataclasses.replace(base, mask_ratio=0.0, train_groups=("motion",))),
            ("exp1", dataclasses.replace(base, train_groups=("motion",))),
            ("exp2", dataclasses.replace(base, train_groups=("motion", "motref"))),
        ]
    raise ConfigurationError(f"unknown ablation axis {axis!r}")


def cmd_ablate(args) -> int:
    out = Path(args.out)
    ckpt_a = Path(args.ckpt_a)
    if not ckpt_a.is_file():
        raise FormatError(f"stage A checkpoint not found: {ckpt_a}")
    file_cfg = _load_config_file(args.config)
    base = _dataclass_from(TrainConfig, file_cfg, {"steps": args.steps, "seed": args.seed})
    schedule = make_schedule()
    with _output_lock(out):
        dataset = load_train_dir(args.data)
        triplets = load_bench_dir(args.bench)
        sampler = SamplerConfig(num_steps=args.eval_steps, guidance_scale=args.guidance, seed=args.seed)
        flow_cache = {}
        rows = []
        for name, cfg in ablation_settings(args.axis, base):
            run_dir = out / name
            model = load_checkpoint(ckpt_a)
            train_mmm(model, dataset, cfg, schedule, log_path=run_dir / "train_log.csv", flow_cache=flow_cache)
            save_checkpoint(model, run_dir / "checkpoint.ived")
            report = evaluate(
                triplets, model, sampler, mode="inflated", window=args.window, out_dir=run_dir,
                metadata={"setting": name, "axis": args.axis},
            )
            rows.append(
                {
                    "setting": name,
                    "warp_error": report.warp_error,
                    "temporal_consistency": report.temporal_consistency,
                    "frechet": report.frechet,
                    "ref_alignment": report.ref_alignment,
                    "per_application": report.per_application,
                }
            )
            print(
                f"{name}: warp_error={report.warp_error:.6f} "
                f"temporal_consistency={report.temporal_consistency:.6f}"
            )
        (out / "sweep.json").write_text(json.dumps({"axis": args.axis, "rows": rows}, indent=2, sort_keys=True) + "\n")
        _write_run_meta(out, "ablate", {**_config_dict(base), "axis": args.axis, "eval_steps": args.eval_steps})
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivedit", description="flow-guided reference-image video editing on sprite videos")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic training corpus and benchmark triplets")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--triplets", type=int, default=24)
    p.add_argument("--train-frames", type=int, default=60)
    p.add_argument("--bench-frames", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run stage A pretraining or the masked-motion fine-tune")
    p.add_argument("--stage", choices=("a", "mmm"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config (or a saved run_meta.json)")
    p.add_argument("--init", default=None, help="stage A checkpoint (required for --stage mmm)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="edit one triplet with a trained checkpoint")
    p.add_argument("--triplet", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--frame-wise", action="store_true", help="disable temporal components (per-frame editing)")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="run the benchmark and write report files")
    p.add_argument("--bench", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("frame_wise_baseline", "inflated"), default="inflated")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--window", type=int, default=8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train + evaluate a sweep along one configuration axis")
    p.add_argument("--axis", choices=ABLATION_AXES, required=True)
    p.add_argument("--ckpt-a", required=True, dest="ckpt_a")
    p.add_argument("--data", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None, help="fine-tune steps per setting")
    p.add_argument("--eval-steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--window", type=int, default=8)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (FormatError, DatasetError, InputError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except (TrainingError, ContractError) as err:
        print(f"run failure: {err}", file=sys.stderr)
        return 4
    except IveditError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
