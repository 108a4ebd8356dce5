#!/usr/bin/env python3
"""End-to-end experiment driver: corpus generation, two-stage training, and
the baseline-vs-inflated benchmark comparison, all through the CLI code
paths. Artifacts land under --workdir and are reused if present, so the
script can be re-run incrementally.

  python3 scripts/run_pipeline.py --workdir /tmp/ivedit-run            # full scale
  python3 scripts/run_pipeline.py --workdir /tmp/ivedit-smoke --smoke  # quick pass
  python3 scripts/run_pipeline.py --workdir ... --ablate mask_ratio    # add a sweep
"""

import argparse
import json
import sys
import time
from pathlib import Path

from ivedit.cli import main as cli


def run(args):
    print("+ ivedit " + " ".join(str(a) for a in args))
    t0 = time.time()
    code = cli([str(a) for a in args])
    print(f"  ({time.time() - t0:.1f}s)")
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--smoke", action="store_true", help="tiny corpus and step counts")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--stage-a-steps", type=int, default=None)
    ap.add_argument("--mmm-steps", type=int, default=None)
    ap.add_argument("--eval-steps", type=int, default=50)
    ap.add_argument("--ablate", choices=("mask_ratio", "mask_strategy", "stride", "components"),
                    default=None)
    ap.add_argument("--ablate-steps", type=int, default=None)
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    if args.smoke:
        gen_args = ["--clips", 12, "--triplets", 4, "--train-frames", 30, "--bench-frames", 4]
        stage_a_steps = args.stage_a_steps or 120
        mmm_steps = args.mmm_steps or 80
    else:
        gen_args = []
        stage_a_steps = args.stage_a_steps or 2000
        mmm_steps = args.mmm_steps or 600

    data = work / "data"
    if not (data / "run_meta.json").exists():
        run(["gen-data", "--out", data, "--seed", args.seed] + gen_args)

    ckpt_a = work / "stage_a" / "checkpoint.ived"
    if not ckpt_a.exists():
        run(["train", "--stage", "a", "--data", data, "--out", work / "stage_a",
             "--steps", stage_a_steps, "--seed", args.seed])

    ckpt_mmm = work / "mmm" / "checkpoint.ived"
    if not ckpt_mmm.exists():
        run(["train", "--stage", "mmm", "--data", data, "--out", work / "mmm",
             "--init", ckpt_a, "--steps", mmm_steps, "--seed", args.seed])

    for mode, ckpt in (("frame_wise_baseline", ckpt_mmm), ("inflated", ckpt_mmm)):
        out = work / f"eval_{mode}"
        if not (out / "report.json").exists():
            run(["eval", "--bench", data, "--ckpt", ckpt, "--out", out, "--mode", mode,
                 "--steps", args.eval_steps, "--seed", args.seed])

    baseline = json.loads((work / "eval_frame_wise_baseline" / "report.json").read_text())["aggregate"]
    inflated = json.loads((work / "eval_inflated" / "report.json").read_text())["aggregate"]
    print("\n=== baseline vs inflated ===")
    for key in ("warp_error", "temporal_consistency", "frechet", "ref_alignment"):
        b, i = baseline[key], inflated[key]
        print(f"{key:22s} baseline={b:.6f} inflated={i:.6f} ratio={i / b if b else float('nan'):.4f}")

    if args.ablate:
        sweep = work / f"ablate_{args.ablate}"
        if not (sweep / "sweep.json").exists():
            run(["ablate", "--axis", args.ablate, "--ckpt-a", ckpt_a, "--data", data,
                 "--bench", data, "--out", sweep, "--steps", args.ablate_steps or mmm_steps,
                 "--eval-steps", 20, "--seed", args.seed])
        rows = json.loads((sweep / "sweep.json").read_text())["rows"]
        print(f"\n=== {args.ablate} sweep ===")
        for row in rows:
            print(f"{row['setting']:12s} warp_error={row['warp_error']:.6f} "
                  f"temporal_consistency={row['temporal_consistency']:.6f}")


if __name__ == "__main__":
    main()
