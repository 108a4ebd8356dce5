"""Evaluation harness: the editing pipeline driver, four video metrics, and
per-triplet report aggregation.

Metrics use the artifact's own frozen reference encoder as the feature
extractor, so absolute values are self-contained and deterministic; only
directions are comparable across configurations. Warp error and its validity
masks are always derived from the SOURCE video's flow, since edited regions
carry no reliable flow of their own.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import map_coordinates

from .codec import SPATIAL_FACTOR, decode_latent
from .denoiser import EditingModel, build_conditioning, keep_mask_from_edit, pool_depth
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample, make_schedule, seeded_noise
from .errors import InputError
from .flow import FlowField, downsample_flow, estimate_flow, forward_backward_check
from .media import Application, Frame, Triplet, VideoClip, pseudo_depth, zero_depth
from .motref import bilinear_warp
from .training import backward_flows_per_level, encode_clip, frame_tensor

log = logging.getLogger(__name__)

FB_CHECK_TAU = 1.0  # px; forward-backward residual threshold for validity

EVAL_MODES = ("frame_wise_baseline", "inflated")


# ---------------------------------------------------------------------------
# Editing pipeline
# ---------------------------------------------------------------------------


def _window_ranges(total: int, window: int):
    for start in range(0, total, window):
        yield start, min(start + window, total)


def edit_video(triplet: Triplet, model: EditingModel, sampler: SamplerConfig,
               schedule: NoiseSchedule = None, window: int = 8, inflated: bool = True) -> VideoClip:
    """Replace the masked region of every frame with generated content
    conditioned on the reference image.

    Frames are processed in windows of `window` frames; per-frame initial
    noise is seeded by (sampler.seed, absolute frame index) so the draw does
    not depend on the windowing. Outside the masks the source pixels pass
    through untouched.
    """
    if schedule is None:
        schedule = make_schedule()
    model.eval()
    video, masks = triplet.video, triplet.masks
    zero = triplet.application == Application.OBJECT_MODIFICATION
    ref_t = frame_tensor(triplet.reference)
    out_frames = []
    with torch.no_grad():
        ref = model.encode_reference(ref_t)
        null_ref = model.encode_reference(ref_t, null=True)
        for lo, hi in _window_ranges(len(video), window):
            frames = video.frames[lo:hi]
            f = len(frames)
            z0 = encode_clip(frames)
            keep = torch.from_numpy(
                np.stack([keep_mask_from_edit(masks[lo + i].values, SPATIAL_FACTOR) for i in range(f)])[:, None]
            )
            if zero:
                depth_np = np.stack([zero_depth(z0.shape[2], z0.shape[3]).values for _ in range(f)])[:, None]
            else:
                depth_np = np.stack([pool_depth(pseudo_depth(fr).values, SPATIAL_FACTOR) for fr in frames])[:, None]
            depth = torch.from_numpy(depth_np)
            cond = build_conditioning(z0, keep, depth, ref, null_ref)
            use_temporal = inflated and f > 1
            flows = backward_flows_per_level(frames, model.config.num_levels) if use_temporal else None

            def model_fn(z, c, t, _flows=flows, _temporal=use_temporal):
                return model(z, c, t, flows_down=_flows, inflated=_temporal)

            z_init = torch.from_numpy(
                np.stack([seeded_noise(z0.shape[1:], (sampler.seed, lo + i)) for i in range(f)]).astype(np.float32)
            )
            latents = ddim_sample(model_fn, cond, schedule, sampler, z_init=z_init)
            for i in range(f):
                generated = decode_latent(latents[i].numpy()).values
                m = masks[lo + i].values.astype(bool)
                composed = np.where(m[None], generated, frames[i].values)
                out_frames.append(Frame(composed))
    return VideoClip(out_frames, frame_rate=video.frame_rate)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def source_flow_pairs(video: VideoClip, tau: float = FB_CHECK_TAU):
    """Backward flows (i+1 -> i) with forward-backward validity masks for
    every consecutive pair of the video."""
    flows, validity = [], []
    for i in range(len(video) - 1):
        bwd = estimate_flow(video.frames[i + 1], video.frames[i], src_index=i + 1, dst_index=i)
        fwd = estimate_flow(video.frames[i], video.frames[i + 1], src_index=i, dst_index=i + 1)
        flows.append(bwd)
        validity.append(forward_backward_check(bwd, fwd, tau))
    return flows, validity


def warp_error(video: VideoClip, flows: list, validity: list) -> float:
    """Mean over frame pairs of the validity-masked MSE between frame i+1 and
    frame i warped onto its grid by the supplied backward flow."""
    if len(flows) != len(video) - 1 or len(validity) != len(flows):
        raise InputError(f"need {len(video) - 1} flows and validity masks, got {len(flows)}/{len(validity)}")
    errors = []
    empty = 0
    with torch.no_grad():
        for i, flow in enumerate(flows):
            warped = bilinear_warp(
                torch.from_numpy(np.array(video.frames[i].values, dtype=np.float64)),
                torch.from_numpy(np.array(flow.values, dtype=np.float64)),
            ).numpy()
            valid = validity[i].values.astype(bool)
            if not valid.any():
                empty += 1
                errors.append(0.0)
                continue
            diff = (video.frames[i + 1].values.astype(np.float64) - warped) ** 2
            errors.append(float(diff[:, valid].mean()))
    if empty:
        log.warning("warp_error: %d of %d pairs had empty validity regions", empty, len(flows))
    return float(np.mean(errors))


def temporal_consistency(video: VideoClip, encoder) -> float:
    """Mean cosine similarity of consecutive frames' global embeddings."""
    if len(video) < 2:
        raise InputError("temporal consistency needs at least 2 frames")
    embeddings = [np.asarray(encoder(f), dtype=np.float64) for f in video.frames]
    sims = []
    for a, b in zip(embeddings[:-1], embeddings[1:]):
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        sims.append(float(a @ b / denom) if denom > 1e-12 else 0.0)
    return float(np.mean(sims))


def _cov(features: np.ndarray) -> np.ndarray:
    return np.cov(features, rowvar=False, ddof=1)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) between Gaussian
    fits; the cross term uses sqrt(S_a) S_b sqrt(S_a) symmetrization with
    negative eigenvalues clamped to zero."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise InputError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InputError("need at least 2 feature vectors per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sig_a, sig_b = np.atleast_2d(_cov(a)), np.atleast_2d(_cov(b))
    root_a = _sqrtm_psd(sig_a)
    cross = _sqrtm_psd(root_a @ sig_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sig_a) + np.trace(sig_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def _bbox(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def _resize_rgb(values: np.ndarray, height: int, width: int) -> np.ndarray:
    _, h, w = values.shape
    ys = np.linspace(0.0, h - 1.0, height)
    xs = np.linspace(0.0, w - 1.0, width)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    out = np.stack([map_coordinates(ch.astype(np.float64), [gy, gx], order=1, mode="nearest") for ch in values])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def ref_alignment(edited: VideoClip, masks, reference: Frame, encoder) -> float:
    """100 x mean cosine between embeddings of the mask-bounding-box crops of
    edited frames and the reference embedding; empty-mask frames are skipped."""
    ref_emb = np.asarray(encoder(reference), dtype=np.float64)
    sims = []
    for frame, mask in zip(edited.frames, masks):
        m = mask.values
        if not m.any():
            continue
        r0, r1, c0, c1 = _bbox(m)
        crop = frame.values[:, r0:r1, c0:c1]
        resized = Frame(_resize_rgb(crop, reference.height, reference.width))
        emb = np.asarray(encoder(resized), dtype=np.float64)
        denom = np.linalg.norm(ref_emb) * np.linalg.norm(emb)
        sims.append(float(ref_emb @ emb / denom) if denom > 1e-12 else 0.0)
    if not sims:
        raise InputError("all masks are empty; reference alignment undefined")
    return 100.0 * float(np.mean(sims))


def make_frame_encoder(model: EditingModel):
    """Frozen global-embedding extractor used by every metric."""

    def encoder(frame: Frame) -> np.ndarray:
        with torch.no_grad():
            return model.encode_reference(frame_tensor(frame)).global_embedding.numpy().astype(np.float64)

    return encoder


# ---------------------------------------------------------------------------
# Per-triplet evaluation and reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    warp_error: float = float("nan")
    temporal_consistency: float = float("nan")
    frechet: float = float("nan")
    ref_alignment: float = float("nan")
    per_triplet: dict = field(default_factory=dict)
    per_application: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def aggregate(self):
        if not self.per_triplet:
            return self
        keys = ("warp_error", "temporal_consistency", "frechet", "ref_alignment")
        for key in keys:
            setattr(self, key, float(np.mean([row[key] for row in self.per_triplet.values()])))
        apps = sorted({row["application"] for row in self.per_triplet.values()})
        self.per_application = {
            app: {
                key: float(np.mean([row[key] for row in self.per_triplet.values() if row["application"] == app]))
                for key in keys
            }
            for app in apps
        }
        return self

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "report.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["triplet_id", "application", "warp_error", "temporal_consistency", "frechet", "ref_alignment"])
            for tid in sorted(self.per_triplet):
                row = self.per_triplet[tid]
                writer.writerow(
                    [tid, row["application"], f"{row['warp_error']:.8f}", f"{row['temporal_consistency']:.8f}",
                     f"{row['frechet']:.8f}", f"{row['ref_alignment']:.8f}"]
                )
        payload = {
            "aggregate": {
                "warp_error": self.warp_error,
                "temporal_consistency": self.temporal_consistency,
                "frechet": self.frechet,
                "ref_alignment": self.ref_alignment,
            },
            "per_application": self.per_application,
            "num_triplets": len(self.per_triplet),
            "metadata": self.metadata,
        }
        (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def triplet_metrics(edited: VideoClip, triplet: Triplet, encoder, source_flows=None) -> dict:
    """All four metrics for one edited clip, with flows/validity taken from
    the source video."""
    if source_flows is None:
        source_flows = source_flow_pairs(triplet.video)
    flows, validity = source_flows
    features_edit = np.stack([encoder(f) for f in edited.frames])
    features_src = np.stack([encoder(f) for f in triplet.video.frames])
    return {
        "application": triplet.application.value,
        "warp_error": warp_error(edited, flows, validity),
        "temporal_consistency": temporal_consistency(edited, encoder),
        "frechet": frechet_distance(features_edit, features_src),
        "ref_alignment": ref_alignment(edited, triplet.masks, triplet.reference, encoder),
    }


def evaluate(triplets: list, model: EditingModel, sampler: SamplerConfig, mode: str = "inflated",
             schedule: NoiseSchedule = None, window: int = 8, out_dir=None, metadata: dict = None) -> MetricsReport:
    """Edit every triplet and aggregate metrics; the frame-wise baseline
    forces single-frame windows with the temporal components disabled."""
    if mode not in EVAL_MODES:
        raise InputError(f"mode must be one of {EVAL_MODES}")
    if schedule is None:
        schedule = make_schedule()
    inflated = mode == "inflated"
    encoder = make_frame_encoder(model)
    report = MetricsReport(metadata={"mode": mode, "sampler": vars(sampler).copy(), **(metadata or {})})
    for triplet in triplets:
        edited = edit_video(
            triplet, model, sampler, schedule=schedule,
            window=window if inflated else 1, inflated=inflated,
        )
        report.per_triplet[triplet.id] = triplet_metrics(edited, triplet, encoder)
    report.aggregate()
    if out_dir is not None:
        report.write(out_dir)
    return report
