"""Two-stage optimization.

Stage A trains the per-frame editing model (spatial blocks + reference
encoder) on single frames with random rectangular or object masks, then
freezes those groups. The masked-motion fine-tune trains only the temporal
groups (motion modules + motion reference) on temporally downsampled clips
whose first frame serves as the reference; the conditioning latents of the
remaining frames are occluded by random grid masks, while the noised latents
stay complete, matching the layout the editing pipeline feeds at inference.

All randomness flows through one numpy Generator per run, so training is
deterministic given the seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .codec import SPATIAL_FACTOR, encode_latent
from .denoiser import EditingModel, build_conditioning, pool_depth
from .diffusion import NoiseSchedule, q_sample
from .errors import ConfigurationError, ContractError, DatasetError, InputError, TrainingError
from .flow import downsample_flow, estimate_flow
from .media import Frame, Triplet, VideoClip, pseudo_depth, temporal_downsample

MASK_STRATEGIES = ("frame_wise", "clip_wise")


@dataclass(frozen=True)
class TrainConfig:
    stride: int = 4
    clip_length: int = 8  # 1 reference + clip_length-1 training frames
    grid_n: int = 8
    mask_ratio: float = 0.75
    mask_strategy: str = "frame_wise"
    learning_rate: float = 1e-3
    steps: int = 600
    seed: int = 0
    depth_zero_prob: float = 0.3
    train_groups: tuple = ("motion", "motref")

    def __post_init__(self):
        if self.clip_length < 2:
            raise ConfigurationError("clip_length must be >= 2")
        if self.stride < 1 or self.steps < 0 or self.grid_n < 1:
            raise ConfigurationError("stride, steps and grid_n must be positive")
        if not (0.0 <= self.mask_ratio <= 1.0) or not (0.0 <= self.depth_zero_prob <= 1.0):
            raise ConfigurationError("mask_ratio and depth_zero_prob must be in [0, 1]")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ConfigurationError(f"mask_strategy must be one of {MASK_STRATEGIES}")
        bad = set(self.train_groups) - {"motion", "motref"}
        if bad:
            raise ConfigurationError(f"train_groups may only contain motion/motref, got {bad}")


@dataclass(frozen=True)
class StageAConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 4
    seed: int = 0
    ref_dropout: float = 0.1
    depth_zero_prob: float = 0.3
    sprite_mask_prob: float = 0.5
    # Optional rebalancing of the eps-MSE toward high-noise steps (where the
    # conditioning channels are the only source of content). Off by default:
    # strong weights destabilize training at this scale.
    snr_balance: float = 0.0
    snr_balance_cap: float = 5.0


def timestep_loss_weight(t: int, schedule: NoiseSchedule, balance: float, cap: float) -> float:
    ab = schedule.alpha_bar_at(t)
    return 1.0 + balance * min((1.0 - ab) / ab, cap)


def make_grid_mask(height: int, width: int, grid_n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Binary (H, W) keep-mask whose zero region is an exact union of whole
    grid cells: round(ratio * N^2) distinct cells drawn without replacement."""
    if height % grid_n or width % grid_n:
        raise ConfigurationError(f"grid size {grid_n} must divide {height}x{width}")
    n_cells = grid_n * grid_n
    n_masked = int(np.rint(ratio * n_cells))
    if not (0 <= n_masked <= n_cells):
        raise ConfigurationError(f"mask_ratio {ratio} out of range")
    cells = np.ones(n_cells, dtype=np.float32)
    if n_masked:
        chosen = rng.choice(n_cells, size=n_masked, replace=False)
        cells[chosen] = 0.0
    cell_h, cell_w = height // grid_n, width // grid_n
    grid = cells.reshape(grid_n, grid_n)
    return np.repeat(np.repeat(grid, cell_h, axis=0), cell_w, axis=1)


def _sample_clip_indexed(dataset: list, cfg: TrainConfig, rng: np.random.Generator):
    span = (cfg.clip_length - 1) * cfg.stride
    admissible = [i for i, clip in enumerate(dataset) if len(_clip_of(clip)) > span]
    if not admissible:
        raise DatasetError(
            f"no video long enough for stride={cfg.stride}, clip_length={cfg.clip_length}"
        )
    clip_index = admissible[rng.integers(len(admissible))]
    clip = _clip_of(dataset[clip_index])
    start = int(rng.integers(len(clip) - span))
    sub = temporal_downsample(clip, cfg.stride, cfg.clip_length, start)
    reference = sub.frames[0]
    return reference, VideoClip(sub.frames[1:], frame_rate=sub.frame_rate), clip_index, start


def sample_training_clip(dataset: list, cfg: TrainConfig, rng: np.random.Generator):
    """Random video, random start, temporal downsample; the first frame
    splits off as the reference. Returns (reference, VideoClip of L-1 frames)."""
    reference, frames, _, _ = _sample_clip_indexed(dataset, cfg, rng)
    return reference, frames


def _clip_of(item) -> VideoClip:
    return item.video if isinstance(item, Triplet) else item


def frame_tensor(frame: Frame, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.array(frame.values)).to(dtype)


def encode_clip(frames, dtype=torch.float32) -> torch.Tensor:
    """Stack per-frame latents into a (f, C_lat, H, W) tensor."""
    z = np.stack([encode_latent(f) for f in frames])
    return torch.from_numpy(z.astype(np.float32 if dtype == torch.float32 else np.float64))


def backward_flows_per_level(frames, num_levels: int, dtype=torch.float32) -> list:
    """Backward flow (frame i+1 -> i sampling field) for each consecutive
    pair, downsampled to every latent pyramid level."""
    h_lat = frames[0].height // SPATIAL_FACTOR
    w_lat = frames[0].width // SPATIAL_FACTOR
    per_level = [[] for _ in range(num_levels)]
    for i in range(len(frames) - 1):
        bwd = estimate_flow(frames[i + 1], frames[i], src_index=i + 1, dst_index=i)
        for lvl in range(num_levels):
            down = downsample_flow(bwd, h_lat >> lvl, w_lat >> lvl)
            per_level[lvl].append(torch.from_numpy(np.array(down.values)))
    return [torch.stack(flows).to(dtype) for flows in per_level]


@dataclass(frozen=True)
class MmmSample:
    """Frozen randomness for one fine-tuning step, so the loss is a
    deterministic function of (model, clip, sample)."""

    t: int
    eps: np.ndarray
    keep: np.ndarray
    use_zero_depth: bool


def draw_mmm_sample(num_frames: int, latent_hw: tuple, cfg: TrainConfig, schedule: NoiseSchedule,
                    rng: np.random.Generator) -> MmmSample:
    h, w = latent_hw
    c = 3 * SPATIAL_FACTOR**2
    t = int(rng.integers(1, schedule.num_steps + 1))  # one shared t per clip
    eps = rng.standard_normal((num_frames, c, h, w))
    if cfg.mask_strategy == "clip_wise":
        mask = make_grid_mask(h, w, cfg.grid_n, cfg.mask_ratio, rng)
        keep = np.repeat(mask[None, None], num_frames, axis=0)
    else:
        keep = np.stack([make_grid_mask(h, w, cfg.grid_n, cfg.mask_ratio, rng) for _ in range(num_frames)])[:, None]
    return MmmSample(t=t, eps=eps, keep=keep, use_zero_depth=bool(rng.random() < cfg.depth_zero_prob))


def mmm_loss_given(model: EditingModel, reference: Frame, frames: VideoClip, sample: MmmSample,
                   schedule: NoiseSchedule, flows_down=None, inflated: bool = True) -> torch.Tensor:
    """Denoising MSE over all positions with grid-masked conditioning latents."""
    dtype = next(model.parameters()).dtype
    z0 = encode_clip(frames.frames).to(dtype)
    eps = torch.from_numpy(sample.eps).to(dtype)
    z_t = q_sample(z0, sample.t, eps, schedule)
    keep = torch.from_numpy(sample.keep).to(dtype)
    if sample.use_zero_depth:
        depth_np = np.zeros((len(frames), 1, z0.shape[2], z0.shape[3]), dtype=np.float32)
    else:
        depth_np = np.stack([pool_depth(pseudo_depth(f).values, SPATIAL_FACTOR) for f in frames.frames])[:, None]
    depth = torch.from_numpy(depth_np).to(dtype)
    ref = model.encode_reference(frame_tensor(reference, dtype))
    cond = build_conditioning(z0, keep, depth, ref)
    if inflated and len(frames) > 1 and flows_down is None:
        flows_down = backward_flows_per_level(frames.frames, model.config.num_levels, dtype)
    pred = model(z_t, cond, sample.t, flows_down=flows_down, inflated=inflated)
    return F.mse_loss(pred, eps)


def mmm_loss(model: EditingModel, clip, schedule: NoiseSchedule, cfg: TrainConfig,
             rng: np.random.Generator, inflated: bool = True) -> torch.Tensor:
    reference, frames = clip
    h = frames.height // SPATIAL_FACTOR
    w = frames.width // SPATIAL_FACTOR
    sample = draw_mmm_sample(len(frames), (h, w), cfg, schedule, rng)
    return mmm_loss_given(model, reference, frames, sample, schedule, inflated=inflated)


# ---------------------------------------------------------------------------
# Stage A
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageASample:
    frame_index: int
    ref_index: int
    clip_index: int
    edit_mask: np.ndarray
    use_null_ref: bool
    use_zero_depth: bool
    t: int
    eps: np.ndarray


def _random_rect_mask(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    mh = int(rng.integers(height // 5, height // 2 + 1))
    mw = int(rng.integers(width // 5, width // 2 + 1))
    top = int(rng.integers(0, height - mh + 1))
    left = int(rng.integers(0, width - mw + 1))
    mask[top : top + mh, left : left + mw] = 1
    return mask


def draw_stage_a_sample(dataset: list, cfg: StageAConfig, schedule: NoiseSchedule,
                        rng: np.random.Generator) -> StageASample:
    clip_index = int(rng.integers(len(dataset)))
    triplet = dataset[clip_index]
    clip = _clip_of(triplet)
    f = len(clip)
    frame_index = int(rng.integers(f))
    if f == 1:
        ref_index = frame_index
    else:
        ref_index = int(rng.integers(f - 1))
        if ref_index >= frame_index:
            ref_index += 1
    sprite_mask = None
    if isinstance(triplet, Triplet) and not triplet.masks[frame_index].is_empty():
        sprite_mask = triplet.masks[frame_index].values
    if sprite_mask is not None and rng.random() < cfg.sprite_mask_prob:
        edit_mask = np.array(sprite_mask)
    else:
        edit_mask = _random_rect_mask(clip.height, clip.width, rng)
    h, w = clip.height // SPATIAL_FACTOR, clip.width // SPATIAL_FACTOR
    return StageASample(
        frame_index=frame_index,
        ref_index=ref_index,
        clip_index=clip_index,
        edit_mask=edit_mask,
        use_null_ref=bool(rng.random() < cfg.ref_dropout),
        use_zero_depth=bool(rng.random() < cfg.depth_zero_prob),
        t=int(rng.integers(1, schedule.num_steps + 1)),
        eps=rng.standard_normal((1, 3 * SPATIAL_FACTOR**2, h, w)),
    )


def stage_a_sample_loss(model: EditingModel, dataset: list, sample: StageASample,
                        schedule: NoiseSchedule, cfg: StageAConfig = StageAConfig()) -> torch.Tensor:
    from .denoiser import keep_mask_from_edit  # local import keeps module load light

    dtype = next(model.parameters()).dtype
    clip = _clip_of(dataset[sample.clip_index])
    frame = clip.frames[sample.frame_index]
    reference = clip.frames[sample.ref_index]
    z0 = encode_clip([frame]).to(dtype)
    eps = torch.from_numpy(sample.eps).to(dtype)
    z_t = q_sample(z0, sample.t, eps, schedule)
    keep = torch.from_numpy(keep_mask_from_edit(sample.edit_mask, SPATIAL_FACTOR)[None, None]).to(dtype)
    if sample.use_zero_depth:
        depth_np = np.zeros((1, 1, z0.shape[2], z0.shape[3]), dtype=np.float32)
    else:
        depth_np = pool_depth(pseudo_depth(frame).values, SPATIAL_FACTOR)[None, None]
    depth = torch.from_numpy(depth_np).to(dtype)
    ref = model.encode_reference(frame_tensor(reference, dtype), null=sample.use_null_ref)
    cond = build_conditioning(z0, keep, depth, ref)
    pred = model(z_t, cond, sample.t, inflated=False)
    weight = timestep_loss_weight(sample.t, schedule, cfg.snr_balance, cfg.snr_balance_cap)
    return weight * F.mse_loss(pred, eps)


class _LossLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        self.t0 = time.monotonic()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("step,loss,wallclock_s\n")
            self._fh = self.path.open("a")

    def record(self, step: int, loss: float):
        if self.path:
            self._fh.write(f"{step},{loss:.6f},{time.monotonic() - self.t0:.3f}\n")

    def close(self):
        if self.path:
            self._fh.close()


def train_stage_a(dataset: list, cfg: StageAConfig, schedule: NoiseSchedule,
                  model: EditingModel = None, log_path=None) -> EditingModel:
    """Optimize spatial blocks + reference encoder frame-wise, then flag both
    groups frozen. Raises TrainingError when the smoothed loss diverges past
    10x its initial value after 20% of the schedule."""
    if not dataset:
        raise DatasetError("stage A needs a non-empty dataset")
    if model is None:
        model = EditingModel()
    model.set_trainable(spatial=True, refenc=True, motion=False, motref=False)
    groups = model.parameter_groups()
    params = list(groups["spatial"].values()) + list(groups["refenc"].values())
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    log = _LossLog(log_path)
    smoothed = None
    initial = None
    for step in range(cfg.steps):
        opt.zero_grad()
        losses = []
        for _ in range(cfg.batch_size):
            sample = draw_stage_a_sample(dataset, cfg, schedule, rng)
            losses.append(stage_a_sample_loss(model, dataset, sample, schedule, cfg))
        loss = torch.stack(losses).mean()
        loss.backward()
        opt.step()
        value = float(loss.detach())
        smoothed = value if smoothed is None else 0.98 * smoothed + 0.02 * value
        if step == min(19, cfg.steps - 1):
            initial = smoothed
        if initial is not None and step >= 0.2 * cfg.steps and smoothed > 10.0 * initial:
            log.close()
            raise TrainingError(f"stage A diverged: smoothed loss {smoothed:.3f} vs initial {initial:.3f}")
        log.record(step, value)
    log.close()
    model.set_trainable(spatial=False, refenc=False, motion=True, motref=True)
    return model


# ---------------------------------------------------------------------------
# Masked-motion fine-tune
# ---------------------------------------------------------------------------


def _snapshot(params: dict) -> dict:
    return {name: p.detach().clone() for name, p in params.items()}


def train_mmm(model: EditingModel, dataset: list, cfg: TrainConfig, schedule: NoiseSchedule,
              log_path=None, flow_cache: dict = None) -> EditingModel:
    """Fine-tune the temporal groups listed in cfg.train_groups; every other
    tensor is asserted bit-identical afterwards."""
    if model.trainable.get("spatial") or model.trainable.get("refenc"):
        raise ContractError("train_mmm requires a stage-A model with frozen spatial/refenc groups")
    trainable = {g: (g in cfg.train_groups) for g in ("motion", "motref")}
    model.set_trainable(spatial=False, refenc=False, **trainable)
    groups = model.parameter_groups()
    frozen_names = [g for g in groups if not model.trainable[g]]
    frozen_before = {g: _snapshot(groups[g]) for g in frozen_names}
    params = [p for g in cfg.train_groups for p in groups[g].values()]
    if cfg.steps > 0 and not params:
        raise ConfigurationError("train_groups empty: nothing to optimize")
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    if flow_cache is None:
        flow_cache = {}
    log = _LossLog(log_path)
    dtype = next(model.parameters()).dtype
    for step in range(cfg.steps):
        reference, frames, clip_index, start = _sample_clip_indexed(dataset, cfg, rng)
        h = frames.height // SPATIAL_FACTOR
        w = frames.width // SPATIAL_FACTOR
        sample = draw_mmm_sample(len(frames), (h, w), cfg, schedule, rng)
        key = (clip_index, start, cfg.stride, cfg.clip_length)
        flows = flow_cache.get(key)
        if flows is None:
            flows = backward_flows_per_level(frames.frames, model.config.num_levels, dtype)
            flow_cache[key] = flows
        opt.zero_grad()
        loss = mmm_loss_given(model, reference, frames, sample, schedule, flows_down=flows)
        loss.backward()
        opt.step()
        log.record(step, float(loss.detach()))
    log.close()
    for g in frozen_names:
        for name, p in groups[g].items():
            if not torch.equal(p.detach(), frozen_before[g][name]):
                raise ContractError(f"frozen tensor {name} changed during fine-tuning")
    return model
