"""Inflated editing noise-predictor.

A three-level encoder-decoder runs per frame: residual conv blocks with
timestep conditioning plus cross-attention over reference-image features.
When `inflated`, each block is followed by a flow-guided motion reference
step and a temporal self-attention motion module, both initialized to the
exact identity, so an inflated forward with fresh temporal parameters is
bit-identical to the per-frame model.

Spatial computation deliberately loops over frames with batch size 1: the
result of editing a frame must not depend on how frames are windowed
together, which makes the inflation identity exact rather than approximate.

Checkpoint container (little-endian): magic "IVED", version u32, tensor
count u32; per tensor: name length u16, UTF-8 name, dtype tag u8 (0 = f32),
rank u8, dims u32 each, raw f32 payload. Names carry group prefixes
(spatial/, refenc/, motion/, motref/); meta/ entries hold trainable flags
and the model configuration.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .codec import LATENT_CHANNELS
from .errors import CheckpointError, ContractError, InputError
from .motref import MotionReference

GROUP_ORDER = ("spatial", "refenc", "motion", "motref")

CHECKPOINT_MAGIC = b"IVED"
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 0


@dataclass(frozen=True)
class ModelConfig:
    c_lat: int = LATENT_CHANNELS
    base_width: int = 32
    level_mult: tuple = (1, 2, 4)
    blocks_per_level: int = 2
    time_dim: int = 128
    embed_dim: int = 64
    ref_widths: tuple = (16, 32, 64)
    motref_hidden: int = 32

    @property
    def num_levels(self) -> int:
        return len(self.level_mult)

    @property
    def widths(self) -> tuple:
        return tuple(self.base_width * m for m in self.level_mult)

    def to_vector(self) -> np.ndarray:
        vals = [self.c_lat, self.base_width, *self.level_mult, self.blocks_per_level,
                self.time_dim, self.embed_dim, *self.ref_widths, self.motref_hidden]
        return np.asarray(vals, dtype=np.float32)

    @classmethod
    def from_vector(cls, vec) -> "ModelConfig":
        v = [int(round(float(x))) for x in vec]
        if len(v) != 12:
            raise CheckpointError(f"bad meta/config length {len(v)}")
        return cls(c_lat=v[0], base_width=v[1], level_mult=tuple(v[2:5]), blocks_per_level=v[5],
                   time_dim=v[6], embed_dim=v[7], ref_widths=tuple(v[8:11]), motref_hidden=v[11])


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard transformer sin/cos embedding; positions (N,) -> (N, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=positions.dtype, device=positions.device) / half
    )
    args = positions[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


@dataclass(frozen=True)
class RefFeatures:
    """Reference conditioning: a pooled global embedding plus one feature map
    per resolution level. `is_null` marks the learned unconditional branch."""

    global_embedding: torch.Tensor
    level_features: tuple
    is_null: bool = False


@dataclass(frozen=True)
class ConditioningBundle:
    masked_latents: torch.Tensor  # (f, C_lat, H, W), zero wherever keep == 0
    keep_masks: torch.Tensor      # (f, 1, H, W)
    depth: torch.Tensor           # (f, 1, H, W)
    ref_features: RefFeatures
    null_ref_features: RefFeatures = None

    def __post_init__(self):
        f, _, h, w = self.masked_latents.shape
        for name, tensor in (("keep_masks", self.keep_masks), ("depth", self.depth)):
            if tensor.shape != (f, 1, h, w):
                raise InputError(f"{name} shape {tuple(tensor.shape)} != ({f}, 1, {h}, {w})")
        hidden = self.masked_latents * (self.keep_masks == 0)
        if hidden.abs().max().item() != 0.0:
            raise InputError("masked_latents must be exactly zero where keep_mask is zero")

    @property
    def num_frames(self) -> int:
        return self.masked_latents.shape[0]

    def with_null_reference(self) -> "ConditioningBundle":
        if self.null_ref_features is None:
            raise ContractError("bundle was built without a null reference branch")
        return replace(self, ref_features=self.null_ref_features)


def build_conditioning(z0, keep, depth, ref_features, null_ref_features=None) -> ConditioningBundle:
    """Zeroes the conditioning latents outside the keep region and packs the
    bundle; this is the single layout used by both fine-tuning and editing."""
    return ConditioningBundle(
        masked_latents=z0 * keep,
        keep_masks=keep,
        depth=depth,
        ref_features=ref_features,
        null_ref_features=null_ref_features,
    )


def keep_mask_from_edit(edit_mask: np.ndarray, factor: int) -> np.ndarray:
    """Pixel-space edit mask -> latent-space keep mask. A latent cell is
    editable (keep = 0) if any pixel in its factor x factor block is."""
    h, w = edit_mask.shape
    if h % factor or w % factor:
        raise InputError(f"mask dims {h}x{w} not divisible by {factor}")
    blocks = edit_mask.reshape(h // factor, factor, w // factor, factor)
    edited = blocks.max(axis=(1, 3))
    return (1 - edited).astype(np.float32)


def pool_depth(depth: np.ndarray, factor: int) -> np.ndarray:
    """Area-average a pixel-space depth map down to latent resolution."""
    h, w = depth.shape
    if h % factor or w % factor:
        raise InputError(f"depth dims {h}x{w} not divisible by {factor}")
    blocks = depth.reshape(h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(1, 3)).astype(np.float32)


class ResBlock(nn.Module):
    """Residual conv block with scale-shift timestep conditioning: the noise
    level modulates feature gain, which additive conditioning alone cannot
    express across three orders of magnitude of sqrt(alpha_bar)."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_proj(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head attention from spatial positions onto reference tokens
    (flattened level feature map plus one global token)."""

    def __init__(self, channels: int, ref_channels: int, global_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k_level = nn.Linear(ref_channels, channels)
        self.to_v_level = nn.Linear(ref_channels, channels)
        self.to_k_global = nn.Linear(global_dim, channels)
        self.to_v_global = nn.Linear(global_dim, channels)
        self.to_out = nn.Linear(channels, channels)
        self.scale = channels**-0.5

    def forward(self, x, level_feat, global_emb):
        _, c, h, w = x.shape
        tokens = self.norm(x)[0].reshape(c, h * w).transpose(0, 1)
        q = self.to_q(tokens)
        ref_tokens = level_feat.reshape(level_feat.shape[0], -1).transpose(0, 1)
        k = torch.cat([self.to_k_level(ref_tokens), self.to_k_global(global_emb)[None, :]], dim=0)
        v = torch.cat([self.to_v_level(ref_tokens), self.to_v_global(global_emb)[None, :]], dim=0)
        attn = torch.softmax(q @ k.transpose(0, 1) * self.scale, dim=-1)
        out = self.to_out(attn @ v)
        return x + out.transpose(0, 1).reshape(1, c, h, w)


class SpatialBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, ref_channels: int, global_dim: int):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, time_dim)
        self.attn = CrossAttention(out_ch, ref_channels, global_dim)

    def forward(self, x, temb, ref_level, ref_global):
        # One frame at a time: results must not depend on window batching.
        frames = [self.attn(self.res(x[i : i + 1], temb), ref_level, ref_global) for i in range(x.shape[0])]
        return torch.cat(frames, dim=0)


class MotionModule(nn.Module):
    """Temporal self-attention across frames at each spatial location.

    Keys carry no positional term, so equal frames attend uniformly; position
    enters through queries and values. The output projection starts at zero,
    making the module a residual identity at initialization, and a single
    frame short-circuits because it has no temporal context.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)
        self.scale = channels**-0.5

    def _attend(self, x):
        f, c, h, w = x.shape
        tokens = x.permute(2, 3, 0, 1).reshape(h * w, f, c)
        normed = self.norm(tokens)
        pos = sinusoidal_embedding(torch.arange(f, dtype=x.dtype, device=x.device), c)
        q = self.to_q(normed + pos)
        k = self.to_k(normed)
        v = self.to_v(normed + pos)
        weights = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)  # (HW, f, f)
        out = self.to_out(weights @ v)
        return out.reshape(h, w, f, c).permute(2, 3, 0, 1), weights

    def forward(self, x):
        if x.shape[0] == 1:
            return x
        out, _ = self._attend(x)
        return x + out

    def attention_weights(self, x) -> torch.Tensor:
        _, weights = self._attend(x)
        return weights


class ReferenceEncoder(nn.Module):
    """Three-level conv pyramid over the reference frame plus a pooled global
    embedding; also owns the learned null (unconditional) features."""

    def __init__(self, widths=(16, 32, 64), embed_dim: int = 64):
        super().__init__()
        w0, w1, w2 = widths
        self.widths = tuple(widths)
        self.embed_dim = embed_dim
        self.stem = nn.Conv2d(3, w0, 4, stride=4)
        self.block0 = nn.Conv2d(w0, w0, 3, padding=1)
        self.down1 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.block1 = nn.Conv2d(w1, w1, 3, padding=1)
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.block2 = nn.Conv2d(w2, w2, 3, padding=1)
        self.to_global = nn.Linear(w2, embed_dim)
        self.null_global = nn.Parameter(torch.randn(embed_dim) * 0.02)
        self.null_levels = nn.ParameterList(nn.Parameter(torch.randn(w) * 0.02) for w in widths)

    def level_dims(self, height: int, width: int) -> list:
        if height % 16 or width % 16:
            raise InputError(f"reference dims {height}x{width} must be divisible by 16")
        return [(height // 4, width // 4), (height // 8, width // 8), (height // 16, width // 16)]

    def forward(self, frame: torch.Tensor, null: bool = False) -> RefFeatures:
        if frame.dim() != 3 or frame.shape[0] != 3:
            raise InputError(f"reference must be (3, U, V), got {tuple(frame.shape)}")
        dims = self.level_dims(frame.shape[1], frame.shape[2])
        if null:
            levels = tuple(
                self.null_levels[i].view(-1, 1, 1).expand(-1, h, w) for i, (h, w) in enumerate(dims)
            )
            return RefFeatures(self.null_global, levels, is_null=True)
        x = frame.unsqueeze(0)
        l0, l1, l2 = self._pyramid(x)
        pooled = l2.mean(dim=(2, 3))[0]
        # Subtract the response to a neutral gray input (after the projection,
        # so its bias cancels too): the raw embedding is dominated by an
        # input-independent component that would push every cosine similarity
        # to ~1 and blind the downstream metrics.
        gray = torch.full_like(x, 0.5)
        baseline = self._pyramid(gray)[2].mean(dim=(2, 3))[0]
        emb = self.to_global(pooled) - self.to_global(baseline)
        emb = (emb - emb.mean()) / (emb.std(unbiased=False) + 1e-6)
        return RefFeatures(emb, (l0[0], l1[0], l2[0]), is_null=False)

    def _pyramid(self, x):
        l0 = self.block0(F.silu(self.stem(x)))
        l1 = self.block1(F.silu(self.down1(F.silu(l0))))
        l2 = self.block2(F.silu(self.down2(F.silu(l1))))
        return l0, l1, l2


class EditingModel(nn.Module):
    """The full editing network with named parameter groups: `spatial`
    (per-frame UNet), `refenc` (reference encoder), `motion` and `motref`
    (temporal components, zero-initialized)."""

    def __init__(self, config: ModelConfig = ModelConfig(), init_seed: int = 0):
        super().__init__()
        self.config = config
        widths = config.widths
        nl = config.num_levels
        bpl = config.blocks_per_level
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.reference_encoder = ReferenceEncoder(config.ref_widths, config.embed_dim)
            self.time_embed = nn.Sequential(
                nn.Linear(config.embed_dim, config.time_dim), nn.SiLU(), nn.Linear(config.time_dim, config.time_dim)
            )
            self.conv_in = nn.Conv2d(2 * config.c_lat + 2, widths[0], 3, padding=1)

            down_spatial, down_motion, down_motref = [], [], []
            for lvl in range(nl):
                for _ in range(bpl):
                    down_spatial.append(
                        SpatialBlock(widths[lvl], widths[lvl], config.time_dim, config.ref_widths[lvl], config.embed_dim)
                    )
                    down_motion.append(MotionModule(widths[lvl]))
                    down_motref.append(MotionReference(widths[lvl], config.motref_hidden))
            self.down_spatial = nn.ModuleList(down_spatial)
            self.down_motion = nn.ModuleList(down_motion)
            self.down_motref = nn.ModuleList(down_motref)
            self.downsamples = nn.ModuleList(
                nn.Conv2d(widths[lvl], widths[lvl + 1], 3, stride=2, padding=1) for lvl in range(nl - 1)
            )

            up_spatial, up_motion, up_motref = [], [], []
            for lvl in range(nl - 1, -1, -1):
                for _ in range(bpl):
                    up_spatial.append(
                        SpatialBlock(2 * widths[lvl], widths[lvl], config.time_dim, config.ref_widths[lvl], config.embed_dim)
                    )
                    up_motion.append(MotionModule(widths[lvl]))
                    up_motref.append(MotionReference(widths[lvl], config.motref_hidden))
            self.up_spatial = nn.ModuleList(up_spatial)
            self.up_motion = nn.ModuleList(up_motion)
            self.up_motref = nn.ModuleList(up_motref)
            self.upsamples = nn.ModuleList(
                nn.Conv2d(widths[lvl], widths[lvl - 1], 3, padding=1) for lvl in range(nl - 1, 0, -1)
            )

            self.out_norm = nn.GroupNorm(8, widths[0])
            self.conv_out = nn.Conv2d(widths[0], config.c_lat, 3, padding=1)
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)
        self.trainable = {g: True for g in GROUP_ORDER}

    # -- parameter grouping ------------------------------------------------

    @staticmethod
    def group_of(param_name: str) -> str:
        head = param_name.split(".", 1)[0]
        if head == "reference_encoder":
            return "refenc"
        if head in ("down_motion", "up_motion"):
            return "motion"
        if head in ("down_motref", "up_motref"):
            return "motref"
        return "spatial"

    def parameter_groups(self) -> dict:
        groups = {g: {} for g in GROUP_ORDER}
        for name, param in self.named_parameters():
            groups[self.group_of(name)][name] = param
        return groups

    def set_trainable(self, **flags) -> None:
        for group, flag in flags.items():
            if group not in GROUP_ORDER:
                raise InputError(f"unknown parameter group {group!r}")
            self.trainable[group] = bool(flag)
        for name, param in self.named_parameters():
            param.requires_grad_(self.trainable[self.group_of(name)])

    def encode_reference(self, frame: torch.Tensor, null: bool = False) -> RefFeatures:
        return self.reference_encoder(frame, null=null)

    # -- forward -----------------------------------------------------------

    def _check_flows(self, flows_down, f, h, w):
        nl = self.config.num_levels
        if flows_down is None or len(flows_down) != nl:
            raise ContractError(f"inflated forward needs {nl} per-level flow tensors")
        for lvl, flows in enumerate(flows_down):
            expect = (f - 1, 2, h >> lvl, w >> lvl)
            if tuple(flows.shape) != expect:
                raise ContractError(f"level {lvl} flows have shape {tuple(flows.shape)}, expected {expect}")

    def forward(self, z_t: torch.Tensor, cond: ConditioningBundle, t: int, flows_down=None, inflated: bool = False):
        f, c, h, w = z_t.shape
        if c != self.config.c_lat:
            raise ContractError(f"latent channels {c} != configured {self.config.c_lat}")
        if cond.num_frames != f or cond.masked_latents.shape[-2:] != z_t.shape[-2:]:
            raise ContractError("conditioning bundle does not match the noised latents")
        temporal = inflated and f > 1
        if temporal:
            self._check_flows(flows_down, f, h, w)

        ref = cond.ref_features
        x = torch.cat([z_t, cond.masked_latents, cond.keep_masks, cond.depth], dim=1)
        dtype = self.conv_in.weight.dtype
        temb = self.time_embed(
            sinusoidal_embedding(torch.tensor([float(t)], dtype=dtype, device=z_t.device), self.config.embed_dim)
        )

        nl, bpl = self.config.num_levels, self.config.blocks_per_level
        hcur = torch.cat([self.conv_in(x[i : i + 1]) for i in range(f)], dim=0)
        skips = []
        bi = 0
        for lvl in range(nl):
            for _ in range(bpl):
                hcur = self.down_spatial[bi](hcur, temb, ref.level_features[lvl], ref.global_embedding)
                if temporal:
                    hcur = self.down_motref[bi](hcur, flows_down[lvl])
                    hcur = self.down_motion[bi](hcur)
                skips.append(hcur)
                bi += 1
            if lvl < nl - 1:
                hcur = torch.cat([self.downsamples[lvl](hcur[i : i + 1]) for i in range(f)], dim=0)

        bi = 0
        for pos, lvl in enumerate(range(nl - 1, -1, -1)):
            for _ in range(bpl):
                hcur = torch.cat([hcur, skips.pop()], dim=1)
                hcur = self.up_spatial[bi](hcur, temb, ref.level_features[lvl], ref.global_embedding)
                if temporal:
                    hcur = self.up_motref[bi](hcur, flows_down[lvl])
                    hcur = self.up_motion[bi](hcur)
                bi += 1
            if lvl > 0:
                up = F.interpolate(hcur, scale_factor=2, mode="nearest")
                hcur = torch.cat([self.upsamples[pos](up[i : i + 1]) for i in range(f)], dim=0)

        out = F.silu(self.out_norm(hcur))
        return torch.cat([self.conv_out(out[i : i + 1]) for i in range(f)], dim=0)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def _write_tensor(fh, name: str, values: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    arr = np.array(values, dtype="<f4", order="C")  # keeps rank-0 tensors rank 0
    fh.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes())


def save_checkpoint(model: EditingModel, path) -> None:
    entries = [(f"{model.group_of(name)}/{name}", param.detach().cpu().numpy()) for name, param in model.named_parameters()]
    entries.append(("meta/trainable", np.asarray([float(model.trainable[g]) for g in GROUP_ORDER], dtype=np.float32)))
    entries.append(("meta/config", model.config.to_vector()))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, values in entries:
            _write_tensor(fh, name, values)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def read_checkpoint_tensors(path) -> dict:
    tensors = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            dtype_tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
            if dtype_tag != _DTYPE_F32:
                raise CheckpointError(f"{path}: unknown dtype tag {dtype_tag} for {name}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
            count_vals = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 4 * count_vals)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return tensors


def load_checkpoint(path, config: ModelConfig = None) -> EditingModel:
    tensors = read_checkpoint_tensors(path)
    if config is None:
        if "meta/config" not in tensors:
            raise CheckpointError(f"{path}: missing meta/config and no config supplied")
        config = ModelConfig.from_vector(tensors["meta/config"])
    model = EditingModel(config)
    expected = {f"{model.group_of(name)}/{name}": (name, param) for name, param in model.named_parameters()}
    for full_name, (name, param) in expected.items():
        if full_name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {full_name}")
        values = tensors[full_name]
        if tuple(values.shape) != tuple(param.shape):
            raise CheckpointError(
                f"{path}: shape mismatch for {full_name}: file {tuple(values.shape)} vs model {tuple(param.shape)}"
            )
        with torch.no_grad():
            param.copy_(torch.from_numpy(values))
    extras = [n for n in tensors if n not in expected and not n.startswith("meta/")]
    if extras:
        raise CheckpointError(f"{path}: unexpected tensors {extras[:3]}")
    if "meta/trainable" in tensors:
        flags = tensors["meta/trainable"]
        model.set_trainable(**{g: bool(flags[i] > 0.5) for i, g in enumerate(GROUP_ORDER)})
    return model
