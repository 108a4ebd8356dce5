"""Video/mask/depth data model, synthetic sprite clips, and triplet I/O.

Conventions: frames are float32 arrays of shape (3, H, W) with values on the
8-bit grid k/255 in [0, 1]; masks are uint8 (H, W) with 1 marking the region
to be edited; all arrays are frozen (read-only) after construction so values
can be shared across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

from .errors import ConfigurationError, FormatError, InputError

CODEC_FACTOR = 4
MIN_SIDE = 16

# Rec. 601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


def quantize8(values: np.ndarray) -> np.ndarray:
    """Snap float values in [0,1] to the 8-bit grid k/255 (float32)."""
    q = np.rint(np.clip(values, 0.0, 1.0) * 255.0)
    return (q / np.float32(255.0)).astype(np.float32)


class Application(str, Enum):
    TEXTURE_TRANSFER = "texture_transfer"
    OBJECT_MODIFICATION = "object_modification"


@dataclass(frozen=True)
class Frame:
    """One RGB frame, channel-first float32 in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.shape[0] != 3:
            raise InputError(f"frame must have shape (3, H, W), got {v.shape}")
        _, h, w = v.shape
        if h < MIN_SIDE or w < MIN_SIDE or h % CODEC_FACTOR or w % CODEC_FACTOR:
            raise InputError(
                f"frame dims must be >= {MIN_SIDE} and divisible by {CODEC_FACTOR}, got {h}x{w}"
            )
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise InputError("frame values must be finite and in [0, 1]")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class VideoClip:
    frames: tuple
    frame_rate: float = 8.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InputError("clip needs at least one frame")
        h, w = frames[0].height, frames[0].width
        for f in frames:
            if (f.height, f.width) != (h, w):
                raise InputError("all frames in a clip must share dimensions")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width


@dataclass(frozen=True)
class Mask:
    """Binary edit mask; 1 marks the target region, 0 is preserved content."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise InputError(f"mask must be 2-D, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise InputError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", _freeze(v.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def is_empty(self) -> bool:
        return not bool(self.values.any())


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise InputError(f"depth map must be 2-D, got shape {v.shape}")
        if v.size == 0:
            raise InputError("depth map dimensions must be positive")
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise InputError("depth values must be finite and in [0, 1]")
        object.__setattr__(self, "values", _freeze(v))


@dataclass(frozen=True)
class Triplet:
    """Benchmark unit: source video, per-frame edit masks, reference image."""

    video: VideoClip
    masks: tuple
    reference: Frame
    application: Application
    id: str

    def __post_init__(self):
        masks = tuple(self.masks)
        if len(masks) != len(self.video):
            raise InputError(
                f"mask count {len(masks)} != frame count {len(self.video)}"
            )
        for m in masks:
            if (m.height, m.width) != (self.video.height, self.video.width):
                raise InputError("mask dimensions must match the video")
        if all(m.is_empty() for m in masks):
            raise InputError("triplet has no editable target (all masks empty)")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "application", Application(self.application))


def luminance(frame: Frame) -> np.ndarray:
    """Rec. 601 luma of a frame, float64 (H, W) in [0, 1]."""
    return np.tensordot(_LUMA, frame.values.astype(np.float64), axes=(0, 0))


def pseudo_depth(frame: Frame) -> DepthMap:
    """Structural depth stand-in: luminance smoothed by a 5x5 box filter."""
    lum = luminance(frame)
    smooth = uniform_filter(lum, size=5, mode="nearest")
    return DepthMap(np.clip(smooth, 0.0, 1.0).astype(np.float32))


def zero_depth(height: int, width: int) -> DepthMap:
    if height <= 0 or width <= 0:
        raise InputError(f"invalid depth dimensions {height}x{width}")
    return DepthMap(np.zeros((height, width), dtype=np.float32))


def temporal_downsample(clip: VideoClip, stride: int, length: int, start: int = 0) -> VideoClip:
    """Select `length` frames starting at `start` with a fixed temporal stride."""
    if stride < 1 or length < 1 or start < 0:
        raise InputError("stride and length must be positive, start non-negative")
    last = start + (length - 1) * stride
    if last >= len(clip):
        raise InputError(
            f"downsample out of range: start={start} stride={stride} length={length} "
            f"needs frame {last} but clip has {len(clip)}"
        )
    frames = [clip.frames[start + k * stride] for k in range(length)]
    return VideoClip(frames, frame_rate=clip.frame_rate)


# ---------------------------------------------------------------------------
# Sprite rendering
# ---------------------------------------------------------------------------

SHAPES = ("disc", "square", "triangle")


def rasterize_shape(kind: str, center: tuple, size: float, height: int, width: int) -> np.ndarray:
    """Boolean coverage of a shape: pixel (r, c) is covered iff its center
    (x=c, y=r) lies inside the shape. `size` is the disc radius, the square
    half-side, or the triangle circumradius."""
    cx, cy = center
    ys, xs = np.mgrid[0:height, 0:width]
    if kind == "disc":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= size**2
    if kind == "square":
        return (np.abs(xs - cx) <= size) & (np.abs(ys - cy) <= size)
    if kind == "triangle":
        # Equilateral, one vertex up; inclusive half-plane test.
        angles = np.deg2rad([90.0, 210.0, 330.0])
        vx = cx + size * np.cos(angles)
        vy = cy - size * np.sin(angles)
        inside = np.ones((height, width), dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            ex, ey = vx[j] - vx[i], vy[j] - vy[i]
            cross = ex * (ys - vy[i]) - ey * (xs - vx[i])
            inside &= cross <= 1e-9
        return inside
    raise ConfigurationError(f"unknown sprite shape {kind!r}")


@dataclass(frozen=True)
class Sprite:
    """A textured shape with one position per frame."""

    kind: str
    size: float
    positions: tuple  # ((x, y), ...) one per frame
    texture: np.ndarray  # (3, T, T) float32, sampled in sprite-local coords

    def render(self, height: int, width: int, frame_index: int, canvas: np.ndarray) -> np.ndarray:
        """Paint the sprite onto `canvas` in place; returns the coverage mask."""
        cx, cy = self.positions[frame_index]
        cover = rasterize_shape(self.kind, (cx, cy), self.size, height, width)
        if cover.any():
            rr, cc = np.nonzero(cover)
            tex = _sample_texture(self.texture, cc - cx, rr - cy)
            canvas[:, rr, cc] = tex
        return cover


def _sample_texture(texture: np.ndarray, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    """Bilinear sample sprite-local texture at offsets from the sprite center."""
    _, th, tw = texture.shape
    x = np.clip(lx + (tw - 1) / 2.0, 0.0, tw - 1.0)
    y = np.clip(ly + (th - 1) / 2.0, 0.0, th - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    fx, fy = x - x0, y - y0
    t00 = texture[:, y0, x0]
    t01 = texture[:, y0, x1]
    t10 = texture[:, y1, x0]
    t11 = texture[:, y1, x1]
    top = t00 * (1 - fx) + t01 * fx
    bot = t10 * (1 - fx) + t11 * fx
    return top * (1 - fy) + bot * fy


def _make_texture(rng: np.random.Generator, side: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.85, size=(3, 1, 1))
    noise = rng.uniform(-1.0, 1.0, size=(3, side, side))
    noise = uniform_filter(noise, size=(1, 3, 3), mode="nearest")
    return np.clip(base + 0.35 * noise, 0.0, 1.0).astype(np.float32)


def _make_background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    noise = rng.uniform(0.0, 1.0, size=(3, height, width))
    smooth = uniform_filter(noise, size=(1, 5, 5), mode="nearest")
    return np.clip(0.2 + 0.6 * smooth, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class SpriteConfig:
    num_frames: int = 8
    height: int = 64
    width: int = 64
    num_sprites: int = 1
    motion: str = "linear"
    seed: int = 0


def _linear_track(rng, num_frames, height, width, size):
    m = size + 2.0
    free = min(height, width) - 1 - 2 * m
    cap = max(free, 0.0) / max(num_frames - 1, 1)
    speed = rng.uniform(0.3, 2.5)
    speed = min(speed, cap)  # keep the whole track inside the frame
    theta = rng.uniform(0.0, 2.0 * np.pi)
    vx, vy = speed * np.cos(theta), speed * np.sin(theta)
    span_x, span_y = vx * (num_frames - 1), vy * (num_frames - 1)
    x0 = rng.uniform(m + max(0.0, -span_x), width - 1 - m - max(0.0, span_x))
    y0 = rng.uniform(m + max(0.0, -span_y), height - 1 - m - max(0.0, span_y))
    return tuple((x0 + vx * i, y0 + vy * i) for i in range(num_frames))


def _circular_track(rng, num_frames, height, width, size):
    rho_max = (min(height, width) - 1) / 2.0 - size - 2.0
    rho = rng.uniform(1.0, max(1.001, min(min(height, width) / 8.0, rho_max)))
    m = size + rho + 2.0
    cx = rng.uniform(m, width - 1 - m)
    cy = rng.uniform(m, height - 1 - m)
    theta0 = rng.uniform(0.0, 2.0 * np.pi)
    omega = rng.uniform(0.8, 2.0) / rho
    return tuple(
        (cx + rho * np.cos(theta0 + omega * i), cy + rho * np.sin(theta0 + omega * i))
        for i in range(num_frames)
    )


def make_sprite(rng: np.random.Generator, config: SpriteConfig) -> Sprite:
    kind = SHAPES[rng.integers(len(SHAPES))]
    size = float(rng.uniform(min(config.height, config.width) / 10.0, min(config.height, config.width) / 6.0))
    track = (_linear_track if config.motion == "linear" else _circular_track)(
        rng, config.num_frames, config.height, config.width, size
    )
    tex_side = int(np.ceil(2 * size)) + 4
    return Sprite(kind=kind, size=size, positions=track, texture=_make_texture(rng, tex_side))


def render_sprite_video(
    sprites: list, num_frames: int, height: int, width: int, background: np.ndarray, frame_rate: float = 8.0
) -> tuple:
    """Composite sprites (later ones on top) over a static background.

    Returns (clip, per-sprite mask sequences); each mask is the sprite's full
    rasterized coverage, ignoring occlusion by later sprites.
    """
    frames, mask_seqs = [], [[] for _ in sprites]
    for i in range(num_frames):
        canvas = background.copy()
        for s_idx, sprite in enumerate(sprites):
            cover = sprite.render(height, width, i, canvas)
            mask_seqs[s_idx].append(Mask(cover.astype(np.uint8)))
        frames.append(Frame(quantize8(canvas)))
    return VideoClip(frames, frame_rate=frame_rate), [tuple(seq) for seq in mask_seqs]


def generate_sprite_video(config: SpriteConfig) -> tuple:
    """Deterministic synthetic clip: textured sprites moving over a textured
    static background. Returns (VideoClip, list of per-sprite mask tuples)."""
    if config.num_frames < 2:
        raise ConfigurationError("need at least 2 frames")
    for side in (config.height, config.width):
        if side < MIN_SIDE or side % CODEC_FACTOR:
            raise ConfigurationError(
                f"dimensions must be >= {MIN_SIDE} and divisible by {CODEC_FACTOR}, got {config.height}x{config.width}"
            )
    if config.motion not in ("linear", "circular"):
        raise ConfigurationError(f"unknown motion {config.motion!r}")
    if config.num_sprites < 1:
        raise ConfigurationError("no editable target: num_sprites must be >= 1")
    rng = np.random.default_rng(config.seed)
    background = _make_background(rng, config.height, config.width)
    sprites = [make_sprite(rng, config) for _ in range(config.num_sprites)]
    return render_sprite_video(sprites, config.num_frames, config.height, config.width, background)


# ---------------------------------------------------------------------------
# Triplet directory I/O
# ---------------------------------------------------------------------------


def _save_png_rgb(values: np.ndarray, path: Path):
    arr = np.rint(values * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def _load_png_rgb(path: Path) -> Frame:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return Frame((arr / np.float32(255.0)).transpose(2, 0, 1))


def _save_png_mask(mask: Mask, path: Path):
    Image.fromarray(mask.values * np.uint8(255), mode="L").save(path)


def _load_png_mask(path: Path) -> Mask:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return Mask((arr >= 128).astype(np.uint8))


def save_triplet(triplet: Triplet, path) -> None:
    """Layout: frames/frame_%05d.png, masks/mask_%05d.png, reference.png,
    triplet.json. Frames quantize to 8 bits; masks roundtrip exactly."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(triplet.video.frames):
        _save_png_rgb(frame.values, root / "frames" / f"frame_{i:05d}.png")
    for i, mask in enumerate(triplet.masks):
        _save_png_mask(mask, root / "masks" / f"mask_{i:05d}.png")
    _save_png_rgb(triplet.reference.values, root / "reference.png")
    meta = {
        "id": triplet.id,
        "application": triplet.application.value,
        "frame_rate": triplet.video.frame_rate,
        "num_frames": len(triplet.video),
    }
    (root / "triplet.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_triplet(path) -> Triplet:
    root = Path(path)
    meta_path = root / "triplet.json"
    if not meta_path.is_file():
        raise FormatError(f"missing triplet.json in {root}")
    meta = json.loads(meta_path.read_text())
    num_frames = int(meta["num_frames"])
    frames = []
    for i in range(num_frames):
        fp = root / "frames" / f"frame_{i:05d}.png"
        if not fp.is_file():
            raise FormatError(f"missing frame file {fp}")
        frames.append(_load_png_rgb(fp))
    mask_files = sorted((root / "masks").glob("mask_*.png")) if (root / "masks").is_dir() else []
    if len(mask_files) != num_frames:
        raise FormatError(
            f"mask count mismatch in {root / 'masks'}: expected {num_frames}, found {len(mask_files)}"
        )
    masks = [_load_png_mask(root / "masks" / f"mask_{i:05d}.png") for i in range(num_frames)]
    ref_path = root / "reference.png"
    if not ref_path.is_file():
        raise FormatError(f"missing reference image {ref_path}")
    return Triplet(
        video=VideoClip(frames, frame_rate=float(meta.get("frame_rate", 8.0))),
        masks=masks,
        reference=_load_png_rgb(ref_path),
        application=Application(meta["application"]),
        id=str(meta["id"]),
    )
