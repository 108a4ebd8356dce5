"""Classical dense optical flow and flow utilities.

The estimator is coarse-to-fine pyramidal Lucas-Kanade with Tikhonov-
regularized 2x2 normal equations per pixel, so untextured (zero-gradient)
regions resolve to zero flow. Flow vectors are always expressed in pixels of
the grid the field lives on; downsampling rescales magnitudes accordingly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, uniform_filter

from .errors import ContractError, FormatError, InputError
from .media import Frame, luminance

FLO_MAGIC = 202021.25  # spells "PIEH" as little-endian float32

_TIKHONOV = 1e-3
_WINDOW = 7


@dataclass(frozen=True)
class FlowField:
    """Dense displacement field (2, H, W): channel 0 = u (x, columns),
    channel 1 = v (y, rows), in pixels of this field's grid."""

    values: np.ndarray
    src_index: int = 0
    dst_index: int = 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.shape[0] != 2:
            raise InputError(f"flow must have shape (2, H, W), got {v.shape}")
        if not np.isfinite(v).all():
            raise InputError("flow values must be finite")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class OcclusionMask:
    """1 = flow-consistent (valid), 0 = occluded or inconsistent."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or not np.isin(v, (0, 1)).all():
            raise InputError("occlusion mask must be 2-D binary")
        v = np.ascontiguousarray(v.astype(np.uint8))
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def _downsample2(img: np.ndarray) -> np.ndarray:
    return gaussian_filter(img, sigma=1.0, mode="nearest")[::2, ::2]


def _resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape
    ys = np.linspace(0.0, h - 1.0, height)
    xs = np.linspace(0.0, w - 1.0, width)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(img, [grid_y, grid_x], order=1, mode="nearest")


def _warp_gray(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    return map_coordinates(img, [ys + v, xs + u], order=1, mode="nearest")


def _window_sum(x: np.ndarray) -> np.ndarray:
    return uniform_filter(x, size=_WINDOW, mode="nearest") * float(_WINDOW**2)


def _lk_refine(gray_a, gray_b, u, v, iters):
    """Iterative LK on one pyramid level; gradients from the template frame."""
    ix = np.gradient(gray_a, axis=1)
    iy = np.gradient(gray_a, axis=0)
    gxx = _window_sum(ix * ix) + _TIKHONOV
    gxy = _window_sum(ix * iy)
    gyy = _window_sum(iy * iy) + _TIKHONOV
    det = gxx * gyy - gxy * gxy
    for _ in range(iters):
        residual = _warp_gray(gray_b, u, v) - gray_a
        bx = _window_sum(ix * residual)
        by = _window_sum(iy * residual)
        u = u - (gyy * bx - gxy * by) / det
        v = v - (gxx * by - gxy * bx) / det
        # 3x3 smoothing of the field between warp iterations stops per-pixel
        # noise from feeding back through the warp; zero flow stays zero.
        u = uniform_filter(u, size=3, mode="nearest")
        v = uniform_filter(v, size=3, mode="nearest")
    return u, v


def estimate_flow(
    frame_a: Frame, frame_b: Frame, levels: int = 3, iters: int = 3, src_index: int = 0, dst_index: int = 1
) -> FlowField:
    """Dense flow such that frame_a(p) ~= frame_b(p + flow(p)).

    Coarse-to-fine over a `levels`-deep pyramid with `iters` warp iterations
    per level; deterministic.
    """
    if (frame_a.height, frame_a.width) != (frame_b.height, frame_b.width):
        raise InputError("frames must share dimensions")
    if levels < 1:
        raise InputError("levels must be >= 1")
    h, w = frame_a.height, frame_a.width
    if min(h, w) >> (levels - 1) < 8:
        raise InputError(f"coarsest pyramid level below 8x8 for {levels} levels on {h}x{w}")

    pyr_a = [luminance(frame_a)]
    pyr_b = [luminance(frame_b)]
    for _ in range(levels - 1):
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(levels - 1, -1, -1):
        ga, gb = pyr_a[level], pyr_b[level]
        if u.shape != ga.shape:
            hc, wc = u.shape
            u = _resize_bilinear(u, *ga.shape) * (ga.shape[1] / wc)
            v = _resize_bilinear(v, *ga.shape) * (ga.shape[0] / hc)
        u, v = _lk_refine(ga, gb, u, v, iters)
        limit = max(ga.shape)
        u = np.clip(u, -limit, limit)
        v = np.clip(v, -limit, limit)
    return FlowField(np.stack([u, v]).astype(np.float32), src_index=src_index, dst_index=dst_index)


def downsample_flow(flow: FlowField, target_h: int, target_w: int) -> FlowField:
    """Area-average u and v onto the target grid, rescaling displacements so
    they stay in units of the target grid. Upsampling is rejected."""
    h, w = flow.height, flow.width
    if target_h > h or target_w > w:
        raise InputError(f"cannot upsample flow {h}x{w} to {target_h}x{target_w}")
    if target_h < 1 or target_w < 1:
        raise InputError("target dims must be positive")
    if (target_h, target_w) == (h, w):
        return flow
    if h % target_h or w % target_w:
        raise InputError(
            f"flow downsample requires integer factors, got {h}x{w} -> {target_h}x{target_w}"
        )
    fh, fw = h // target_h, w // target_w
    blocks = flow.values.reshape(2, target_h, fh, target_w, fw)
    pooled = blocks.mean(axis=(2, 4))
    scale = np.array([target_w / w, target_h / h], dtype=np.float32).reshape(2, 1, 1)
    return FlowField(pooled * scale, src_index=flow.src_index, dst_index=flow.dst_index)


def forward_backward_check(flow_fwd: FlowField, flow_bwd: FlowField, tau: float) -> OcclusionMask:
    """Pixel p of flow_fwd's grid is valid iff
    |flow_fwd(p) + flow_bwd(p + flow_fwd(p))| <= tau (bilinear lookup)."""
    if (flow_fwd.height, flow_fwd.width) != (flow_bwd.height, flow_bwd.width):
        raise InputError("flow fields must share dimensions")
    if (flow_fwd.src_index, flow_fwd.dst_index) != (flow_bwd.dst_index, flow_bwd.src_index):
        raise ContractError(
            f"direction tags not opposite: {flow_fwd.src_index}->{flow_fwd.dst_index} "
            f"vs {flow_bwd.src_index}->{flow_bwd.dst_index}"
        )
    h, w = flow_fwd.height, flow_fwd.width
    ys, xs = np.mgrid[0:h, 0:w]
    u, v = flow_fwd.values[0].astype(np.float64), flow_fwd.values[1].astype(np.float64)
    bu = map_coordinates(flow_bwd.values[0].astype(np.float64), [ys + v, xs + u], order=1, mode="nearest")
    bv = map_coordinates(flow_bwd.values[1].astype(np.float64), [ys + v, xs + u], order=1, mode="nearest")
    residual = np.hypot(u + bu, v + bv)
    return OcclusionMask((residual <= tau).astype(np.uint8))


def write_flo(flow: FlowField, path) -> None:
    """Middlebury .flo: float32 magic 202021.25, int32 width, int32 height,
    then row-major interleaved little-endian float32 (u, v) pairs."""
    h, w = flow.height, flow.width
    interleaved = np.ascontiguousarray(flow.values.transpose(1, 2, 0), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(interleaved.tobytes())


def read_flo(path, src_index: int = 0, dst_index: int = 1) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    (magic,) = struct.unpack_from("<f", data, 0)
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    w, h = struct.unpack_from("<ii", data, 4)
    expected = 12 + 8 * w * h
    if w <= 0 or h <= 0 or len(data) != expected:
        raise FormatError(f"{path}: inconsistent .flo payload ({len(data)} bytes for {w}x{h})")
    arr = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(arr.transpose(2, 0, 1), src_index=src_index, dst_index=dst_index)
