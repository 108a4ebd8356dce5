"""Invertible pseudo-latent codec: exact space-to-depth in place of a VAE.

Each s x s x 3 pixel block becomes 3*s^2 latent channels, shifted to the
[-1, 1] diffusion range. The map is exactly invertible (arithmetic is done
in float64), so reconstruction error anywhere downstream is attributable to
the diffusion stack rather than the codec.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .media import CODEC_FACTOR, Frame

SPATIAL_FACTOR = CODEC_FACTOR
LATENT_CHANNELS = 3 * SPATIAL_FACTOR**2


def latent_shape(height: int, width: int, s: int = SPATIAL_FACTOR) -> tuple:
    return (3 * s * s, height // s, width // s)


def encode_latent(frame: Frame, s: int = SPATIAL_FACTOR) -> np.ndarray:
    """Frame (3, U, V) in [0,1] -> latent (3*s^2, U/s, V/s) in [-1, 1], float64."""
    u, v = frame.height, frame.width
    if u % s or v % s:
        raise InputError(f"frame dims {u}x{v} not divisible by spatial factor {s}")
    x = frame.values.astype(np.float64)
    blocks = x.reshape(3, u // s, s, v // s, s)
    latent = blocks.transpose(0, 2, 4, 1, 3).reshape(3 * s * s, u // s, v // s)
    return (latent - 0.5) * 2.0


def decode_latent(latent: np.ndarray, s: int = SPATIAL_FACTOR) -> Frame:
    """Exact inverse of encode_latent, clamped to [0, 1]."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3 or latent.shape[0] != 3 * s * s:
        raise InputError(
            f"latent must have {3 * s * s} channels for spatial factor {s}, got shape {latent.shape}"
        )
    _, h, w = latent.shape
    x = latent / 2.0 + 0.5
    blocks = x.reshape(3, s, s, h, w).transpose(0, 3, 1, 4, 2)
    values = blocks.reshape(3, h * s, w * s)
    return Frame(np.clip(values, 0.0, 1.0).astype(np.float32))
