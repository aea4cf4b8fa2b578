"""Lossless image <-> latent codec.

A space-to-depth rearrangement stands in for a learned autoencoder: each
f x f pixel block becomes 3*f^2 channels at one latent site, so encode and
decode are exact mutual inverses and every reconstruction claim is
bit-testable.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError


def latent_channels(f: int) -> int:
    return 3 * f * f


def encode(x: np.ndarray, f: int) -> np.ndarray:
    """[B, 3, H, W] image -> [B, 3*f*f, H/f, W/f] latent (pure permutation)."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected [B, 3, H, W] image, got {x.shape}")
    b, c, h, w = x.shape
    if h % f or w % f:
        raise ShapeError(f"image extents {h}x{w} not divisible by patch factor {f}")
    hl, wl = h // f, w // f
    z = x.reshape(b, c, hl, f, wl, f)
    z = z.transpose(0, 1, 3, 5, 2, 4)  # [B, 3, f, f, hl, wl]
    return np.ascontiguousarray(z.reshape(b, c * f * f, hl, wl))


def decode(z: np.ndarray) -> np.ndarray:
    """Exact inverse of ``encode``; the patch factor is read off the channels."""
    if z.ndim != 4:
        raise ShapeError(f"expected [B, C, h, w] latent, got {z.shape}")
    b, c, hl, wl = z.shape
    f = math.isqrt(c // 3)
    if 3 * f * f != c:
        raise ShapeError(f"latent channel count {c} is not 3*f^2 for integer f")
    x = z.reshape(b, 3, f, f, hl, wl)
    x = x.transpose(0, 1, 4, 2, 5, 3)  # [B, 3, hl, f, wl, f]
    return np.ascontiguousarray(x.reshape(b, 3, hl * f, wl * f))
