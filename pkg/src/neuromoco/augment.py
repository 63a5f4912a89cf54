"""Geometric view augmentation for binned event frames.

One :class:`ViewParams` is applied to every time step and both polarity
channels of a sample.  All resampling is nearest-neighbour so event counts
stay integral and non-negative; pixels mapped from outside the sensor are 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from neuromoco.errors import ValidationError
from neuromoco.events import FrameTensor


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    shear_y: float = 0.15
    translate_frac: float = 0.125
    rotation_deg: float = 15.0
    scale_min: float = 0.8
    scale_max: float = 1.2

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError("flip_prob must lie in [0, 1]")
        if min(self.shear_y, self.translate_frac, self.rotation_deg) < 0:
            raise ValidationError("augmentation magnitudes must be non-negative")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValidationError("need 0 < scale_min <= scale_max")

    @classmethod
    def identity(cls) -> AugmentPolicy:
        return cls(0.0, 0.0, 0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class ViewParams:
    flip: bool = False
    shear_y: float = 0.0
    translate: tuple[int, int] = (0, 0)
    resize_scale: float = 1.0
    rotation: float = 0.0
    seed: int = 0

    @property
    def is_identity(self) -> bool:
        return (not self.flip and self.shear_y == 0.0 and self.translate == (0, 0)
                and self.resize_scale == 1.0 and self.rotation == 0.0)


def sample_view_params(policy: AugmentPolicy, rng: np.random.Generator, size: tuple[int, int] = (32, 32)) -> ViewParams:
    """Draw one view; the parameters are a pure function of the drawn seed."""
    seed = int(rng.integers(0, 2**63 - 1))
    sub = np.random.default_rng(seed)
    h, w = size
    max_dx = int(math.floor(policy.translate_frac * w))
    max_dy = int(math.floor(policy.translate_frac * h))
    flip = bool(sub.random() < policy.flip_prob)
    shear = float(sub.uniform(-policy.shear_y, policy.shear_y)) if policy.shear_y else 0.0
    dx = int(sub.integers(-max_dx, max_dx + 1)) if max_dx else 0
    dy = int(sub.integers(-max_dy, max_dy + 1)) if max_dy else 0
    if policy.scale_max > policy.scale_min:
        scale = float(sub.uniform(policy.scale_min, policy.scale_max))
    else:
        scale = float(policy.scale_min)
    rot = float(sub.uniform(-policy.rotation_deg, policy.rotation_deg)) if policy.rotation_deg else 0.0
    return ViewParams(flip, shear, (dx, dy), scale, rot, seed)


def _forward_matrix(p: ViewParams) -> np.ndarray:
    flip = np.diag([-1.0 if p.flip else 1.0, 1.0])
    scale = np.eye(2) * p.resize_scale
    shear = np.array([[1.0, 0.0], [p.shear_y, 1.0]])  # y' = y + s * x
    if p.rotation == 0.0:
        rot = np.eye(2)
    else:
        a = math.radians(p.rotation)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return rot @ shear @ scale @ flip


def source_indices(p: ViewParams, h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest source pixel (row, col) and validity mask for each output pixel."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    inv = np.linalg.inv(_forward_matrix(p)) if not p.is_identity else np.eye(2)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ox = xx - cx - p.translate[0]
    oy = yy - cy - p.translate[1]
    sx = inv[0, 0] * ox + inv[0, 1] * oy + cx
    sy = inv[1, 0] * ox + inv[1, 1] * oy + cy
    col = np.floor(sx + 0.5).astype(np.int64)
    row = np.floor(sy + 0.5).astype(np.int64)
    valid = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    return np.clip(row, 0, h - 1), np.clip(col, 0, w - 1), valid


def apply_view_array(frames: np.ndarray, p: ViewParams) -> np.ndarray:
    """:func:`apply_view` on a raw ``(..., H, W)`` array."""
    if p.is_identity:
        return frames.copy()
    h, w = frames.shape[-2:]
    row, col, valid = source_indices(p, h, w)
    out = frames[..., row, col]
    out *= valid
    return out


def apply_view(frames: FrameTensor, p: ViewParams) -> FrameTensor:
    return FrameTensor(apply_view_array(frames.data, p))


def resize_indices(n_in: int, n_out: int) -> np.ndarray:
    # centre-aligned nearest neighbour: floor((i + 0.5) * n_in / n_out)
    return ((2 * np.arange(n_out) + 1) * n_in) // (2 * n_out)


def resize_to(frames: FrameTensor, h: int, w: int) -> FrameTensor:
    if h < 1 or w < 1:
        raise ValidationError(f"target size must be positive, got {h}x{w}")
    d = frames.data
    rows = resize_indices(d.shape[2], h)
    cols = resize_indices(d.shape[3], w)
    return FrameTensor(d[:, :, rows[:, None], cols[None, :]])
