"""Spatial transforms shared by augmentation and the transformation loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


def _as_4d(t: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    shape = tuple(t.shape)
    return t.reshape(-1, 1, shape[-2], shape[-1]), shape


def apply_affine(
    t: torch.Tensor,
    theta: torch.Tensor,
    mode: str = "bilinear",
    padding_mode: str = "zeros",
) -> torch.Tensor:
    """Warp ``(B, ..., H, W)`` with one ``2x3`` sampling matrix per batch item.

    ``theta`` maps output normalized coordinates to input ones, as in
    :func:`torch.nn.functional.affine_grid`.
    """
    B = t.shape[0]
    lead = t.shape[1:-2]
    flat = t.reshape(B, -1, *t.shape[-2:])
    grid = F.affine_grid(theta.to(t.dtype), list(flat.shape), align_corners=False)
    out = F.grid_sample(flat, grid, mode=mode, padding_mode=padding_mode, align_corners=False)
    return out.reshape(B, *lead, *t.shape[-2:])


@dataclass(frozen=True)
class CenterResize:
    """Shrink (ratio < 1) or enlarge about the image center, zero padding outside.

    The same operator applies to images and occurrence maps of any size, since it
    works in normalized coordinates.
    """

    ratio: float

    def theta(self, batch: int, dtype=torch.float32) -> torch.Tensor:
        inv = 1.0 / self.ratio
        th = torch.tensor([[inv, 0.0, 0.0], [0.0, inv, 0.0]], dtype=dtype)
        return th.expand(batch, 2, 3)

    def __call__(self, t: torch.Tensor) -> torch.Tensor:
        if self.ratio == 1.0:
            return t
        flat, shape = _as_4d(t)
        out = apply_affine(flat, self.theta(flat.shape[0], t.dtype))
        return out.reshape(shape)


def sample_affine(rng: np.random.Generator, ratios=(0.75, 0.875)) -> CenterResize:
    """Draw one of ``ratios`` uniformly."""
    return CenterResize(float(ratios[int(rng.integers(len(ratios)))]))


def rotation_scale_theta(angles_deg: np.ndarray, scales: np.ndarray) -> torch.Tensor:
    """Sampling matrices that rotate by ``angle`` and zoom by ``scale`` about the center."""
    a = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    s = np.asarray(scales, dtype=np.float64)
    cos, sin = np.cos(a) / s, np.sin(a) / s
    zeros = np.zeros_like(a)
    theta = np.stack([np.stack([cos, -sin, zeros], -1), np.stack([sin, cos, zeros], -1)], -2)
    return torch.from_numpy(theta)


def sample_augmentation(rng: np.random.Generator, n: int, max_rotation: float = 10.0,
                        scale_range=(0.8, 1.2)) -> tuple[np.ndarray, np.ndarray]:
    angles = rng.uniform(-max_rotation, max_rotation, size=n)
    scales = rng.uniform(scale_range[0], scale_range[1], size=n)
    return angles, scales


def augment(images: torch.Tensor, angles, scales, masks: torch.Tensor | None = None):
    """Rotate/zoom a batch; border padding keeps constant images constant.

    Pixel-level box masks, if given, follow the same warp with nearest sampling.
    """
    theta = rotation_scale_theta(angles, scales)
    out = apply_affine(images, theta, padding_mode="border")
    if masks is None:
        return out
    warped = apply_affine(masks.to(images.dtype), theta, mode="nearest", padding_mode="zeros")
    return out, warped > 0.5


def resize_image(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of ``(C, H, W)`` or ``(B, C, H, W)``."""
    squeeze = image.ndim == 3
    x = image[None] if squeeze else image
    if tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    return x[0] if squeeze else x


def upsample_map(m: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsampling of ``(..., h, w)`` maps to ``size``."""
    flat, shape = _as_4d(m)
    out = F.interpolate(flat, size=tuple(size), mode="bilinear", align_corners=False)
    return out.reshape(*shape[:-2], *size)

