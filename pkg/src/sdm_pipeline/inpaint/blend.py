"""Distance-feathered compositing of an inpainted pano over the original."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class BlendParams:
    feather_px: float = 16.0
    dilate_px: float = 8.0

    def __post_init__(self):
        if self.feather_px < 0 or self.dilate_px < 0:
            raise ValueError("feather_px and dilate_px must be >= 0")

    @property
    def band(self) -> float:
        return self.dilate_px + self.feather_px


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def mask_distance(mask, wrap: bool = True) -> np.ndarray:
    """Euclidean distance (px) to the nearest mask pixel; 0 on the mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    if not wrap:
        return ndimage.distance_transform_edt(~mask)
    W = mask.shape[1]
    tiled = np.concatenate([mask, mask, mask], axis=1)
    return ndimage.distance_transform_edt(~tiled)[:, W:2 * W]


def blend_alpha(mask, params: BlendParams, wrap: bool = True) -> np.ndarray:
    d = mask_distance(mask, wrap)
    alpha = np.zeros(d.shape)
    alpha[d <= params.dilate_px] = 1.0
    if params.feather_px > 0:
        ring = (d > params.dilate_px) & (d < params.band)
        alpha[ring] = 1.0 - smoothstep((d[ring] - params.dilate_px) / params.feather_px)
    return alpha


def blend_inpaint(original, inpainted, mask, params: BlendParams | None = None, wrap: bool = True) -> np.ndarray:
    """alpha * inpainted + (1 - alpha) * original, exact where alpha is 0 or 1."""
    params = params or BlendParams()
    orig = np.asarray(original)
    inp = np.asarray(inpainted)
    if orig.shape != inp.shape or orig.shape[:2] != np.shape(mask):
        raise ValueError("original, inpainted and mask dimensions differ")
    alpha = blend_alpha(mask, params, wrap)
    a = alpha[..., None] if orig.ndim == 3 else alpha
    mixed = a * inp.astype(np.float64) + (1.0 - a) * orig.astype(np.float64)
    if np.issubdtype(orig.dtype, np.integer):
        mixed = np.clip(np.rint(mixed), np.iinfo(orig.dtype).min, np.iinfo(orig.dtype).max)
    out = mixed.astype(orig.dtype)
    zero = alpha == 0.0
    one = alpha == 1.0
    out[zero] = orig[zero]
    out[one] = inp[one]
    return out
