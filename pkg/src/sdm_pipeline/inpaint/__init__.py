"""Panorama inpainting: baseline fill, service client, blending."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..control import ControlImage
from ..errors import MismatchedInput
from .baseline import baseline_inpaint, harmonic_fill, laplace_residual
from .blend import BlendParams, blend_alpha, blend_inpaint, smoothstep
from .service import ServiceClient

BASELINE, SERVICE = "baseline", "service"


@dataclass
class InpaintRequest:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool, True = replace
    control: ControlImage | np.ndarray
    prompt: str = ""
    backend: str = BASELINE
    seed: int = 0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise MismatchedInput("image must be an (H, W, 3) uint8 array")
        ctrl = self.control_edges
        if self.mask.shape != img.shape[:2] or ctrl.shape != img.shape[:2]:
            raise MismatchedInput(
                f"image {img.shape[:2]}, mask {self.mask.shape} and control {ctrl.shape} differ")
        if self.backend not in (BASELINE, SERVICE):
            raise ValueError(f"unknown backend {self.backend!r}")

    @property
    def control_edges(self) -> np.ndarray:
        c = self.control.edges if isinstance(self.control, ControlImage) else np.asarray(self.control)
        return np.where(c > 0, 255, 0).astype(np.uint8)


def inpaint(req: InpaintRequest, client: ServiceClient | None = None,
            blend: BlendParams | None = None) -> np.ndarray:
    """Inpaint with the selected backend, then feather-blend over the input."""
    if not req.mask.any():
        return req.image.copy()
    if req.backend == SERVICE:
        if client is None:
            raise ValueError("service backend needs a ServiceClient")
        raw = client.inpaint(req.image, req.mask, req.control_edges, req.prompt, req.seed)
    else:
        raw = baseline_inpaint(req.image, req.mask, req.control_edges)
    return blend_inpaint(req.image, raw, req.mask, blend or BlendParams())


__all__ = [
    "BASELINE", "SERVICE", "InpaintRequest", "inpaint", "baseline_inpaint", "harmonic_fill",
    "laplace_residual", "BlendParams", "blend_alpha", "blend_inpaint", "smoothstep", "ServiceClient",
]
