"""Canny control images from rendered depth/normal panoramas, and random
circle masks for inpainter fine-tuning data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import BadThreshold, MismatchedInput
from .panorama import EquirectCamera, PanoFrame

DEPTH, NORMAL, COMBINED = "depth", "normal", "combined"


@dataclass
class ControlImage:
    edges: np.ndarray  # uint8, 0 or 255
    source: str = COMBINED

    def __post_init__(self):
        if self.edges.dtype != np.uint8 or not np.all(np.isin(self.edges, (0, 255))):
            raise ValueError("control edges must be uint8 in {0, 255}")

    @property
    def mask(self) -> np.ndarray:
        return self.edges > 0


@dataclass
class CannyParams:
    sigma: float = 1.4
    low: float = 70.0
    high: float = 90.0
    percentile: bool = True
    wrap: bool = True


# ----------------------------------------------------------------------------
# Canny


def _smooth_and_gradient(img, sigma, wrap):
    mode = ("nearest", "wrap" if wrap else "nearest")
    g = ndimage.gaussian_filter(img, sigma, mode=mode) if sigma > 0 else img
    gx = ndimage.sobel(g, axis=1, mode=mode)
    gy = ndimage.sobel(g, axis=0, mode=mode)
    return gx, gy


def _shift(a, dy, dx, wrap):
    """out[y, x] = a[y + dy, x + dx], zero outside vertically (and horizontally unless wrap)."""
    out = np.zeros_like(a)
    H, W = a.shape
    src = np.roll(a, -dx, axis=1) if wrap else a
    if not wrap and dx:
        src = np.zeros_like(a)
        if dx > 0:
            src[:, :-dx] = a[:, dx:]
        else:
            src[:, -dx:] = a[:, :dx]
    if dy > 0:
        out[:-dy] = src[dy:]
    elif dy < 0:
        out[-dy:] = src[:dy]
    else:
        out = src.copy()
    return out


def non_maximum_suppression(mag, gx, gy, wrap=True):
    """Thin gradient magnitude to ridges using 4 quantized directions."""
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = np.zeros(mag.shape, dtype=np.int8)  # 0: horizontal gradient
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    # neighbor offsets (dy, dx) along the gradient for each sector
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = _shift(mag, dy, dx, wrap)
        bwd = _shift(mag, -dy, -dx, wrap)
        # strict on one side so plateaus two pixels wide keep exactly one
        keep |= (sector == s) & (mag > fwd) & (mag >= bwd)
    return np.where(keep & (mag > 0), mag, 0.0)


def _wrap_labels(mask, wrap):
    st = np.ones((3, 3), dtype=bool)
    if not wrap:
        return ndimage.label(mask, structure=st)
    H, W = mask.shape
    padded = np.concatenate([mask[:, -1:], mask, mask[:, :1]], axis=1)
    lab, n = ndimage.label(padded, structure=st)
    # pixels duplicated by the padding are the same pixel: merge their labels
    a = np.concatenate([lab[:, 0], lab[:, W + 1]])
    b = np.concatenate([lab[:, W], lab[:, 1]])
    sel = (a > 0) & (b > 0)
    graph = coo_matrix((np.ones(int(sel.sum())), (a[sel], b[sel])), shape=(n + 1, n + 1))
    _, comp = connected_components(graph, directed=False)
    out = comp[lab[:, 1:W + 1]]
    out[~mask] = -1
    return out, None


def hysteresis(nms, low, high, wrap=True):
    weak = nms >= low
    weak &= nms > 0
    strong = weak & (nms >= high)
    if not strong.any():
        return np.zeros(nms.shape, dtype=bool)
    if wrap:
        lab, _ = _wrap_labels(weak, True)
        good = np.unique(lab[strong])
        return np.isin(lab, good) & weak
    lab, _ = _wrap_labels(weak, False)
    good = np.unique(lab[strong])
    good = good[good > 0]
    return np.isin(lab, good)


def canny(img, sigma: float = 1.4, low: float = 70.0, high: float = 90.0,
          percentile: bool = True, wrap: bool = True) -> np.ndarray:
    """Binary Canny edge map of a single-channel float image.

    With ``percentile`` the thresholds are percentiles of the non-zero
    gradient magnitudes, which makes the result independent of the image's
    intensity scale.  ``wrap`` treats columns as periodic (panorama seam).
    """
    if not (high >= low > 0) or (percentile and high > 100):
        raise BadThreshold(f"need high >= low > 0, got low={low} high={high}")
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("canny input must be finite")
    gx, gy = _smooth_and_gradient(img, sigma, wrap)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(img.shape, dtype=bool)
    if percentile:
        active = mag[mag > 1e-9 * peak]
        lo_t, hi_t = np.percentile(active, [low, high])
    else:
        lo_t, hi_t = low, high
    nms = non_maximum_suppression(mag, gx, gy, wrap)
    return hysteresis(nms, lo_t, hi_t, wrap)


# ----------------------------------------------------------------------------
# control images


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """Robust [0, 1] depth; no-hit pixels become 1.05x the 99th percentile."""
    d = np.asarray(depth, dtype=np.float64).copy()
    finite = np.isfinite(d)
    if not finite.any():
        return np.zeros_like(d)
    p1, p99 = np.percentile(d[finite], [1, 99])
    d[~finite] = 1.05 * p99
    hi = max(1.05 * p99 if (~finite).any() else p99, p1)
    if hi - p1 <= 0:
        return np.zeros_like(d)
    return np.clip((d - p1) / (hi - p1), 0.0, 1.0)


def make_control_image(depth: PanoFrame, normal: PanoFrame, params: CannyParams | None = None) -> ControlImage:
    """Union of Canny edges of normalized depth and of each normal channel."""
    p = params or CannyParams()
    if depth.camera != normal.camera or not np.allclose(depth.pose.matrix, normal.pose.matrix) \
            or not np.allclose(depth.pose.position, normal.pose.position):
        raise MismatchedInput("depth and normal frames must share camera and pose")
    edges = canny(normalize_depth(depth.data), p.sigma, p.low, p.high, p.percentile, p.wrap)
    for c in range(3):
        edges |= canny(normal.data[..., c], p.sigma, p.low, p.high, p.percentile, p.wrap)
    return ControlImage((edges * 255).astype(np.uint8), COMBINED)


# ----------------------------------------------------------------------------
# composite circle masks


@dataclass(frozen=True)
class MaskSpec:
    n_circles: tuple[int, int] = (1, 10)
    radius_frac: tuple[float, float] = (0.05, 0.25)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_circles
        rlo, rhi = self.radius_frac
        if lo < 1 or hi < lo:
            raise ValueError("n_circles must satisfy 1 <= lo <= hi")
        if not (0 < rlo <= rhi <= 0.5):
            raise ValueError("radius_frac must satisfy 0 < lo <= hi <= 0.5")


def generate_composite_mask(cam: EquirectCamera, spec: MaskSpec) -> np.ndarray:
    """Union of randomly placed filled circles, rasterized at pixel centers."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    H, W = cam.shape
    k = int(rng.integers(spec.n_circles[0], spec.n_circles[1] + 1))
    mask = np.zeros((H, W), dtype=bool)
    for _ in range(k):
        r = rng.uniform(*spec.radius_frac) * min(W, H)
        cx = rng.uniform(0, W)
        cy = rng.uniform(0, H)
        mask |= disc_mask(cam, (cx, cy), r)
    return mask


def disc_mask(cam: EquirectCamera, center, radius: float) -> np.ndarray:
    H, W = cam.shape
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius * radius
