"""Image metrics (MSE, PSNR, SSIM and masked variants) and cloud-to-mesh RMSE."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bvh import point_to_mesh_distance
from .errors import EmptyMask, MismatchedInput
from .mesh import TriMesh

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        return {"values": {k: _jsonable(v) for k, v in self.values.items()}, "counts": dict(self.counts)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        vals = {k: (math.inf if v == "inf" else v) for k, v in d.get("values", {}).items()}
        return cls(vals, dict(d.get("counts", {})))


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def as_unit_float(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a.astype(np.float64) / 255.0
    return a.astype(np.float64)


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM of two single-channel [0, 1] images (mirrored borders)."""
    w = gaussian_window()

    def filt(x):
        return ndimage.correlate(x, w, mode="reflect")

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a, mu_b = filt(a), filt(b)
    va = filt(a * a) - mu_a ** 2
    vb = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = K1 ** 2, K2 ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))


def ssim(a, b, mask=None) -> float:
    a, b = as_unit_float(a), as_unit_float(b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    vals = []
    for c in range(a.shape[2]):
        m = ssim_map(a[..., c], b[..., c])
        vals.append(m[mask].mean() if mask is not None else m.mean())
    return float(np.mean(vals))


def image_metrics(pred, target, mask=None) -> MetricReport:
    """MSE / PSNR / SSIM over the whole image and, with ``mask``, over mask pixels."""
    p, t = as_unit_float(pred), as_unit_float(target)
    if p.shape != t.shape:
        raise MismatchedInput(f"pred {p.shape} vs target {t.shape}")
    se = (p - t) ** 2
    mse = float(se.mean())
    rep = MetricReport({"mse": mse, "psnr_db": psnr_from_mse(mse), "ssim": ssim(p, t)},
                       {"pixels": int(p.shape[0] * p.shape[1])})
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != p.shape[:2]:
            raise MismatchedInput(f"mask {mask.shape} vs image {p.shape[:2]}")
        if not mask.any():
            raise EmptyMask("masked metrics need at least one mask pixel")
        mm = float(se[mask].mean())
        rep.values.update(mse_masked=mm, psnr_masked_db=psnr_from_mse(mm), ssim_masked=ssim(p, t, mask))
        rep.counts["masked_pixels"] = int(mask.sum())
    return rep


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform points on the mesh surface."""
    areas = mesh.face_areas()
    if mesh.n_faces == 0 or areas.sum() <= 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.Generator(np.random.PCG64(seed))
    f = rng.choice(mesh.n_faces, size=n, p=areas / areas.sum())
    u = rng.random((n, 2))
    su = np.sqrt(u[:, 0])
    w0, w1 = 1.0 - su, su * (1.0 - u[:, 1])
    w2 = su * u[:, 1]
    tri = mesh.triangles()[f]
    return w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]


def cloud_to_mesh_rmse(candidate: TriMesh, reference: TriMesh, n_samples: int = 100_000,
                       seed: int = 0, symmetric: bool = False) -> float:
    """RMS distance from points sampled on ``candidate`` to ``reference``."""
    if candidate.n_faces == 0 or reference.n_faces == 0:
        raise ValueError("both meshes must be non-empty")
    d = np.atleast_1d(point_to_mesh_distance(sample_surface(candidate, n_samples, seed), reference))
    ms = float(np.mean(d ** 2))
    if symmetric:
        d2 = np.atleast_1d(point_to_mesh_distance(sample_surface(reference, n_samples, seed + 1), candidate))
        ms = 0.5 * (ms + float(np.mean(d2 ** 2)))
    return math.sqrt(ms)
