"""Infinite planes: least-squares fitting and structural classification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput

FLOOR, WALL, CEILING, OTHER = "floor", "wall", "ceiling", "other"
STRUCTURAL = (FLOOR, WALL, CEILING)

# 15 degree cone around the vertical axis
_COS15 = float(np.cos(np.radians(15.0)))
_SIN15 = float(np.sin(np.radians(15.0)))


@dataclass
class Plane:
    """Plane n.x = d with unit normal n."""

    normal: np.ndarray
    offset: float
    kind: str = OTHER
    inlier_faces: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.offset = float(self.offset)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        if self.kind not in (*STRUCTURAL, OTHER):
            raise ValueError(f"unknown plane class {self.kind!r}")

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset

    def distance(self, points) -> np.ndarray:
        return np.abs(self.signed_distance(points))

    def project(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points - np.multiply.outer(self.signed_distance(points), self.normal)

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthonormal in-plane axes (e1, e2) with e1 x e2 = normal."""
        n = self.normal
        helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(helper, n)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2

    @property
    def is_structural(self) -> bool:
        return self.kind in STRUCTURAL


def normal_class(normal) -> str:
    """Orientation-only class: floor/ceiling/wall cone test, else other."""
    z = float(np.asarray(normal)[2])
    if z >= _COS15:
        return FLOOR
    if z <= -_COS15:
        return CEILING
    if abs(z) <= _SIN15:
        return WALL
    return OTHER


def _canonical_sign(n: np.ndarray) -> np.ndarray:
    # prefer +z, then +y, then +x
    for k in (2, 1, 0):
        if abs(n[k]) > 1e-12:
            return n if n[k] > 0 else -n
    return n


def fit_plane(points, normals=None, weights=None) -> Plane:
    """Total-least-squares plane through ``points``.

    The normal is the eigenvector of the smallest eigenvalue of the point
    covariance.  When per-point ``normals`` are given the sign follows the
    majority of them; otherwise the sign is canonicalized.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateInput("need at least 3 points")
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    centroid = (w[:, None] * pts).sum(0) / w.sum()
    d = pts - centroid
    cov = (w[:, None] * d).T @ d / w.sum()
    return _plane_from_moments(centroid, cov, normals, extent=np.abs(d).max())


def _plane_from_moments(centroid, cov, normals=None, extent=None) -> Plane:
    evals, evecs = np.linalg.eigh(cov)
    scale = max(float(evals[-1]), 0.0)
    if extent is not None and extent == 0.0 or scale == 0.0:
        raise DegenerateInput("coincident points")
    if evals[1] <= 1e-12 * scale:
        raise DegenerateInput("collinear points")
    n = evecs[:, 0]
    n = n / np.linalg.norm(n)
    if normals is not None:
        votes = np.sign(np.asarray(normals, dtype=np.float64).reshape(-1, 3) @ n)
        s = votes.sum()
        n = -n if s < 0 else (n if s > 0 else _canonical_sign(n))
    else:
        n = _canonical_sign(n)
    return Plane(n, float(n @ centroid))


class PlaneAccumulator:
    """Running first/second moments so a region's plane can be refit cheaply."""

    def __init__(self):
        self.n = 0.0
        self.s1 = np.zeros(3)
        self.s2 = np.zeros((3, 3))
        self.normal_sum = np.zeros(3)

    def add(self, points, normal=None, weight: float = 1.0):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.n += weight * len(pts)
        self.s1 += weight * pts.sum(0)
        self.s2 += weight * pts.T @ pts
        if normal is not None:
            self.normal_sum += weight * np.asarray(normal)

    def plane(self) -> Plane:
        c = self.s1 / self.n
        cov = self.s2 / self.n - np.outer(c, c)
        p = _plane_from_moments(c, cov)
        if self.normal_sum @ p.normal < 0:
            p = Plane(-p.normal, -p.offset)
        return p


def intersect_planes(planes: list[Plane]) -> tuple[np.ndarray, np.ndarray | None]:
    """Intersection of 2 planes (point, direction) or 3 planes (point, None)."""
    N = np.array([p.normal for p in planes])
    d = np.array([p.offset for p in planes])
    if len(planes) == 2:
        direction = np.cross(N[0], N[1])
        norm = np.linalg.norm(direction)
        if norm < 1e-9:
            raise DegenerateInput("parallel planes")
        direction /= norm
        # minimum-norm point satisfying both equations
        point = N.T @ np.linalg.solve(N @ N.T, d)
        return point, direction
    if len(planes) == 3:
        if abs(np.linalg.det(N)) < 1e-9:
            raise DegenerateInput("planes do not meet in a point")
        return np.linalg.solve(N, d), None
    raise ValueError("need 2 or 3 planes")


def project_to_planes(point, planes: list[Plane]) -> np.ndarray:
    """Closest point to ``point`` lying on every plane in ``planes``."""
    p = np.asarray(point, dtype=np.float64)
    if not planes:
        return p.copy()
    N = np.array([pl.normal for pl in planes])
    r = np.array([pl.offset for pl in planes]) - N @ p
    lam, *_ = np.linalg.lstsq(N @ N.T, r, rcond=1e-9)
    return p + N.T @ lam
