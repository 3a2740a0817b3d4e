"""Equirectangular cameras, posed panoramas, ray-cast rendering and mask projection.

Pixel (u, v) has its center at continuous coordinate (u, v); longitude is
theta = 2*pi*(u + 0.5)/W - pi and latitude phi = pi/2 - pi*(v + 0.5)/H.  The
camera-frame direction is (cos phi cos theta, cos phi sin theta, sin phi), so
the image center looks down +x and the top row looks up +z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .bvh import mesh_bvh
from .errors import DegenerateInput, MismatchedInput, OutOfBounds, ValidationError
from .mesh import FURNITURE, STRUCTURE, UNKNOWN, TriMesh

RGB8, DEPTH, NORMAL, MASK = "rgb8", "depth32", "normal32", "mask1"
NO_FACE = -1
MIN_VOTE_DEPTH = 0.5


@dataclass(frozen=True)
class EquirectCamera:
    width: int
    height: int

    def __post_init__(self):
        if self.width != 2 * self.height or self.height < 8:
            raise ValidationError(f"bad equirect size {self.width}x{self.height}")

    @classmethod
    def from_height(cls, height: int) -> "EquirectCamera":
        return cls(2 * height, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


class Pose:
    """Rigid camera-to-world transform: position plus unit quaternion (w, x, y, z)."""

    __slots__ = ("position", "rotation", "_R")

    def __init__(self, position=(0.0, 0.0, 0.0), rotation=(1.0, 0.0, 0.0, 0.0)):
        self.position = np.asarray(position, dtype=np.float64).reshape(3)
        q = np.asarray(rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValidationError(f"quaternion norm {np.linalg.norm(q)} != 1")
        self.rotation = q
        w, x, y, z = q
        self._R = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    @classmethod
    def from_wxyz(cls, position, wxyz, normalize: bool = True) -> "Pose":
        q = np.asarray(wxyz, dtype=np.float64)
        if normalize:
            q = q / np.linalg.norm(q)
        return cls(position, q)

    @classmethod
    def from_matrix(cls, position, R) -> "Pose":
        from scipy.spatial.transform import Rotation

        x, y, z, w = Rotation.from_matrix(R).as_quat()
        q = np.array([w, x, y, z])
        return cls(position, q / np.linalg.norm(q))

    @property
    def matrix(self) -> np.ndarray:
        return self._R

    def to_json(self) -> dict:
        return {"position": self.position.tolist(), "rotation_wxyz": self.rotation.tolist()}

    def __repr__(self):
        return f"Pose(position={self.position.tolist()}, rotation={self.rotation.tolist()})"


@dataclass
class PanoFrame:
    camera: EquirectCamera
    pose: Pose
    data: np.ndarray
    kind: str = RGB8

    def __post_init__(self):
        if self.data.shape[:2] != self.camera.shape:
            raise MismatchedInput(f"image {self.data.shape[:2]} != camera {self.camera.shape}")


# ----------------------------------------------------------------------------
# projection


def _angles(cam: EquirectCamera, u, v):
    theta = 2.0 * np.pi * ((np.asarray(u, dtype=np.float64) + 0.5) / cam.width) - np.pi
    phi = 0.5 * np.pi - np.pi * ((np.asarray(v, dtype=np.float64) + 0.5) / cam.height)
    return theta, phi


def _dirs(theta, phi):
    c = np.cos(phi)
    return np.stack([c * np.cos(theta), c * np.sin(theta), np.sin(phi)], axis=-1)


def pixel_to_ray(cam: EquirectCamera, pose: Pose, u, v):
    """World-space ray (origin, unit direction) through pixel coordinate (u, v).

    Accepts scalars or arrays.  Coordinates may extend half a pixel past the
    first row/column so that :func:`point_to_pixel` output always round-trips.
    """
    ua, va = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if np.any(ua < -0.5) or np.any(ua >= cam.width) or np.any(va < -0.5) or np.any(va > cam.height - 0.5):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {cam.width}x{cam.height}")
    d = _dirs(*_angles(cam, ua, va)) @ pose.matrix.T
    return pose.position.copy(), d


def point_to_pixel(cam: EquirectCamera, pose: Pose, p):
    """Inverse of :func:`pixel_to_ray`; returns (u, v, depth) for point(s) ``p``."""
    p = np.asarray(p, dtype=np.float64)
    rel = (p - pose.position) @ pose.matrix  # world -> camera
    depth = np.linalg.norm(rel, axis=-1)
    if np.any(depth == 0):
        raise DegenerateInput("point coincides with the camera center")
    theta = np.arctan2(rel[..., 1], rel[..., 0])
    phi = np.arcsin(np.clip(rel[..., 2] / depth, -1.0, 1.0))
    u = np.mod((theta + np.pi) / (2 * np.pi) * cam.width - 0.5, cam.width)
    v = (0.5 * np.pi - phi) / np.pi * cam.height - 0.5
    if np.ndim(u) == 0:
        return float(u), float(v), float(depth)
    return u, v, depth


def camera_directions(cam: EquirectCamera, pose: Pose | None = None) -> np.ndarray:
    """Unit ray direction for every pixel center, shape (H, W, 3)."""
    vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    d = _dirs(*_angles(cam, uu, vv))
    if pose is not None:
        d = d @ pose.matrix.T
    return d


# ----------------------------------------------------------------------------
# rendering


def render_geometry(mesh: TriMesh, cam: EquirectCamera, pose: Pose):
    """Ray-cast depth (ray length), world normals and hit face ids.

    Returns (depth frame, normal frame, face_id array).  Misses have depth
    +inf, zero normal and face id -1.
    """
    dirs = camera_directions(cam, pose).reshape(-1, 3)
    if mesh.n_faces == 0:
        depth = np.full(cam.shape, np.inf)
        return (
            PanoFrame(cam, pose, depth, DEPTH),
            PanoFrame(cam, pose, np.zeros(cam.shape + (3,)), NORMAL),
            np.full(cam.shape, NO_FACE, dtype=np.int64),
        )
    t, face = mesh_bvh(mesh).intersect(pose.position[None], dirs)
    fn = mesh.face_normals()
    normals = np.zeros_like(dirs)
    hit = face >= 0
    n = fn[face[hit]]
    # orient toward the viewer
    flip = np.einsum("ij,ij->i", n, dirs[hit]) > 0
    n[flip] *= -1
    normals[hit] = n
    return (
        PanoFrame(cam, pose, t.reshape(cam.shape), DEPTH),
        PanoFrame(cam, pose, normals.reshape(cam.shape + (3,)), NORMAL),
        face.reshape(cam.shape),
    )


def hit_points(depth: PanoFrame) -> np.ndarray:
    """World-space points for a depth frame; non-hits become NaN."""
    d = camera_directions(depth.camera, depth.pose)
    t = np.where(np.isfinite(depth.data), depth.data, np.nan)
    return depth.pose.position + d * t[..., None]


def _as_binary(frame: PanoFrame) -> np.ndarray:
    m = np.asarray(frame.data)
    if m.dtype == bool:
        return m
    vals = np.unique(m)
    if not set(vals.tolist()) <= {0, 1}:
        raise MismatchedInput(f"mask is not binary (values {vals[:5].tolist()}...)")
    return m.astype(bool)


def erode_wrapped(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion treating columns as periodic (panorama seam)."""
    if radius <= 0:
        return mask
    padded = np.pad(mask, ((0, 0), (radius, radius)), mode="wrap")
    st = ndimage.generate_binary_structure(2, 1)
    out = ndimage.binary_erosion(padded, st, iterations=radius, border_value=1)
    return out[:, radius:-radius]


def project_masks_to_faces(mesh: TriMesh, masks: list[PanoFrame], threshold: float = 0.5,
                           erosion_px: int = 0):
    """Distance-weighted furniture vote per face.

    Every mask pixel votes its value for the front-most face its ray hits,
    with weight 1/max(depth, 0.5 m).  Returns (scores, labels): scores are in
    [0, 1] with NaN marking faces no pixel observed; labels are FURNITURE when
    score > threshold, STRUCTURE when observed otherwise, UNKNOWN when unseen.
    """
    nf = mesh.n_faces
    wsum = np.zeros(nf)
    vsum = np.zeros(nf)
    for frame in masks:
        m = erode_wrapped(_as_binary(frame), erosion_px)
        depth, _, face = render_geometry(mesh, frame.camera, frame.pose)
        hit = face >= 0
        w = 1.0 / np.maximum(depth.data[hit], MIN_VOTE_DEPTH)
        f = face[hit]
        wsum += np.bincount(f, weights=w, minlength=nf)
        vsum += np.bincount(f, weights=w * m[hit], minlength=nf)
    scores = np.full(nf, np.nan)
    seen = wsum > 0
    scores[seen] = vsum[seen] / wsum[seen]
    labels = np.full(nf, UNKNOWN, dtype=np.uint8)
    labels[seen] = np.where(scores[seen] > threshold, FURNITURE, STRUCTURE)
    return scores, labels
