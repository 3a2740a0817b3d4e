"""Indexed triangle mesh and the topology helpers built on it.

Conventions: world frame is +Z up, units are meters.  Indoor meshes are
expected to have faces wound so their normals point toward the room interior,
i.e. toward the cameras that observed them.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

UNKNOWN = 0
STRUCTURE = 1
FURNITURE = 2
LABEL_NAMES = {UNKNOWN: "unknown", STRUCTURE: "structure", FURNITURE: "furniture"}

NO_PLANE = -1
DEGENERATE_AREA = 1e-12


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray | None = None
    face_plane: np.ndarray | None = None
    # per-face UVs, shape (F, 3, 2), plus the atlas they index into
    uvs: np.ndarray | None = None
    atlas: np.ndarray | None = None
    atlas_name: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.face_labels is not None:
            self.face_labels = np.asarray(self.face_labels, dtype=np.uint8)
        if self.face_plane is not None:
            self.face_plane = np.asarray(self.face_plane, dtype=np.int64)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 3, 2)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self, check_degenerate: bool = True) -> "TriMesh":
        if not np.all(np.isfinite(self.vertices)):
            raise ValidationError("non-finite vertex coordinates")
        if self.n_faces:
            if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
                raise ValidationError(
                    f"face index out of range (vertex count {self.n_vertices})"
                )
        for name in ("face_labels", "face_plane"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != self.n_faces:
                raise ValidationError(f"{name} has {len(arr)} entries for {self.n_faces} faces")
        if self.uvs is not None and len(self.uvs) != self.n_faces:
            raise ValidationError("uvs length does not match face count")
        if check_degenerate and self.n_faces:
            bad = np.flatnonzero(self.face_areas() < DEGENERATE_AREA)
            if len(bad):
                raise ValidationError(f"{len(bad)} degenerate faces (first: {bad[0]})")
        return self

    def triangles(self) -> np.ndarray:
        """Corner coordinates, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def face_normals(self, unit: bool = True) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if unit:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(norm > 0, norm, 1.0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def face_centroids(self) -> np.ndarray:
        return self.triangles().mean(axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def labels_or_unknown(self) -> np.ndarray:
        if self.face_labels is None:
            return np.zeros(self.n_faces, dtype=np.uint8)
        return self.face_labels

    def copy(self) -> "TriMesh":
        def cp(a):
            return None if a is None else a.copy()

        return replace(
            self,
            vertices=self.vertices.copy(),
            faces=self.faces.copy(),
            face_labels=cp(self.face_labels),
            face_plane=cp(self.face_plane),
            uvs=cp(self.uvs),
            meta=dict(self.meta),
        )

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "TriMesh":
        out = self.copy()
        out.vertices = self.vertices @ np.asarray(rotation).T + np.asarray(translation)
        return out

    def select_faces(self, keep: np.ndarray) -> tuple["TriMesh", np.ndarray]:
        """Keep the faces flagged in ``keep`` and prune orphaned vertices.

        Returns the new mesh and the old->new vertex index map (-1 for pruned).
        """
        keep = np.asarray(keep, dtype=bool)
        faces = self.faces[keep]
        used = np.zeros(self.n_vertices, dtype=bool)
        used[faces.ravel()] = True
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(int(used.sum()))
        out = TriMesh(
            vertices=self.vertices[used],
            faces=remap[faces],
            face_labels=None if self.face_labels is None else self.face_labels[keep],
            face_plane=None if self.face_plane is None else self.face_plane[keep],
            uvs=None if self.uvs is None else self.uvs[keep],
            atlas=self.atlas,
            atlas_name=self.atlas_name,
            meta=dict(self.meta),
        )
        return out, remap


def concatenate(meshes: list[TriMesh]) -> TriMesh:
    verts, faces, labels, planes = [], [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        labels.append(m.labels_or_unknown())
        planes.append(m.face_plane if m.face_plane is not None else np.full(m.n_faces, NO_PLANE))
        offset += m.n_vertices
    has_labels = any(m.face_labels is not None for m in meshes)
    has_planes = any(m.face_plane is not None for m in meshes)
    return TriMesh(
        vertices=np.concatenate(verts) if verts else np.zeros((0, 3)),
        faces=np.concatenate(faces) if faces else np.zeros((0, 3), dtype=np.int64),
        face_labels=np.concatenate(labels) if has_labels else None,
        face_plane=np.concatenate(planes) if has_planes else None,
    )


def weld(mesh: TriMesh, tol: float = 1e-9) -> TriMesh:
    """Merge vertices whose coordinates agree to within ``tol``."""
    if mesh.n_vertices == 0:
        return mesh.copy()
    key = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    # keep first-occurrence order so welding is stable
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    out = mesh.copy()
    out.vertices = mesh.vertices[first[order]]
    out.faces = rank[inverse][mesh.faces]
    return out


def edge_faces(mesh: TriMesh) -> dict[tuple[int, int], list[int]]:
    """Undirected edge -> incident face ids."""
    table = defaultdict(list)
    for fi, (a, b, c) in enumerate(mesh.faces.tolist()):
        for u, v in ((a, b), (b, c), (c, a)):
            table[(u, v) if u < v else (v, u)].append(fi)
    return table


def face_adjacency(mesh: TriMesh) -> list[list[int]]:
    """Neighbors sharing an edge, per face, sorted ascending."""
    adj = [set() for _ in range(mesh.n_faces)]
    n_nonmanifold = 0
    for fs in edge_faces(mesh).values():
        if len(fs) > 2:
            n_nonmanifold += 1
        for i in fs:
            for j in fs:
                if i != j:
                    adj[i].add(j)
    if n_nonmanifold:
        log.warning("mesh has %d non-manifold edges", n_nonmanifold)
    return [sorted(s) for s in adj]


def boundary_edges(mesh: TriMesh) -> list[tuple[int, int]]:
    """Directed half-edges (u, v) that have no twin, in face order."""
    directed = set()
    for a, b, c in mesh.faces.tolist():
        directed.update(((a, b), (b, c), (c, a)))
    counts = defaultdict(int)
    for u, v in directed:
        counts[(min(u, v), max(u, v))] += 1
    out = []
    for a, b, c in mesh.faces.tolist():
        for u, v in ((a, b), (b, c), (c, a)):
            if counts[(min(u, v), max(u, v))] == 1:
                out.append((u, v))
    return out


def boundary_loops(mesh: TriMesh) -> list[list[int]]:
    """Ordered boundary vertex loops.

    Each loop runs opposite to the half-edges of the faces bordering it, which
    is the winding a patch closing the hole must use to stay consistently
    oriented with its neighbors.  Loops start at their lowest vertex index.
    A traced cycle that passes a vertex twice (holes touching at a corner) is
    split there into simple loops.
    """
    nxt = defaultdict(list)
    for u, v in boundary_edges(mesh):
        nxt[v].append(u)
    for k in nxt:
        nxt[k].sort()
    loops = []
    while True:
        starts = [k for k, vs in nxt.items() if vs]
        if not starts:
            break
        start = min(starts)
        loop = [start]
        cur = nxt[start].pop(0)
        guard = 0
        while cur != start:
            loop.append(cur)
            if not nxt[cur]:
                break  # open chain on a non-manifold boundary
            cur = nxt[cur].pop(0)
            guard += 1
            if guard > 10 * mesh.n_faces + 10:
                break
        for simple in _split_pinched(loop):
            if len(simple) >= 3:
                k = int(np.argmin(simple))
                loops.append(simple[k:] + simple[:k])
    return loops


def _split_pinched(loop: list[int]) -> list[list[int]]:
    stack, pos, out = [], {}, []
    for v in loop:
        if v in pos:
            i = pos[v]
            sub = stack[i:]
            for w in sub[1:]:
                pos.pop(w, None)
            del stack[i + 1:]
            out.append(sub)
        else:
            pos[v] = len(stack)
            stack.append(v)
    out.append(stack)
    return out


def is_watertight(mesh: TriMesh) -> bool:
    return mesh.n_faces > 0 and not boundary_edges(mesh)


# ----------------------------------------------------------------------------
# primitives


def grid_quad(origin, du, dv, nu: int, nv: int) -> TriMesh:
    """Planar patch origin + s*du + t*dv tessellated into nu x nv quads.

    Faces are wound so the normal is along du x dv.
    """
    origin, du, dv = (np.asarray(x, dtype=np.float64) for x in (origin, du, dv))
    s = np.linspace(0.0, 1.0, nu + 1)
    t = np.linspace(0.0, 1.0, nv + 1)
    S, T = np.meshgrid(s, t, indexing="ij")
    verts = origin + S.reshape(-1, 1) * du + T.reshape(-1, 1) * dv
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    faces = np.stack([np.stack([a, b, c], 1), np.stack([a, c, d], 1)], 1).reshape(-1, 3)
    return TriMesh(verts, faces)


def box_room(size=(4.0, 4.0, 3.0), cell: float | None = None, origin=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed axis-aligned box with inward-facing normals.

    ``cell`` is the target tessellation edge length; None gives two triangles
    per side.
    """
    sx, sy, sz = size
    ox, oy, oz = origin

    def n(length):
        return 1 if cell is None else max(1, int(round(length / cell)))

    X, Y, Z = np.eye(3)
    o = np.array([ox, oy, oz])
    sides = [
        grid_quad(o, sx * X, sy * Y, n(sx), n(sy)),  # floor, normal +z
        grid_quad(o + sz * Z, sy * Y, sx * X, n(sy), n(sx)),  # ceiling, normal -z
        grid_quad(o, sz * Z, sx * X, n(sz), n(sx)),  # y=0 wall, normal +y
        grid_quad(o + sy * Y, sx * X, sz * Z, n(sx), n(sz)),  # y=sy, normal -y
        grid_quad(o, sy * Y, sz * Z, n(sy), n(sz)),  # x=0, normal +x
        grid_quad(o + sx * X, sz * Z, sy * Y, n(sz), n(sy)),  # x=sx, normal -x
    ]
    return weld(concatenate(sides))


def box_solid(center, size, yaw: float = 0.0, bottom: bool = True) -> TriMesh:
    """Closed (or bottomless) box with outward normals, standing on z = center z."""
    hx, hy = size[0] / 2.0, size[1] / 2.0
    h = size[2]
    X, Y, Z = np.eye(3)
    o = np.array([-hx, -hy, 0.0])
    sides = [
        grid_quad(o + h * Z, 2 * hx * X, 2 * hy * Y, 1, 1),  # top, +z
        grid_quad(o, 2 * hx * X, h * Z, 1, 1),  # -y
        grid_quad(o + 2 * hy * Y, h * Z, 2 * hx * X, 1, 1),  # +y
        grid_quad(o, h * Z, 2 * hy * Y, 1, 1),  # -x
        grid_quad(o + 2 * hx * X, 2 * hy * Y, h * Z, 1, 1),  # +x
    ]
    if bottom:
        sides.append(grid_quad(o, 2 * hy * Y, 2 * hx * X, 1, 1))
    m = weld(concatenate(sides))
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return m.transformed(rot, center)


def cylinder_solid(center, radius: float, height: float, segments: int = 16, bottom: bool = True) -> TriMesh:
    """Capped cylinder (outward normals) standing on z = center z."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(segments)], 1)
    top = ring + [0.0, 0.0, height]
    verts = [ring, top, [[0.0, 0.0, height]]]
    faces = []
    i = np.arange(segments)
    j = (i + 1) % segments
    faces.append(np.stack([i, j, segments + j], 1))
    faces.append(np.stack([i, segments + j, segments + i], 1))
    tc = 2 * segments
    faces.append(np.stack([np.full(segments, tc), segments + i, segments + j], 1))
    if bottom:
        verts.append([[0.0, 0.0, 0.0]])
        bc = 2 * segments + 1
        faces.append(np.stack([np.full(segments, bc), j, i], 1))
    m = TriMesh(np.concatenate(verts), np.concatenate(faces))
    return m.transformed(np.eye(3), center)


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Unit icosahedron refined by edge midpoints; outward normals."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius, np.array(faces))


def flip_faces(mesh: TriMesh) -> TriMesh:
    out = mesh.copy()
    out.faces = mesh.faces[:, ::-1].copy()
    if out.uvs is not None:
        out.uvs = out.uvs[:, ::-1].copy()
    return out
