"""Best-view selection and atlas baking for the simplified mesh."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .bvh import BVH
from .errors import AtlasOverflow, MismatchedInput
from .mesh import NO_PLANE, TriMesh
from .panorama import EquirectCamera, PanoFrame, Pose, point_to_pixel

log = logging.getLogger(__name__)

NO_VIEW = -1
MID_GRAY = np.array([128.0, 128.0, 128.0])
CHART_PAD = 1  # gutter texels around each chart


@dataclass
class TexturedSdm:
    mesh: TriMesh  # carries uvs and atlas
    atlas: np.ndarray
    face_view: np.ndarray  # chosen pano index per face, NO_VIEW when unseen
    unseen_faces: set = field(default_factory=set)

    def save(self, path) -> Path:
        """Write OBJ + MTL + PNG atlas (and a PLY with texcoords next to it)."""
        from .meshio import save_mesh

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.mesh.atlas = self.atlas
        self.mesh.atlas_name = path.stem + "_atlas.png"
        save_mesh(self.mesh, path.with_suffix(".obj"))
        save_mesh(self.mesh, path.with_suffix(".ply"))
        return path.with_suffix(".obj")


# ----------------------------------------------------------------------------
# view selection


def _pano_poses(panos):
    out = []
    for p in panos:
        if isinstance(p, PanoFrame):
            out.append((p.camera, p.pose))
        elif isinstance(p, Pose):
            out.append((None, p))
        else:
            out.append(tuple(p))
    return out


def view_scores(mesh: TriMesh, panos, tol: float = 0.01, bvh: BVH | None = None) -> np.ndarray:
    """(F, P) scores: visible * max(0, cos) / dist^2, visibility with ``tol`` slack."""
    poses = [pose for _, pose in _pano_poses(panos)]
    F = mesh.n_faces
    scores = np.zeros((F, len(poses)))
    if F == 0 or not poses:
        return scores
    bvh = bvh or BVH.from_mesh(mesh)
    cent = mesh.face_centroids()
    normals = mesh.face_normals()
    for k, pose in enumerate(poses):
        d = cent - pose.position
        dist = np.linalg.norm(d, axis=1)
        ok = dist > 0
        t, _ = bvh.intersect(np.broadcast_to(pose.position, d.shape), d)
        # t is in units of |d|; nothing may block more than tol before the centroid
        visible = ok & (t * dist >= dist - tol)
        cos = np.einsum("ij,ij->i", normals, -d) / np.where(ok, dist, 1.0)
        scores[:, k] = np.where(visible, np.maximum(cos, 0.0) / np.where(ok, dist, 1.0) ** 2, 0.0)
    return scores


def select_views(mesh: TriMesh, panos, tol: float = 0.01) -> np.ndarray:
    """Per-face index of the best-scoring pano (ties: lowest index), NO_VIEW if none sees it."""
    s = view_scores(mesh, panos, tol)
    if s.shape[1] == 0:
        return np.full(mesh.n_faces, NO_VIEW, dtype=np.int64)
    best = np.argmax(s, axis=1)  # first maximum wins ties
    return np.where(s.max(axis=1) > 0, best, NO_VIEW).astype(np.int64)


# ----------------------------------------------------------------------------
# charts


@dataclass
class Chart:
    faces: np.ndarray
    normal: np.ndarray
    offset: float
    e1: np.ndarray
    e2: np.ndarray
    s0: float
    t0: float
    width: int  # texels including the gutter
    height: int
    x0: int = 0  # placement in the atlas
    y0: int = 0


@dataclass
class AtlasLayout:
    charts: list
    width: int
    height: int
    density: float
    uvs: np.ndarray  # (F, 3, 2)


def _frame_for(points2: np.ndarray, anchor2: np.ndarray):
    """Orientation (angle) of the minimum-area bounding rectangle, rotated so
    that ``anchor2`` sits closest to the rectangle's low corner."""
    try:
        hull = points2[ConvexHull(points2).vertices]
    except (QhullError, ValueError):
        hull = points2
    best = None
    n = len(hull)
    for i in range(n):
        e = hull[(i + 1) % n] - hull[i]
        ln = np.hypot(*e)
        if ln < 1e-12:
            continue
        a = math.atan2(e[1], e[0])
        R = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
        q = hull @ R.T
        area = float(np.ptp(q[:, 0]) * np.ptp(q[:, 1]))
        if best is None or area < best[0] - 1e-12:
            best = (area, a)
    base = best[1] if best else 0.0
    cands = []
    for r in range(4):
        a = base + r * math.pi / 2
        R = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
        q = points2 @ R.T
        lo = q.min(0)
        qa = anchor2 @ R.T
        cands.append((round(float(np.sum(qa - lo)), 9), r, a))
    return min(cands)[2]


def _make_chart(mesh: TriMesh, faces: np.ndarray, normal, offset, density: float) -> Chart:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    b1 = np.cross(helper, n)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(n, b1)
    vids = np.unique(mesh.faces[faces])
    P = mesh.vertices[vids]
    p2 = np.stack([P @ b1, P @ b2], 1)
    anchor = mesh.vertices[vids.min()]
    a = _frame_for(p2, np.array([anchor @ b1, anchor @ b2]))
    e1 = math.cos(a) * b1 + math.sin(a) * b2
    e2 = np.cross(n, e1)
    s, t = P @ e1, P @ e2
    s0, t0 = float(s.min()), float(t.min())
    w = int(math.ceil((s.max() - s0) * density - 1e-9)) + 2 * CHART_PAD
    h = int(math.ceil((t.max() - t0) * density - 1e-9)) + 2 * CHART_PAD
    return Chart(np.asarray(faces), n, float(offset), e1, e2, s0, t0, max(w, 1 + 2 * CHART_PAD),
                 max(h, 1 + 2 * CHART_PAD))


def _shelf_pack(charts: list, max_size: int):
    total = sum(c.width * c.height for c in charts)
    widest = max(c.width for c in charts)
    W = max(widest, 1 << max(0, math.ceil(math.log2(math.sqrt(total)))))
    order = sorted(range(len(charts)), key=lambda i: (-charts[i].height, -charts[i].width, i))
    while True:
        x = y = shelf = 0
        for i in order:
            c = charts[i]
            if x + c.width > W:
                x, y, shelf = 0, y + shelf, 0
            c.x0, c.y0 = x, y
            x += c.width
            shelf = max(shelf, c.height)
        H = y + shelf
        if W <= max_size and H <= max_size:
            return W, H
        if W >= max_size:
            raise AtlasOverflow(f"atlas needs {W}x{H} texels (max {max_size}); lower the texel density")
        W = min(max_size, W * 2)


def coplanar_groups(mesh: TriMesh, decimals: int = 6) -> np.ndarray:
    """Group id per face; faces share a group when their planes agree after rounding."""
    n = mesh.face_normals()
    d = np.einsum("ij,ij->i", n, mesh.face_centroids())
    key = np.round(np.concatenate([n, d[:, None]], axis=1), decimals) + 0.0
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    # number groups by first face so the chart order survives rigid motions
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inv.reshape(-1)]


def build_layout(mesh: TriMesh, planes=None, density: float = 100.0, max_size: int = 8192) -> AtlasLayout:
    """One chart per plane id in ``mesh.face_plane`` and one per face without a
    plane.  Meshes with no plane ids get a chart per group of coplanar faces."""
    if density <= 0:
        raise ValueError("texel density must be > 0")
    if mesh.n_faces == 0:
        return AtlasLayout([], 1, 1, density, np.zeros((0, 3, 2)))
    if mesh.face_plane is not None:
        fp = mesh.face_plane
    else:
        fp, planes = coplanar_groups(mesh), None
    normals = mesh.face_normals()
    areas = mesh.face_areas()
    cent = mesh.face_centroids()
    charts = []
    for pid in sorted(set(fp.tolist()) - {NO_PLANE}):
        faces = np.flatnonzero(fp == pid)
        if planes is not None and 0 <= pid < len(planes):
            nrm, off = planes[pid].normal, planes[pid].offset
        else:
            nrm = (normals[faces] * areas[faces, None]).sum(0)
            if np.linalg.norm(nrm) < 1e-12:
                nrm = normals[faces[0]]
            nrm = nrm / np.linalg.norm(nrm)
            off = float(np.average(cent[faces] @ nrm, weights=areas[faces] + 1e-300))
        # the chart faces the room: orient its normal like its faces
        if (normals[faces] * areas[faces, None]).sum(0) @ nrm < 0:
            nrm, off = -np.asarray(nrm), -off
        charts.append(_make_chart(mesh, faces, nrm, off, density))
    for f in np.flatnonzero(fp == NO_PLANE):
        charts.append(_make_chart(mesh, np.array([f]), normals[f], float(cent[f] @ normals[f]), density))
    W, H = _shelf_pack(charts, max_size)
    uvs = np.zeros((mesh.n_faces, 3, 2))
    for c in charts:
        P = mesh.vertices[mesh.faces[c.faces]]
        px = c.x0 + CHART_PAD + (P @ c.e1 - c.s0) * density
        py = c.y0 + CHART_PAD + (P @ c.e2 - c.t0) * density
        uvs[c.faces, :, 0] = px / W
        uvs[c.faces, :, 1] = 1.0 - py / H
    return AtlasLayout(charts, W, H, density, uvs)


def chart_texels(mesh: TriMesh, chart: Chart, density: float):
    """3D texel centers of a chart and the face covering each (-1 = gutter)."""
    jj, ii = np.meshgrid(np.arange(chart.width), np.arange(chart.height))
    s = chart.s0 + (jj + 0.5 - CHART_PAD) / density
    t = chart.t0 + (ii + 0.5 - CHART_PAD) / density
    pts = chart.normal * chart.offset + s[..., None] * chart.e1 + t[..., None] * chart.e2
    owner = np.full(s.shape, -1, dtype=np.int64)
    tri = mesh.vertices[mesh.faces[chart.faces]]
    S = np.stack([tri @ chart.e1, tri @ chart.e2], -1)  # (k, 3, 2)
    half = 0.5 / density * 1e-6
    # lowest face id wins shared texels: paint in reverse
    for k in range(len(chart.faces) - 1, -1, -1):
        a, b, c = S[k]
        lo = np.floor((np.minimum(np.minimum(a, b), c) - [chart.s0, chart.t0]) * density + CHART_PAD - 0.5).astype(int)
        hi = np.ceil((np.maximum(np.maximum(a, b), c) - [chart.s0, chart.t0]) * density + CHART_PAD - 0.5).astype(int)
        j0, i0 = max(lo[0], 0), max(lo[1], 0)
        j1, i1 = min(hi[0], chart.width - 1), min(hi[1], chart.height - 1)
        if j1 < j0 or i1 < i0:
            continue
        ss, tt = s[i0:i1 + 1, j0:j1 + 1], t[i0:i1 + 1, j0:j1 + 1]
        den = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
        if abs(den) < 1e-18:
            continue
        l1 = ((b[1] - c[1]) * (ss - c[0]) + (c[0] - b[0]) * (tt - c[1])) / den
        l2 = ((c[1] - a[1]) * (ss - c[0]) + (a[0] - c[0]) * (tt - c[1])) / den
        inside = (l1 >= -half) & (l2 >= -half) & (1 - l1 - l2 >= -half)
        owner[i0:i1 + 1, j0:j1 + 1][inside] = chart.faces[k]
    return pts, owner


def _fill_gutter(colors: np.ndarray, owner: np.ndarray) -> np.ndarray:
    covered = owner >= 0
    if covered.all() or not covered.any():
        return colors
    _, (iy, ix) = ndimage.distance_transform_edt(~covered, return_indices=True)
    return colors[iy, ix]


def bake_layout(mesh: TriMesh, layout: AtlasLayout, color_fn) -> np.ndarray:
    """Fill every chart texel with ``color_fn(points (N,3), faces (N,)) -> (N,3)``;
    gutter texels copy their nearest covered texel."""
    atlas = np.zeros((layout.height, layout.width, 3), dtype=np.uint8)
    for c in layout.charts:
        pts, owner = chart_texels(mesh, c, layout.density)
        col = np.zeros(owner.shape + (3,))
        cov = owner >= 0
        if cov.any():
            col[cov] = color_fn(pts[cov], owner[cov])
        else:
            col[:] = MID_GRAY
        col = _fill_gutter(col, owner)
        atlas[c.y0:c.y0 + c.height, c.x0:c.x0 + c.width] = np.clip(np.rint(col), 0, 255).astype(np.uint8)
    return atlas


def sample_bilinear(img: np.ndarray, u, v) -> np.ndarray:
    """Bilinear lookup at pixel coordinates (centers at integers); columns wrap."""
    H, W = img.shape[:2]
    a = img.astype(np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, H - 1.0)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.minimum(np.floor(v).astype(np.int64), H - 2) if H > 1 else np.zeros_like(u, np.int64)
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None] if H > 1 else np.zeros(u.shape + (1,))
    x0 %= W
    x1 = (x0 + 1) % W
    y1 = np.minimum(y0 + 1, H - 1)
    top = a[y0, x0] * (1 - fx) + a[y0, x1] * fx
    bot = a[y1, x0] * (1 - fx) + a[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def bake_texture(mesh: TriMesh, panos: list[PanoFrame], choice=None, texel_density: float = 100.0,
                 planes=None, max_atlas: int = 8192) -> TexturedSdm:
    """Bake an atlas for ``mesh`` from posed RGB panoramas.

    ``choice`` is the per-face pano index from :func:`select_views` (computed
    when None).  Unseen faces take the mean color of the seen texels of their
    chart, or mid-gray.
    """
    if choice is None:
        choice = select_views(mesh, panos)
    choice = np.asarray(choice, dtype=np.int64)
    if len(choice) != mesh.n_faces:
        raise MismatchedInput("choice length does not match face count")
    if np.any((choice < NO_VIEW) | (choice >= len(panos))):
        raise MismatchedInput("choice refers to a pano that does not exist")
    layout = build_layout(mesh, planes, texel_density, max_atlas)
    atlas = np.zeros((layout.height, layout.width, 3), dtype=np.uint8)
    for c in layout.charts:
        pts, owner = chart_texels(mesh, c, layout.density)
        col = np.zeros(owner.shape + (3,))
        cov = owner >= 0
        view = np.full(owner.shape, NO_VIEW)
        view[cov] = choice[owner[cov]]
        for k in np.unique(view[cov]):
            if k == NO_VIEW:
                continue
            sel = view == k
            pano = panos[k]
            u, v, _ = point_to_pixel(pano.camera, pano.pose, pts[sel])
            col[sel] = sample_bilinear(pano.data, u, v)
        seen = cov & (view != NO_VIEW)
        unseen = cov & (view == NO_VIEW)
        if unseen.any():
            col[unseen] = col[seen].mean(0) if seen.any() else MID_GRAY
        if not cov.any():
            col[:] = MID_GRAY
        col = _fill_gutter(col, owner)
        atlas[c.y0:c.y0 + c.height, c.x0:c.x0 + c.width] = np.clip(np.rint(col), 0, 255).astype(np.uint8)
    out = mesh.copy()
    out.uvs = layout.uvs
    out.atlas = atlas
    unseen = set(np.flatnonzero(choice == NO_VIEW).tolist())
    log.info("texture: %dx%d atlas, %d charts, %d unseen faces", layout.width, layout.height,
             len(layout.charts), len(unseen))
    return TexturedSdm(out, atlas, choice, unseen)


def sample_mesh_texture(mesh: TriMesh, points, faces) -> np.ndarray:
    """Atlas color of points lying on the given faces of a textured mesh."""
    if mesh.uvs is None or mesh.atlas is None:
        raise ValueError("mesh has no texture")
    tri = mesh.vertices[mesh.faces[faces]]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, np.asarray(points) - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    w1 = (d11 * d20 - d01 * d21) / den
    w2 = (d00 * d21 - d01 * d20) / den
    w0 = 1 - w1 - w2
    uv = mesh.uvs[faces]
    u = w0 * uv[:, 0, 0] + w1 * uv[:, 1, 0] + w2 * uv[:, 2, 0]
    v = w0 * uv[:, 0, 1] + w1 * uv[:, 1, 1] + w2 * uv[:, 2, 1]
    H, W = mesh.atlas.shape[:2]
    x = np.clip(u * W - 0.5, 0, W - 1)
    y = np.clip((1 - v) * H - 0.5, 0, H - 1)
    # nearest texel: charts are padded so no cross-chart bleeding
    return mesh.atlas[np.rint(y).astype(int), np.rint(x).astype(int)].astype(np.float64)
