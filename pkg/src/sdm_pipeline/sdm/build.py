"""Simplified Defurnished Mesh orchestration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from ..bvh import BVH
from ..mesh import FURNITURE, NO_PLANE, STRUCTURE, UNKNOWN, TriMesh, boundary_edges, boundary_loops, face_adjacency
from ..planes import OTHER, WALL, Plane, project_to_planes
from .decompose import PlanarDecomposition, decompose_planes
from .holes import SdmResult, fill_holes_plane_extension, remove_furniture_faces

log = logging.getLogger(__name__)


@dataclass
class SdmConfig:
    angle_tol_deg: float = 5.0
    dist_tol_m: float = 0.02
    min_region_faces: int = 20
    refit_every: int = 64
    label_threshold: float = 0.5
    plane_snap_radius_m: float = 0.5
    # opening preservation: a filled wall face is re-opened when this many
    # pano centers saw through its location in the input mesh
    opening_min_views: int = 2
    opening_tol_m: float = 0.01


def labels_from_scores(scores, threshold: float = 0.5) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.full(len(scores), UNKNOWN, dtype=np.uint8)
    seen = np.isfinite(scores)
    labels[seen] = np.where(scores[seen] > threshold, FURNITURE, STRUCTURE)
    return labels


def propagate_unknown(labels, adjacency) -> np.ndarray:
    """Give unobserved faces the majority label of their labeled neighbors.

    Runs in waves so labels spread outward one ring at a time; ties and faces
    with no labeled connection end up STRUCTURE.
    """
    labels = np.asarray(labels, dtype=np.uint8).copy()
    while True:
        unknown = np.flatnonzero(labels == UNKNOWN)
        if len(unknown) == 0:
            break
        updates = {}
        for f in unknown:
            nb = labels[adjacency[f]]
            nf = int(np.sum(nb == FURNITURE))
            ns = int(np.sum(nb == STRUCTURE))
            if nf or ns:
                updates[f] = FURNITURE if nf > ns else STRUCTURE
        if not updates:
            labels[unknown] = STRUCTURE
            break
        for f, lab in updates.items():
            labels[f] = lab
    return labels


def demote_furniture_planes(decomp: PlanarDecomposition, labels, areas) -> PlanarDecomposition:
    """Planes made mostly of furniture faces stop counting as structure."""
    planes = []
    for p in decomp.planes:
        inl = np.fromiter(p.inlier_faces, dtype=np.int64)
        fa = float(areas[inl][labels[inl] == FURNITURE].sum())
        kind = OTHER if fa >= 0.5 * float(areas[inl].sum()) else p.kind
        planes.append(Plane(p.normal, p.offset, kind, p.inlier_faces))
    return PlanarDecomposition(planes, decomp.face_to_plane, set(decomp.unassigned_faces))


def snap_to_planes(mesh: TriMesh, face_to_plane, planes, faces_mask=None) -> np.ndarray:
    """Move each vertex onto the plane(s) of its incident assigned faces."""
    V = mesh.vertices.copy()
    vp: dict[int, set] = {}
    sel = np.ones(mesh.n_faces, dtype=bool) if faces_mask is None else faces_mask
    for f in np.flatnonzero(sel & (face_to_plane != NO_PLANE)):
        for v in mesh.faces[f]:
            vp.setdefault(int(v), set()).add(int(face_to_plane[f]))
    for v, ps in vp.items():
        V[v] = project_to_planes(V[v], [planes[p] for p in sorted(ps)])
    return V


def build_sdm(mesh: TriMesh, face_scores=None, config: SdmConfig | None = None,
              pano_positions=None) -> SdmResult:
    """Planar-decompose, defurnish and re-close ``mesh``.

    ``face_scores`` are per-face furniture scores (NaN = unobserved); when
    None the mesh's own face labels are used.  ``pano_positions`` enables the
    opening-preservation rule.
    """
    cfg = config or SdmConfig()
    mesh.validate(check_degenerate=False)
    if face_scores is not None:
        if len(face_scores) != mesh.n_faces:
            raise ValueError("face_scores length does not match face count")
        labels = labels_from_scores(face_scores, cfg.label_threshold)
    else:
        labels = mesh.labels_or_unknown().copy()
    adjacency = face_adjacency(mesh)
    labels = propagate_unknown(labels, adjacency)

    decomp = decompose_planes(mesh, cfg.angle_tol_deg, cfg.dist_tol_m, cfg.min_region_faces, cfg.refit_every)
    decomp = demote_furniture_planes(decomp, labels, mesh.face_areas())

    snapped = mesh.copy()
    snapped.vertices = snap_to_planes(mesh, decomp.face_to_plane, decomp.planes, labels != FURNITURE)
    snapped.face_labels = labels
    snapped.face_plane = decomp.face_to_plane.copy()

    stripped, removed, _ = remove_furniture_faces(snapped, labels)
    # every boundary loop is closed, including holes already present in the scan
    loops = boundary_loops(stripped)
    result = fill_holes_plane_extension(stripped, loops, decomp, cfg.plane_snap_radius_m)
    result.removed_faces = removed

    if pano_positions is not None and len(pano_positions) and result.filled_faces:
        result = _preserve_openings(result, mesh, np.asarray(pano_positions, dtype=np.float64), cfg)

    out, _ = result.mesh.select_faces(np.ones(result.mesh.n_faces, dtype=bool))
    out.face_labels = np.full(out.n_faces, STRUCTURE, dtype=np.uint8)
    result.mesh = out
    result.boundary_edge_count = len(boundary_edges(out))
    log.info("sdm: removed %d faces, filled %d, %d loops open, %d boundary edges",
             len(result.removed_faces), len(result.filled_faces), len(result.unsupported),
             result.boundary_edge_count)
    return result


def _preserve_openings(result: SdmResult, original: TriMesh, centers: np.ndarray, cfg: SdmConfig) -> SdmResult:
    """Re-open filled wall faces that the cameras could see through in the input."""
    mesh = result.mesh
    filled = np.array(sorted(result.filled_faces), dtype=np.int64)
    walls = np.array([result.planes[result.plane_of_filled[f]].kind == WALL for f in filled])
    cand = filled[walls]
    if len(cand) == 0 or original.n_faces == 0:
        return result
    bvh = BVH.from_mesh(original)
    cent = mesh.face_centroids()[cand]
    through = np.zeros(len(cand), dtype=np.int64)
    for c in centers:
        d = cent - c
        dist = np.linalg.norm(d, axis=1)
        t, _ = bvh.intersect(c[None], d)
        # t is in units of |d|: a hit beyond the patch means the ray passed through
        through += (t * dist > dist + cfg.opening_tol_m).astype(np.int64)
    reopen = set(cand[through >= cfg.opening_min_views].tolist())
    if not reopen:
        return result
    keep = np.array([f not in reopen for f in range(mesh.n_faces)])
    new_mesh, _ = mesh.select_faces(keep)
    new_index = np.cumsum(keep) - 1
    filled_kept = sorted(f for f in result.filled_faces if f not in reopen)
    return replace(
        result,
        mesh=new_mesh,
        filled_faces={int(new_index[f]) for f in filled_kept},
        plane_of_filled={int(new_index[f]): result.plane_of_filled[f] for f in filled_kept},
        reopened_faces=len(reopen),
    )
