"""Planar decomposition of a triangle mesh by greedy region growing."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateInput
from ..mesh import NO_PLANE, TriMesh, face_adjacency
from ..planes import CEILING, FLOOR, OTHER, Plane, PlaneAccumulator, normal_class

MIN_FLOOR_SHARE = 0.05


@dataclass
class PlanarDecomposition:
    planes: list[Plane]
    face_to_plane: np.ndarray
    unassigned_faces: set = field(default_factory=set)

    def structural_ids(self) -> list[int]:
        return [i for i, p in enumerate(self.planes) if p.is_structural]


def decompose_planes(mesh: TriMesh, angle_tol: float = 5.0, dist_tol: float = 0.02,
                     min_region_faces: int = 20, refit_every: int = 64) -> PlanarDecomposition:
    """Split ``mesh`` into planar regions.

    Seeds are taken largest-area first.  A region absorbs an adjacent face when
    the face normal is within ``angle_tol`` degrees of the region normal and
    all three of its vertices lie within ``dist_tol`` of the region's running
    least-squares plane (refit every ``refit_every`` additions).  Regions that
    end up smaller than ``min_region_faces`` are dropped; their faces may still
    be absorbed by later regions.  Coplanar regions are merged afterwards.
    """
    nf = mesh.n_faces
    face_to_plane = np.full(nf, NO_PLANE, dtype=np.int64)
    if nf == 0:
        return PlanarDecomposition([], face_to_plane, set())
    cos_tol = np.cos(np.radians(angle_tol))
    normals = mesh.face_normals()
    areas = mesh.face_areas()
    tri = mesh.triangles()
    adj = face_adjacency(mesh)

    region_of = np.full(nf, -1, dtype=np.int64)
    tried = np.zeros(nf, dtype=bool)
    regions: list[list[int]] = []
    seeds = np.lexsort((np.arange(nf), -areas))

    for seed in seeds:
        if region_of[seed] >= 0 or tried[seed]:
            continue
        tried[seed] = True
        rid = len(regions)
        members = [seed]
        region_of[seed] = rid
        acc = PlaneAccumulator()
        acc.add(tri[seed], normals[seed] * areas[seed])
        plane_n = normals[seed]
        plane_d = float(plane_n @ tri[seed].mean(0))
        queue = deque(adj[seed])
        queued = {seed, *adj[seed]}
        since_refit = 0
        while queue:
            c = queue.popleft()
            if region_of[c] >= 0:
                continue
            if normals[c] @ plane_n < cos_tol:
                continue
            if np.max(np.abs(tri[c] @ plane_n - plane_d)) > dist_tol:
                continue
            region_of[c] = rid
            members.append(c)
            acc.add(tri[c], normals[c] * areas[c])
            since_refit += 1
            if since_refit >= refit_every:
                since_refit = 0
                try:
                    p = acc.plane()
                    plane_n, plane_d = p.normal, p.offset
                except DegenerateInput:
                    pass
            for nb in adj[c]:
                if nb not in queued and region_of[nb] < 0:
                    queued.add(nb)
                    queue.append(nb)
        if len(members) < min_region_faces:
            region_of[members] = -1
            tried[members] = True
            regions.append([])
        else:
            regions.append(members)

    groups = [m for m in regions if m]
    planes = [_fit_region(mesh, m, normals, areas) for m in groups]
    groups, planes = _merge_coplanar(mesh, groups, planes, normals, areas, cos_tol, dist_tol)

    kept_planes = []
    for members, plane in zip(groups, planes):
        members = np.asarray(sorted(members))
        # enforce the dist_tol invariant against the final fit
        ok = np.max(np.abs(tri[members] @ plane.normal - plane.offset), axis=1) <= dist_tol
        members = members[ok]
        if len(members) < min_region_faces or len(members) == 0:
            continue
        pid = len(kept_planes)
        face_to_plane[members] = pid
        kept_planes.append(Plane(plane.normal, plane.offset, normal_class(plane.normal),
                                 frozenset(members.tolist())))
    _classify(kept_planes, mesh, areas)
    unassigned = set(np.flatnonzero(face_to_plane == NO_PLANE).tolist())
    return PlanarDecomposition(kept_planes, face_to_plane, unassigned)


def _fit_region(mesh, members, normals, areas) -> Plane:
    acc = PlaneAccumulator()
    tri = mesh.triangles()[members]
    for t, n, a in zip(tri, normals[members], areas[members]):
        acc.add(t, n * a)
    try:
        return acc.plane()
    except DegenerateInput:
        n = normals[members[0]]
        return Plane(n, float(n @ tri[0].mean(0)))


def _merge_coplanar(mesh, groups, planes, normals, areas, cos_tol, dist_tol):
    tri = mesh.triangles()
    parent = list(range(len(groups)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            pi, pj = planes[i], planes[j]
            if pi.normal @ pj.normal < cos_tol or abs(pi.offset - pj.offset) > dist_tol:
                continue
            small = groups[j] if len(groups[j]) <= len(groups[i]) else groups[i]
            big_plane = pi if small is groups[j] else pj
            if np.max(np.abs(tri[small] @ big_plane.normal - big_plane.offset)) <= dist_tol:
                a, b = find(i), find(j)
                if a != b:
                    parent[max(a, b)] = min(a, b)
    merged: dict[int, list[int]] = {}
    for i, g in enumerate(groups):
        merged.setdefault(find(i), []).extend(g)
    roots = sorted(merged)
    new_groups = [sorted(merged[r]) for r in roots]
    new_planes = [planes[r] if len(merged[r]) == len(groups[r]) else _fit_region(mesh, merged[r], normals, areas)
                  for r in roots]
    return new_groups, new_planes


def _height(p: Plane) -> float:
    return p.offset / p.normal[2]


def _classify(planes: list[Plane], mesh: TriMesh, areas: np.ndarray) -> None:
    """Keep only the lowest significant up-facing plane as floor (and the
    highest significant down-facing plane as ceiling); demote the rest."""
    for kind, pick in ((FLOOR, min), (CEILING, max)):
        cand = [i for i, p in enumerate(planes) if p.kind == kind]
        if not cand:
            continue
        proj = {i: float(areas[list(planes[i].inlier_faces)].sum() * abs(planes[i].normal[2])) for i in cand}
        total = sum(proj.values())
        big = [i for i in cand if proj[i] >= MIN_FLOOR_SHARE * total]
        chosen = pick(big, key=lambda i: (_height(planes[i]), i))
        h0 = _height(planes[chosen])
        for i in cand:
            if i != chosen and abs(_height(planes[i]) - h0) > 1e-6:
                planes[i].kind = OTHER
