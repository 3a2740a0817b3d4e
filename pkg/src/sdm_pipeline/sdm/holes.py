"""Furniture-face removal and hole filling by plane extension."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateInput, UnsupportedLoop
from ..mesh import FURNITURE, NO_PLANE, STRUCTURE, TriMesh, boundary_edges, boundary_loops
from ..planes import Plane, intersect_planes, project_to_planes
from .decompose import PlanarDecomposition
from .triangulate import point_in_polygon, signed_area, triangulate_polygon

log = logging.getLogger(__name__)

JUNCTION_TOL = 1e-6
MAX_LOOP_PLANES = 3


@dataclass
class SdmResult:
    mesh: TriMesh
    removed_faces: set = field(default_factory=set)
    filled_faces: set = field(default_factory=set)
    plane_of_filled: dict = field(default_factory=dict)
    planes: list = field(default_factory=list)
    unsupported: list = field(default_factory=list)
    reopened_faces: int = 0
    boundary_edge_count: int = 0

    @property
    def watertight(self) -> bool:
        return self.mesh.n_faces > 0 and self.boundary_edge_count == 0


def remove_furniture_faces(mesh: TriMesh, labels):
    """Delete FURNITURE faces and prune orphaned vertices.

    Returns (mesh', removed face ids, loops) where loops are the boundary
    loops of mesh' that touch a vertex of a removed face.  Loops wind the way
    a closing patch must (see :func:`sdm_pipeline.mesh.boundary_loops`).
    """
    labels = np.asarray(labels)
    if len(labels) != mesh.n_faces:
        raise ValueError("labels length does not match face count")
    furniture = labels == FURNITURE
    removed = set(np.flatnonzero(furniture).tolist())
    if not removed:
        return mesh.copy(), removed, []
    out, remap = mesh.select_faces(~furniture)
    touched = np.zeros(mesh.n_vertices, dtype=bool)
    touched[mesh.faces[furniture].ravel()] = True
    touched_new = set(remap[touched & (remap >= 0)].tolist())
    loops = [lp for lp in boundary_loops(out) if touched_new.intersection(lp)]
    return out, removed, loops


# ----------------------------------------------------------------------------
# filling


def _plane_frame(plane: Plane):
    e1, e2 = plane.basis()
    return e1, e2


def _to2d(points, plane: Plane):
    e1, e2 = _plane_frame(plane)
    return np.stack([points @ e1, points @ e2], axis=1)


@dataclass
class _Chain:
    """Maximal run of a loop on one plane; both ends lie on junction lines."""

    loop: int
    plane: int
    verts: list
    start_nb: int  # plane across the junction at the first vertex
    end_nb: int  # plane across the junction at the last vertex


@dataclass
class _Plan:
    rings: list = field(default_factory=list)  # (plane, closed vertex ring)
    chains: list = field(default_factory=list)
    vplanes: dict = field(default_factory=dict)
    bridges: list = field(default_factory=list)  # sliver triangles closing edge splits


class _PlaneFailure(Exception):
    def __init__(self, msg, loops):
        super().__init__(msg)
        self.loops = set(loops)


class _Filler:
    def __init__(self, mesh: TriMesh, planes: list[Plane], plane_ids: list[int], snap_radius: float):
        self.mesh = mesh
        self.verts = [v for v in mesh.vertices]
        self.planes = planes
        self.ids = plane_ids  # structural plane ids usable for filling
        self.snap_radius = snap_radius
        self._owner = self._edge_owner()
        self._corners: dict[frozenset, int] = {}

    def _edge_owner(self):
        owner = {}
        for fi, (a, b, c) in enumerate(self.mesh.faces.tolist()):
            for u, v in ((a, b), (b, c), (c, a)):
                owner[(u, v)] = fi
        return owner

    def add_vertex(self, p) -> int:
        self.verts.append(np.asarray(p, dtype=np.float64))
        return len(self.verts) - 1

    # -- per-loop planning ---------------------------------------------------
    def plan(self, li: int, loop) -> _Plan:
        """Assign loop edges to planes and cut the loop into per-plane chains."""
        P = np.array([self.verts[i] for i in loop])
        if not self.ids:
            raise UnsupportedLoop("no structural plane available", loop)
        D = np.stack([self.planes[k].distance(P) for k in self.ids], axis=1)
        nearest = np.argmin(D, axis=1)
        if np.any(D[np.arange(len(loop)), nearest] > self.snap_radius):
            raise UnsupportedLoop("no structural plane within snap radius", loop)
        sets = []
        for i in range(len(loop)):
            close = [self.ids[k] for k in np.flatnonzero(D[i] <= JUNCTION_TOL)]
            sets.append(set(close) if len(close) >= 2 else {self.ids[nearest[i]]})
        distinct = set().union(*[s for s in sets if len(s) == 1])
        if not distinct:
            distinct = set().union(*sets)
        if len(distinct) > MAX_LOOP_PLANES:
            raise UnsupportedLoop(f"loop touches {len(distinct)} planes", loop)
        out = _Plan()
        # junction vertices leave the choice to the edge labels below
        if len(distinct) == 1 and all(len(st) == 1 for st in sets):
            pid = next(iter(distinct))
            out.rings.append((pid, list(loop)))
            out.vplanes = {v: (s if pid in s else {pid}) for v, s in zip(loop, sets)}
            return out

        # label every loop edge with the plane of the hole region it borders
        n = len(loop)
        seq = []  # (start vertex id, plane id) per edge
        vplanes = {loop[i]: sets[i] for i in range(n)}
        for i in range(n):
            a, b = loop[i], loop[(i + 1) % n]
            common = sets[i] & sets[(i + 1) % n]
            if len(common) == 1:
                seq.append((a, next(iter(common))))
            elif len(common) >= 2:
                seq.append((a, self._edge_plane(a, b, common)))
            else:
                if len(sets[i]) != 1 or len(sets[(i + 1) % n]) != 1:
                    raise UnsupportedLoop("edge spans unrelated planes", loop)
                pa, pb = next(iter(sets[i])), next(iter(sets[(i + 1) % n]))
                try:
                    pt, direction = intersect_planes([self.planes[pa], self.planes[pb]])
                except DegenerateInput as exc:
                    raise UnsupportedLoop(str(exc), loop) from exc
                mid = 0.5 * (self.verts[a] + self.verts[b])
                c = pt + direction * float((mid - pt) @ direction)
                cid = self.add_vertex(c)
                vplanes[cid] = {pa, pb}
                seq.append((a, pa))
                seq.append((cid, pb))
                # the split edge leaves a sliver against the existing face
                out.bridges.append((a, b, cid))
        out.vplanes = vplanes

        labels = [p for _, p in seq]
        if len(set(labels)) == 1:
            out.rings.append((labels[0], [v for v, _ in seq]))
            return out
        k0 = next(i for i in range(len(seq)) if labels[i] != labels[i - 1])
        seq = seq[k0:] + seq[:k0]
        runs = []  # [plane, [vertex ids incl. the run's end vertex]]
        for v, p in seq:
            if not runs or runs[-1][0] != p:
                runs.append([p, [v]])
            else:
                runs[-1][1].append(v)
        m = len(runs)
        for i, run in enumerate(runs):
            run[1].append(runs[(i + 1) % m][1][0])
        for i, (p, vs) in enumerate(runs):
            out.chains.append(_Chain(li, p, vs, runs[i - 1][0], runs[(i + 1) % m][0]))
        return out

    def _edge_plane(self, a, b, common):
        # the existing face across this edge decides which side is the hole
        owner = self._owner.get((b, a))
        candidates = sorted(common)
        if owner is not None:
            c = self.mesh.vertices[self.mesh.faces[owner]].mean(0)
            dist = [self.planes[p].distance(c) for p in candidates]
            near = candidates[int(np.argmin(dist))]
            others = [p for p in candidates if p != near]
            if others:
                return others[0]
        return candidates[0]

    # -- per-plane closing ---------------------------------------------------
    def corner(self, planes, vplanes) -> int:
        key = frozenset(planes)
        for v, st in vplanes.items():
            if key <= st:
                return v
        if key not in self._corners:
            pt, _ = intersect_planes([self.planes[p] for p in sorted(key)])
            self._corners[key] = self.add_vertex(pt)
        v = self._corners[key]
        vplanes.setdefault(v, set()).update(key)
        return v

    def _side(self, pid, nb, chains) -> float:
        """+1/-1: which side of plane ``nb`` the hole part on ``pid`` lies."""
        other = self.planes[nb]
        signs = set()
        for c in chains:
            walks = []
            if c.end_nb == nb:
                walks.append(c.verts[-2::-1])
            if c.start_nb == nb:
                walks.append(c.verts[1:])
            for walk in walks:
                for v in walk:
                    d = float(other.signed_distance(self.verts[v]))
                    if abs(d) > JUNCTION_TOL:
                        signs.add(1.0 if d > 0 else -1.0)
                        break
        if len(signs) != 1:
            raise _PlaneFailure(f"cannot orient junction of planes {pid} and {nb}", {c.loop for c in chains})
        return signs.pop()

    def close_chains(self, pid, chains, vplanes) -> list[list[int]]:
        """Join the plane's chains along junction lines into closed rings.

        From each chain end the walk follows a junction line in the direction
        that keeps this plane's part of the hole on the left, up to the
        nearest chain start or three-plane corner ahead.  Where several ways
        leave one point (touching chains, a corner) the tightest left turn
        wins, as in :func:`retrace_rings`.
        """
        if not chains:
            return []
        loops = {c.loop for c in chains}
        plane = self.planes[pid]
        n_i = plane.normal
        e1, e2 = _plane_frame(plane)
        nbs = sorted({c.start_nb for c in chains} | {c.end_nb for c in chains})
        direction = {}
        for nb in nbs:
            t = np.cross(self.planes[nb].normal, n_i)
            norm = np.linalg.norm(t)
            if norm < 1e-9:
                raise _PlaneFailure(f"planes {pid} and {nb} are parallel", loops)
            direction[nb] = self._side(pid, nb, chains) * t / norm
        eps = 1e-9

        def pos(v):
            return self.verts[v]

        def flat(vec):
            return np.array([vec @ e1, vec @ e2])

        def cw(back, fwd):
            a = (np.arctan2(back[1], back[0]) - np.arctan2(fwd[1], fwd[0])) % (2 * np.pi)
            return a if a > 1e-12 else 2 * np.pi

        def on_line(nb):
            return [v for v, st in vplanes.items() if pid in st and nb in st]

        def lines_at(v):
            return [nb for nb in nbs if nb in vplanes.get(v, ())]

        def walk(i):
            c = chains[i]
            cur = c.verts[-1]
            d_in = flat(pos(cur) - pos(c.verts[-2]))
            path = []
            for _ in range(4):
                here = pos(cur)
                opts = []
                for j, cj in enumerate(chains):
                    if cj.verts[0] == cur or np.allclose(pos(cj.verts[0]), here, rtol=0, atol=eps):
                        opts.append((cw(-d_in, flat(pos(cj.verts[1]) - here)), 0, j, None))
                for nb in lines_at(cur):
                    opts.append((cw(-d_in, flat(direction[nb])), 1, None, nb))
                if not opts:
                    break
                _, _, j, nb = min(opts, key=lambda o: o[:2] + ((o[2] if o[2] is not None else -1),))
                if j is not None:
                    if path and path[-1] == chains[j].verts[0]:
                        path.pop()
                    return j, path
                t = direction[nb]
                t0 = float(here @ t)
                events = []  # (tau, kind, payload)
                for j, cj in enumerate(chains):
                    if cj.start_nb == nb or nb in vplanes.get(cj.verts[0], ()):
                        tau = float(pos(cj.verts[0]) @ t)
                        if tau > t0 + eps:
                            events.append((tau, 0, j))
                for k in nbs:
                    if k == nb:
                        continue
                    try:
                        cv = self.corner((pid, nb, k), vplanes)
                    except DegenerateInput:
                        continue
                    tau = float(pos(cv) @ t)
                    if tau > t0 + eps:
                        events.append((tau, 1, cv))
                if not events:
                    break
                tau, kind, payload = min(events)
                inner = sorted((float(pos(v) @ t), v) for v in on_line(nb))
                path += [v for tv, v in inner if t0 + eps < tv < tau - eps and v not in path]
                if kind == 0:
                    return payload, path
                path.append(payload)
                d_in = flat(t)
                cur = payload
            raise _PlaneFailure(f"open junction on plane {pid}", loops)

        links = {i: walk(i) for i in range(len(chains))}
        targets = sorted(j for j, _ in links.values())
        if targets != list(range(len(chains))):
            raise _PlaneFailure(f"ambiguous junctions on plane {pid}", loops)

        rings, used = [], set()
        for i0 in range(len(chains)):
            if i0 in used:
                continue
            ring, i = [], i0
            while i not in used:
                used.add(i)
                ring.extend(chains[i].verts)
                j, path = links[i]
                ring.extend(path)
                if chains[j].verts[0] == ring[-1]:
                    ring.pop()
                i = j
            rings.append(ring)
        return rings


def retrace_rings(rings, V, plane: Plane) -> list[list[int]]:
    """Re-split a plane's hole rings into simple cycles.

    Rings of one plane may touch at vertices (an island that meets the outer
    boundary, two holes sharing a corner).  Their directed edges are pooled,
    opposite pairs cancel, and cycles are traced keeping the region on the
    left: at a shared vertex the outgoing edge with the smallest clockwise
    angle from the reversed incoming edge is taken.
    """
    edges: dict[tuple[int, int], int] = {}
    for vs in rings:
        for a, b in zip(vs, vs[1:] + vs[:1]):
            if a == b:
                continue
            if edges.get((b, a), 0) > 0:
                edges[(b, a)] -= 1
            else:
                edges[(a, b)] = edges.get((a, b), 0) + 1
    out: dict[int, list[int]] = {}
    for (a, b), k in sorted(edges.items()):
        out.setdefault(a, []).extend([b] * k)
    ids = sorted(set(out) | {b for t in out.values() for b in t})
    xy = dict(zip(ids, _to2d(V[ids], plane))) if ids else {}

    def turn(prev, cur, nxt):
        back = xy[prev] - xy[cur]
        fwd = xy[nxt] - xy[cur]
        cw = (np.arctan2(back[1], back[0]) - np.arctan2(fwd[1], fwd[0])) % (2 * np.pi)
        return cw if cw > 1e-12 else 2 * np.pi

    cycles = []
    budget = sum(len(t) for t in out.values())
    while any(out.values()):
        start = min(a for a, t in out.items() if t)
        first = out[start].pop(0)
        cyc, prev, cur = [start], start, first
        for _ in range(budget):
            cands = [(turn(prev, cur, t), 1, t) for t in out.get(cur, [])]
            if cur == start:
                cands.append((turn(prev, cur, first), 0, None))
            if not cands:
                break
            _, _, nxt = min(cands, key=lambda c: (c[0], c[1]))
            if nxt is None:
                break
            cyc.append(cur)
            out[cur].remove(nxt)
            prev, cur = cur, nxt
        if len(cyc) >= 3:
            cycles.append(cyc)
    return cycles


def fill_holes_plane_extension(mesh: TriMesh, loops, decomp: PlanarDecomposition,
                               snap_radius: float = 0.5, strict: bool = False) -> SdmResult:
    """Close boundary ``loops`` with triangles lying in structural planes.

    Loop vertices are assigned to their nearest floor/wall/ceiling plane
    (junction vertices to every plane they lie on).  A loop on one plane is
    projected onto it and ear-clipped.  A loop spanning several planes is cut
    into per-plane chains that are closed along the planes' intersection
    lines, and each part is filled in its own plane.  Loops that cannot be
    handled are left open and reported in ``result.unsupported`` (raised when
    ``strict``).
    """
    planes = decomp.planes
    filler = _Filler(mesh, planes, decomp.structural_ids(), snap_radius)
    plans: dict[int, _Plan] = {}
    unsupported = []

    def give_up(exc):
        if strict:
            raise exc
        log.warning("hole left open: %s", exc)
        unsupported.append(exc)

    for li, loop in enumerate(loops):
        try:
            plans[li] = filler.plan(li, loop)
        except UnsupportedLoop as exc:
            give_up(exc)

    # put every loop vertex exactly on its plane(s)
    for pl in plans.values():
        for v, s in pl.vplanes.items():
            filler.verts[v] = project_to_planes(filler.verts[v], [planes[p] for p in sorted(s)])

    while True:
        try:
            new_faces, new_planes = _fill_active(filler, plans, planes)
            break
        except _PlaneFailure as exc:
            for li in sorted(exc.loops):
                plans.pop(li, None)
                give_up(UnsupportedLoop(str(exc), loops[li]))

    V = np.array(filler.verts) if filler.verts else np.zeros((0, 3))
    nf0 = mesh.n_faces
    faces = np.concatenate([mesh.faces, np.asarray(new_faces, dtype=np.int64).reshape(-1, 3)])
    labels = mesh.labels_or_unknown()
    labels = np.concatenate([labels, np.full(len(new_faces), STRUCTURE, dtype=np.uint8)])
    fplane = mesh.face_plane if mesh.face_plane is not None else np.full(nf0, NO_PLANE)
    fplane = np.concatenate([fplane, np.asarray(new_planes, dtype=np.int64)])
    out = TriMesh(V, faces, face_labels=labels, face_plane=fplane)
    filled = set(range(nf0, nf0 + len(new_faces)))
    return SdmResult(
        mesh=out,
        filled_faces=filled,
        # bridge slivers (NO_PLANE) are filled faces without a supporting plane
        plane_of_filled={nf0 + k: int(p) for k, p in enumerate(new_planes) if p != NO_PLANE},
        planes=planes,
        unsupported=unsupported,
        boundary_edge_count=len(boundary_edges(out)),
    )


def _fill_active(filler: _Filler, plans: dict, planes: list[Plane]):
    per_plane: dict[int, dict] = {}
    for li, pl in plans.items():
        for pid, ring in pl.rings:
            per_plane.setdefault(pid, {"rings": [], "chains": [], "loops": set()})
            per_plane[pid]["rings"].append(ring)
            per_plane[pid]["loops"].add(li)
        for c in pl.chains:
            per_plane.setdefault(c.plane, {"rings": [], "chains": [], "loops": set()})
            per_plane[c.plane]["chains"].append(c)
            per_plane[c.plane]["loops"].add(li)
    vplanes: dict[int, set] = {}
    for pl in plans.values():
        for v, s in pl.vplanes.items():
            vplanes.setdefault(v, set()).update(s)

    new_faces, new_planes = [], []
    for pid in sorted(per_plane):
        group = per_plane[pid]
        rings = group["rings"] + filler.close_chains(pid, group["chains"], vplanes)
        V = np.array(filler.verts)  # corners may have been added
        tris = _triangulate_plane(rings, V, planes[pid])
        if tris is None:
            raise _PlaneFailure(f"could not triangulate the hole on plane {pid}", group["loops"])
        new_faces += tris
        new_planes += [pid] * len(tris)
    for pl in plans.values():
        for tri in pl.bridges:
            new_faces.append(tri)
            new_planes.append(NO_PLANE)
    return new_faces, new_planes


def _triangulate_plane(rings, V, plane: Plane):
    """Ear-clip a plane's rings; None when the result does not tile their area."""
    outers, inners = [], []
    net = 0.0
    for vs in retrace_rings(rings, V, plane):
        pts2 = _to2d(V[vs], plane)
        a = signed_area(pts2)
        net += a
        (outers if a >= 0 else inners).append((vs, pts2))
    holes_of = {i: [] for i in range(len(outers))}
    for vs, pts2 in inners:
        host = [i for i, (_, op) in enumerate(outers) if point_in_polygon(pts2.mean(0), op)]
        if not host:
            return None
        best = min(host, key=lambda i: abs(signed_area(outers[i][1])))
        holes_of[best].append((vs, pts2))
    faces = []
    covered = 0.0
    for i, (vs, pts2) in enumerate(outers):
        hl = holes_of[i]
        ids_all = list(vs) + [v for h, _ in hl for v in h]
        pts_all = np.concatenate([pts2] + [p for _, p in hl])
        for a, b, c in triangulate_polygon(pts2, [p for _, p in hl]):
            ar = signed_area(pts_all[[a, b, c]])
            if ar < -1e-12:
                return None
            covered += ar
            faces.append((ids_all[a], ids_all[b], ids_all[c]))
    if abs(covered - net) > 1e-9 * max(1.0, abs(net)):
        return None
    return faces
