"""Ear-clipping triangulation of planar polygons, with hole bridging."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


def signed_area(pts) -> float:
    p = np.asarray(pts, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def point_in_polygon(pt, poly) -> bool:
    x, y = pt
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if xi > x:
                inside = not inside
    return inside


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _segments_cross(p1, p2, q1, q2, eps) -> bool:
    """Proper intersection (shared endpoints do not count)."""
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    return ((d1 > eps and d2 < -eps) or (d1 < -eps and d2 > eps)) and (
        (d3 > eps and d4 < -eps) or (d3 < -eps and d4 > eps)
    )


def triangulate_polygon(outer, holes=()) -> list[tuple[int, int, int]]:
    """Triangulate a simple polygon (optionally with holes).

    ``outer`` is an (n, 2) array; each hole an (m, 2) array.  Returned index
    triples refer to the concatenation [outer, hole_0, hole_1, ...] and follow
    the winding of ``outer``.  Holes should wind opposite to ``outer`` (they
    are reversed if not).
    """
    outer = np.asarray(outer, dtype=np.float64)
    mirror = signed_area(outer) < 0
    pts = [outer]
    for h in holes:
        pts.append(np.asarray(h, dtype=np.float64))
    allp = np.concatenate(pts) if pts else outer
    if mirror:
        allp = allp * np.array([1.0, -1.0])
    scale = float(np.ptp(allp, axis=0).max()) if len(allp) else 1.0
    eps = 1e-12 * max(scale, 1e-12) ** 2

    ring = list(range(len(outer)))
    offset = len(outer)
    hole_rings = []
    for h in holes:
        idx = list(range(offset, offset + len(h)))
        offset += len(h)
        if signed_area(allp[idx]) > 0:
            idx = idx[::-1]
        hole_rings.append(idx)
    # bridge holes with the rightmost vertex first
    hole_rings.sort(key=lambda r: -max(allp[i][0] for i in r))
    for hr in hole_rings:
        ring = _bridge(ring, hr, allp, hole_rings, eps)

    tris = _earclip(ring, allp, eps)
    return tris


def _bridge(ring, hole, P, all_holes, eps):
    # a hole touching the ring at a vertex is spliced in there, no new edge needed
    for i, v in enumerate(ring):
        for k, h in enumerate(hole):
            if np.array_equal(P[v], P[h]):
                return ring[: i + 1] + hole[k + 1:] + hole[: k + 1] + ring[i + 1:]
    k = max(range(len(hole)), key=lambda j: (P[hole[j]][0], -hole[j]))
    h = hole[k]
    hp = P[h]
    edges = [(ring[i], ring[(i + 1) % len(ring)]) for i in range(len(ring))]
    for other in all_holes:
        edges += [(other[i], other[(i + 1) % len(other)]) for i in range(len(other))]
    order = sorted(range(len(ring)), key=lambda i: (float(np.sum((P[ring[i]] - hp) ** 2)), ring[i]))
    for i in order:
        v = ring[i]
        vp = P[v]
        if np.allclose(vp, hp):
            continue
        if any(
            _segments_cross(hp, vp, P[a], P[b], eps)
            for a, b in edges
            if a not in (v, h) and b not in (v, h)
        ):
            continue
        hole_seq = hole[k:] + hole[:k]
        return ring[: i + 1] + hole_seq + [h] + ring[i:]
    log.warning("could not bridge polygon hole; hole ignored")
    return ring


def _earclip(ring, P, eps):
    ring = list(ring)
    tris = []

    def is_ear(i):
        n = len(ring)
        a, b, c = ring[(i - 1) % n], ring[i], ring[(i + 1) % n]
        pa, pb, pc = P[a], P[b], P[c]
        if _cross(pa, pb, pc) <= eps:
            return False
        for j in range(n):
            w = ring[j]
            if w in (a, b, c):
                continue
            pw = P[w]
            if (np.array_equal(pw, pa) or np.array_equal(pw, pb) or np.array_equal(pw, pc)):
                continue
            # closed containment test: points on the ear boundary also block it
            if (_cross(pa, pb, pw) >= -eps and _cross(pb, pc, pw) >= -eps
                    and _cross(pc, pa, pw) >= -eps):
                return False
        return True

    while len(ring) > 3:
        # lowest vertex index first keeps the result deterministic
        order = sorted(range(len(ring)), key=lambda i: ring[i])
        ear = next((i for i in order if is_ear(i)), None)
        if ear is None:
            # numerical trouble: clip the most convex corner
            n = len(ring)
            conv = [_cross(P[ring[(i - 1) % n]], P[ring[i]], P[ring[(i + 1) % n]]) for i in range(n)]
            ear = int(np.argmax(conv))
            if conv[ear] <= eps:
                log.warning("ear clipping stopped with %d collinear vertices left", n)
                return tris
        n = len(ring)
        tris.append((ring[(ear - 1) % n], ring[ear], ring[(ear + 1) % n]))
        ring.pop(ear)
    if len(ring) == 3 and _cross(P[ring[0]], P[ring[1]], P[ring[2]]) > eps:
        tris.append(tuple(ring))
    return tris
