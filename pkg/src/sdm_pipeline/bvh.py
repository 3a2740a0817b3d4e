"""Bounding-volume hierarchy over mesh triangles.

Queries are vectorized over batches: a traversal stack carries, for every
node, the subset of rays (or points) whose current best hit could still be
improved inside that node's box.  Each node is therefore visited at most once
per batch, which keeps the Python overhead proportional to the tree size
rather than to the number of queries.
"""

from __future__ import annotations

import hashlib

import numpy as np

LEAF_SIZE = 8
# barycentric slack so rays through shared edges cannot slip between faces
_EDGE_EPS = 1e-9


class BVH:
    def __init__(self, triangles: np.ndarray, leaf_size: int = LEAF_SIZE):
        tri = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        self.triangles = tri
        self.n = len(tri)
        self.leaf_size = leaf_size
        self._build()

    @classmethod
    def from_mesh(cls, mesh) -> "BVH":
        return cls(mesh.triangles())

    def _build(self):
        n = self.n
        self.order = np.arange(n)
        lo, hi, left, right, start, count = [], [], [], [], [], []
        if n == 0:
            self.lo = np.zeros((0, 3))
            self.hi = np.zeros((0, 3))
            self.left = self.right = self.start = self.count = np.zeros(0, dtype=np.int64)
            return
        tmin = self.triangles.min(axis=1)
        tmax = self.triangles.max(axis=1)
        cent = 0.5 * (tmin + tmax)
        order = self.order

        def new_node(s, e):
            idx = order[s:e]
            lo.append(tmin[idx].min(0))
            hi.append(tmax[idx].max(0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            return len(lo) - 1

        stack = [(new_node(0, n), 0, n)]
        while stack:
            node, s, e = stack.pop()
            if e - s <= self.leaf_size:
                continue
            idx = order[s:e]
            c = cent[idx]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            mid = (e - s) // 2
            # stable ordering keeps the build deterministic
            part = np.argsort(c[:, axis], kind="stable")
            order[s:e] = idx[part]
            m = s + mid
            l_node = new_node(s, m)
            r_node = new_node(m, e)
            left[node] = l_node
            right[node] = r_node
            count[node] = 0
            stack.append((r_node, m, e))
            stack.append((l_node, s, m))
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.left = np.array(left)
        self.right = np.array(right)
        self.start = np.array(start)
        self.count = np.array(count)

    # ------------------------------------------------------------------ rays

    def intersect(self, origins, directions, t_max=np.inf):
        """Nearest hit per ray.

        Returns (t, face): t is +inf and face -1 where nothing is hit.
        ``directions`` need not be unit length; t is in units of |direction|.
        """
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if len(o) == 1 and len(d) > 1:
            o = np.broadcast_to(o, d.shape)
        nr = len(d)
        best_t = np.full(nr, np.inf)
        if np.ndim(t_max):
            best_t = np.minimum(best_t, np.asarray(t_max, dtype=np.float64))
        elif np.isfinite(t_max):
            best_t[:] = t_max
        best_f = np.full(nr, -1, dtype=np.int64)
        if self.n == 0 or nr == 0:
            return np.full(nr, np.inf), best_f
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
        stack = [(0, np.arange(nr))]
        while stack:
            node, rays = stack.pop()
            t0 = (self.lo[node] - o[rays]) * inv[rays]
            t1 = (self.hi[node] - o[rays]) * inv[rays]
            # 0 * inf -> nan for rays parallel to a slab through its plane
            tn = np.nanmax(np.minimum(t0, t1), axis=1)
            tf = np.nanmin(np.maximum(t0, t1), axis=1)
            ok = (tn <= tf * (1 + 1e-12) + 1e-12) & (tf >= 0) & (tn <= best_t[rays])
            rays = rays[ok]
            if len(rays) == 0:
                continue
            if self.left[node] < 0:
                s, c = self.start[node], self.count[node]
                self._leaf_rays(self.order[s:s + c], rays, o, d, best_t, best_f)
            else:
                stack.append((self.right[node], rays))
                stack.append((self.left[node], rays))
        best_t[best_f < 0] = np.inf
        return best_t, best_f

    def _leaf_rays(self, tris, rays, o, d, best_t, best_f):
        T = self.triangles[tris]  # (k,3,3)
        v0 = T[:, 0]
        e1 = T[:, 1] - v0
        e2 = T[:, 2] - v0
        D = d[rays][:, None, :]  # (r,1,3)
        O = o[rays][:, None, :]
        p = np.cross(D, e2[None])  # (r,k,3)
        det = np.einsum("rkj,kj->rk", p, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = O - v0[None]
            u = np.einsum("rkj,rkj->rk", s, p) * inv
            q = np.cross(s, e1[None])
            v = np.einsum("rkj,rkj->rk", q, np.broadcast_to(D, q.shape)) * inv
            t = np.einsum("rkj,kj->rk", q, e2) * inv
        valid = (
            (np.abs(det) > 1e-300)
            & (u >= -_EDGE_EPS) & (v >= -_EDGE_EPS) & (u + v <= 1 + _EDGE_EPS)
            & (t > 1e-12)
        )
        t = np.where(valid, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(len(rays)), k]
        better = tk < best_t[rays]
        r = rays[better]
        best_t[r] = tk[better]
        best_f[r] = tris[k[better]]

    # ---------------------------------------------------------------- points

    def closest(self, points, initial_upper=None):
        """Closest surface point per query.

        Returns (distance, face, closest_point).
        """
        P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        npnt = len(P)
        best_d2 = np.full(npnt, np.inf)
        best_f = np.full(npnt, -1, dtype=np.int64)
        best_q = np.full((npnt, 3), np.nan)
        if self.n == 0 or npnt == 0:
            return np.sqrt(best_d2), best_f, best_q
        if initial_upper is not None:
            # seed with a known face per point (e.g. nearest centroid) to prune early
            f0 = np.asarray(initial_upper, dtype=np.int64)
            q0 = closest_point_on_triangles(P, self.triangles[f0])
            best_d2 = np.einsum("ij,ij->i", P - q0, P - q0)
            best_f = f0.copy()
            best_q = q0
        stack = [(0, np.arange(npnt))]
        while stack:
            node, pts = stack.pop()
            gap = np.maximum(self.lo[node] - P[pts], 0) + np.maximum(P[pts] - self.hi[node], 0)
            d2 = np.einsum("ij,ij->i", gap, gap)
            pts = pts[d2 <= best_d2[pts]]
            if len(pts) == 0:
                continue
            if self.left[node] < 0:
                s, c = self.start[node], self.count[node]
                tris = self.order[s:s + c]
                for ti in tris:
                    q = closest_point_on_triangles(P[pts], np.broadcast_to(self.triangles[ti], (len(pts), 3, 3)))
                    dd = np.einsum("ij,ij->i", P[pts] - q, P[pts] - q)
                    better = dd < best_d2[pts]
                    sel = pts[better]
                    best_d2[sel] = dd[better]
                    best_f[sel] = ti
                    best_q[sel] = q[better]
            else:
                stack.append((self.right[node], pts))
                stack.append((self.left[node], pts))
        return np.sqrt(best_d2), best_f, best_q


def closest_point_on_triangles(p, tri):
    """Closest point on triangle tri[i] to point p[i] (Voronoi-region method)."""
    p = np.asarray(p, dtype=np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a

    def dot(x, y):
        return np.einsum("ij,ij->i", x, y)

    d1 = dot(ab, ap)
    d2 = dot(ac, ap)
    bp = p - b
    d3 = dot(ab, bp)
    d4 = dot(ac, bp)
    cp = p - c
    d5 = dot(ab, cp)
    d6 = dot(ac, cp)

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        m = mask & ~done
        out[m] = value[m]
        done[m] = True

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    put((d6 >= 0) & (d5 <= d6), c)
    with np.errstate(divide="ignore", invalid="ignore"):
        vc = d1 * d4 - d3 * d2
        v_ab = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)
        vb = d5 * d2 - d1 * d6
        w_ac = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)
        va = d3 * d6 - d5 * d4
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + w_bc[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def point_to_mesh_distance(points, mesh, bvh: BVH | None = None) -> np.ndarray | float:
    """Unsigned distance from point(s) to the nearest triangle of ``mesh``."""
    from scipy.spatial import cKDTree

    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces")
    bvh = bvh or mesh_bvh(mesh)
    P = np.asarray(points, dtype=np.float64)
    single = P.ndim == 1
    P = P.reshape(-1, 3)
    seed = None
    if len(P) > 64:
        tree = cKDTree(mesh.face_centroids())
        _, seed = tree.query(P)
    dist, _, _ = bvh.closest(P, initial_upper=seed)
    return float(dist[0]) if single else dist


def mesh_bvh(mesh) -> BVH:
    """BVH cached on the mesh instance (meshes are treated as immutable)."""
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    key = h.hexdigest()
    cached = mesh.meta.get("_bvh")
    if cached is not None and cached[0] == key:
        return cached[1]
    b = BVH.from_mesh(mesh)
    mesh.meta["_bvh"] = (key, b)
    return b
