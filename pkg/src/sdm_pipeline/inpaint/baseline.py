"""Edge-aware harmonic fill used as a deterministic local inpainter."""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu


def grid_edges(H: int, W: int, wrap: bool = True) -> np.ndarray:
    """4-neighbor pixel pairs (flat indices); columns periodic when ``wrap``."""
    idx = np.arange(H * W).reshape(H, W)
    right = idx[:, :-1], idx[:, 1:]
    pairs = [np.stack([right[0].ravel(), right[1].ravel()], 1)]
    if wrap and W > 2:
        pairs.append(np.stack([idx[:, -1], idx[:, 0]], 1))
    pairs.append(np.stack([idx[:-1].ravel(), idx[1:].ravel()], 1))
    return np.concatenate(pairs)


def solve_dirichlet(values: np.ndarray, unknown: np.ndarray, edges: np.ndarray, fallback) -> np.ndarray:
    """Harmonic values on ``unknown`` pixels given the rest as boundary data.

    ``values`` is (N, C) flat; ``edges`` the allowed links.  Unknown
    components with no link to a known pixel get ``fallback`` (per channel).
    """
    out = values.astype(np.float64, copy=True)
    uid = np.flatnonzero(unknown)
    if len(uid) == 0:
        return out
    pos = np.full(len(unknown), -1, dtype=np.int64)
    pos[uid] = np.arange(len(uid))
    a, b = edges[:, 0], edges[:, 1]
    ua, ub = unknown[a], unknown[b]
    n = len(uid)

    both = ua & ub
    ia, ib = pos[a[both]], pos[b[both]]
    _, comp = connected_components(
        coo_matrix((np.ones(len(ia)), (ia, ib)), shape=(n, n)), directed=False)
    # unknown endpoint of each unknown-known link
    mixed_u = np.concatenate([pos[a[ua & ~ub]], pos[b[ub & ~ua]]])
    mixed_k = np.concatenate([b[ua & ~ub], a[ub & ~ua]])
    anchored = np.zeros(comp.max() + 1, dtype=bool)
    anchored[comp[mixed_u]] = True
    free = ~anchored[comp]
    if free.any():
        out[uid[free]] = np.asarray(fallback, dtype=np.float64)
    solve = ~free
    if not solve.any():
        return out

    # reindex to the anchored unknowns only
    sid = np.full(n, -1, dtype=np.int64)
    sid[solve] = np.arange(int(solve.sum()))
    m = int(solve.sum())
    keep = solve[ia] & solve[ib]
    ia, ib = sid[ia[keep]], sid[ib[keep]]
    keep_m = solve[mixed_u]
    mu, mk = sid[mixed_u[keep_m]], mixed_k[keep_m]
    deg = np.bincount(np.concatenate([ia, ib, mu]), minlength=m).astype(np.float64)
    rows = np.concatenate([np.arange(m), ia, ib])
    cols = np.concatenate([np.arange(m), ib, ia])
    data = np.concatenate([deg, -np.ones(len(ia)), -np.ones(len(ib))])
    L = coo_matrix((data, (rows, cols)), shape=(m, m)).tocsc()
    rhs = np.zeros((m, values.shape[1]))
    np.add.at(rhs, mu, values[mk])
    lu = splu(L)
    x = lu.solve(rhs)
    out[uid[solve]] = x
    return out


def harmonic_fill(image, mask, barrier=None, wrap: bool = True) -> np.ndarray:
    """Float harmonic fill of ``mask`` pixels (any number of channels).

    Barrier pixels (inside the mask) block diffusion: regular masked pixels do
    not link to them, so each side of an edge is filled from its own border.
    Barrier pixels are solved afterwards from all their neighbors.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    H, W, C = img.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (H, W):
        raise ValueError("mask shape does not match image")
    bar = np.zeros((H, W), dtype=bool) if barrier is None else (np.asarray(barrier, dtype=bool) & mask)
    vals = img.reshape(-1, C)
    if not mask.any():
        return img[..., 0].copy() if squeeze else img.copy()
    known = ~mask.ravel()
    fallback = vals[known].mean(0) if known.any() else np.zeros(C)
    edges = grid_edges(H, W, wrap)
    b = bar.ravel()
    open_edges = edges[~(b[edges[:, 0]] | b[edges[:, 1]])]
    out = solve_dirichlet(vals, mask.ravel() & ~b, open_edges, fallback)
    if b.any():
        out = solve_dirichlet(out, b, edges, fallback)
    out = out.reshape(H, W, C)
    return out[..., 0] if squeeze else out


def laplace_residual(filled, mask, barrier=None, wrap: bool = True) -> float:
    """Max |Laplacian| over non-barrier masked pixels on the allowed links."""
    f = np.asarray(filled, dtype=np.float64)
    if f.ndim == 2:
        f = f[..., None]
    H, W, C = f.shape
    bar = np.zeros((H, W), dtype=bool) if barrier is None else np.asarray(barrier, bool) & mask
    edges = grid_edges(H, W, wrap)
    b = bar.ravel()
    edges = edges[~(b[edges[:, 0]] | b[edges[:, 1]])]
    v = f.reshape(-1, C)
    lap = np.zeros_like(v)
    d = v[edges[:, 1]] - v[edges[:, 0]]
    np.add.at(lap, edges[:, 0], d)
    np.add.at(lap, edges[:, 1], -d)
    sel = (np.asarray(mask, bool) & ~bar).ravel()
    return float(np.abs(lap[sel]).max()) if sel.any() else 0.0


def baseline_inpaint(image, mask, control=None, use_control: bool = True, wrap: bool = True) -> np.ndarray:
    """Fill masked pixels of an RGB uint8 pano; control edges act as barriers."""
    img = np.asarray(image)
    barrier = None
    if control is not None and use_control:
        barrier = np.asarray(getattr(control, "edges", control)) > 0
    filled = harmonic_fill(img.astype(np.float64), mask, barrier, wrap)
    out = np.clip(np.rint(filled), 0, 255).astype(np.uint8)
    keep = ~np.asarray(mask, dtype=bool)
    out[keep] = img[keep]
    return out
