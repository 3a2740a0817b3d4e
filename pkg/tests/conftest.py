import numpy as np
import pytest

from sdm_pipeline.synth import desk_suite, generate_dataset


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def brute_point_mesh(p, mesh):
    """Per triangle: plane distance if the foot point is inside, else nearest edge."""
    tri = mesh.triangles()
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    h = np.einsum("ij,ij->i", p - a, n)
    q = p - h[:, None] * n

    def area(x, y, z):
        return np.einsum("ij,ij->i", np.cross(y - x, z - x), n)

    inside = (area(q, b, c) >= 0) & (area(a, q, c) >= 0) & (area(a, b, q) >= 0)
    P = np.broadcast_to(p, a.shape)
    edge = np.minimum(np.minimum(_seg_dist(P, a, b), _seg_dist(P, b, c)), _seg_dist(P, c, a))
    return float(np.where(inside, np.abs(h), edge).min())


def ray_box_exit(origin, dirs, lo, hi):
    """Distance along unit ``dirs`` from an interior ``origin`` to the box wall."""
    with np.errstate(divide="ignore"):
        t_hi = (hi - origin) / dirs
        t_lo = (lo - origin) / dirs
    t = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    return t.min(axis=-1)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    generate_dataset(desk_suite(0), root, workers=3)
    return root


@pytest.fixture(scope="session")
def desk_runs(desk_dataset, tmp_path_factory):
    """Baseline pipeline output for every desk scene, with a 4-worker pool."""
    from sdm_pipeline.pipeline import run_pipeline
    from sdm_pipeline.synth import scene_dirs

    root = tmp_path_factory.mktemp("desk_runs")
    for d in scene_dirs(desk_dataset):
        run_pipeline(d / "furnished" / "poses.json", root / d.name, workers=4)
    return root
