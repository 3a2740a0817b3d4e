import math

import numpy as np
import pytest

from sdm_pipeline.errors import EmptyMask, MismatchedInput
from sdm_pipeline.mesh import box_room, grid_quad
from sdm_pipeline.metrics import (MetricReport, cloud_to_mesh_rmse, image_metrics, psnr_from_mse, sample_surface,
                                  ssim)


def loop_ssim_mean(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Windowed SSIM by explicit loops, mirrored borders, mean over pixels."""
    h, w = a.shape
    r = size // 2
    g = [math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-r, r + 1)]
    win = np.outer(g, g)
    win /= win.sum()

    def mirror(i, n):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - i - 1
        return i

    c1, c2 = k1 ** 2, k2 ** 2
    total = 0.0
    for y in range(h):
        for x in range(w):
            ma = mb = saa = sbb = sab = 0.0
            for i in range(-r, r + 1):
                for j in range(-r, r + 1):
                    wt = win[i + r, j + r]
                    pa = a[mirror(y + i, h), mirror(x + j, w)]
                    pb = b[mirror(y + i, h), mirror(x + j, w)]
                    ma += wt * pa
                    mb += wt * pb
                    saa += wt * pa * pa
                    sbb += wt * pb * pb
                    sab += wt * pa * pb
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return total / (h * w)


def test_identity():
    img = np.random.default_rng(0).integers(0, 256, (20, 30, 3), dtype=np.uint8)
    rep = image_metrics(img, img, np.ones((20, 30), bool))
    assert rep["mse"] == 0.0 and rep["psnr_db"] == math.inf and abs(rep["ssim"] - 1.0) < 1e-12
    assert rep["mse_masked"] == 0.0 and rep["psnr_masked_db"] == math.inf


def test_psnr_of_known_mse():
    t = np.full((16, 16), 0.3)
    rep = image_metrics(t + 0.1, t)
    assert abs(rep["mse"] - 0.01) < 1e-15
    assert abs(rep["psnr_db"] - 20.0) < 1e-9
    assert abs(psnr_from_mse(1e-4) - 40.0) < 1e-9


def test_uint8_scaling():
    a = np.zeros((4, 4), np.uint8)
    b = np.full((4, 4), 255, np.uint8)
    assert image_metrics(a, b)["mse"] == 1.0


@pytest.mark.parametrize("seed", [0, 1])
def test_ssim_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (18, 23))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ssim(a, b) - loop_ssim_mean(a, b)) < 1e-6


def test_masked_all_true_equals_unmasked():
    rng = np.random.default_rng(2)
    p = rng.integers(0, 256, (24, 48, 3), dtype=np.uint8)
    t = rng.integers(0, 256, (24, 48, 3), dtype=np.uint8)
    rep = image_metrics(p, t, np.ones((24, 48), bool))
    assert rep["mse_masked"] == rep["mse"]
    assert rep["psnr_masked_db"] == rep["psnr_db"]
    assert abs(rep["ssim_masked"] - rep["ssim"]) < 1e-15
    assert rep.counts["masked_pixels"] == 24 * 48


def test_masked_region_only():
    t = np.zeros((10, 10))
    p = t.copy()
    p[:5] = 0.5
    mask = np.zeros((10, 10), bool)
    mask[5:] = True
    rep = image_metrics(p, t, mask)
    assert rep["mse_masked"] == 0.0 and rep["mse"] == 0.125


def test_metric_errors():
    with pytest.raises(MismatchedInput):
        image_metrics(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(MismatchedInput):
        image_metrics(np.zeros((4, 4)), np.zeros((4, 4)), np.ones((3, 4), bool))
    with pytest.raises(EmptyMask):
        image_metrics(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), bool))


def test_report_json_round_trip():
    rep = image_metrics(np.zeros((8, 8)), np.zeros((8, 8)))
    back = MetricReport.from_dict(__import__("json").loads(rep.to_json()))
    assert back.values == rep.values and back.counts == rep.counts


def test_sample_surface_is_on_mesh_and_deterministic():
    room = box_room((4.0, 4.0, 3.0))
    pts = sample_surface(room, 2000, seed=3)
    assert np.array_equal(pts, sample_surface(room, 2000, seed=3))
    lo, hi = pts.min(0), pts.max(0)
    assert np.all(lo >= -1e-12) and np.all(hi <= np.array([4, 4, 3]) + 1e-12)
    on_face = np.isclose(pts, 0, atol=1e-12) | np.isclose(pts, [4, 4, 3], atol=1e-12)
    assert np.all(on_face.any(axis=1))


def test_rmse_zero_for_same_mesh():
    room = box_room((4.0, 4.0, 3.0), cell=1.0)
    assert cloud_to_mesh_rmse(room, room, 5000) < 1e-12


def test_rmse_of_offset_plane():
    ref = grid_quad((0, 0, 0), (1, 0, 0), (0, 1, 0), 4, 4)
    cand = grid_quad((0, 0, 0.05), (1, 0, 0), (0, 1, 0), 3, 5)
    assert abs(cloud_to_mesh_rmse(cand, ref, 5000) - 0.05) < 1e-12
    assert abs(cloud_to_mesh_rmse(cand, ref, 5000, symmetric=True) - 0.05) < 1e-12


def test_rmse_converges_on_tilted_quad():
    # z = a x over the unit square: distance to z = 0 is a x, RMS a / sqrt(3)
    a = 0.2
    ref = grid_quad((0, 0, 0), (1, 0, 0), (0, 1, 0), 2, 2)
    cand = grid_quad((0, 0, 0), (1, 0, a), (0, 1, 0), 2, 2)
    exact = a / math.sqrt(3)
    errs = [abs(cloud_to_mesh_rmse(cand, ref, n, seed=1) - exact) for n in (1000, 100_000)]
    assert errs[1] < 2e-3 * exact
    assert errs[1] <= errs[0] + 1e-4


def test_rmse_rejects_empty():
    from sdm_pipeline.mesh import TriMesh
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        cloud_to_mesh_rmse(empty, box_room())
