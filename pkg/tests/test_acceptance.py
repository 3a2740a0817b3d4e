"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import hashlib
import math
import time

import numpy as np
import pytest
from mock_service import CANNED_COLOR, MockServer
from test_inpaint import disc, request_arrays
from test_losses import brute_conv, brute_fftmax, brute_rdft_mag, spectrum_ordered_pair
from test_metrics import loop_ssim_mean
from test_sdm import ROOM, fill_with, filled_vertex_plane_error, labels_where

from conftest import ray_box_exit
from sdm_pipeline.config import Config
from sdm_pipeline.control import MaskSpec, generate_composite_mask
from sdm_pipeline.errors import BackendError, BackendUnavailable, MismatchedInput
from sdm_pipeline.imageio import read_mask, read_rgb
from sdm_pipeline.inpaint import ServiceClient, baseline_inpaint
from sdm_pipeline.losses import (contrast_loss, fftmax_loss, grad_check, log_kernel, magnitude_spectrum)
from sdm_pipeline.manifest import load_manifest
from sdm_pipeline.mesh import (FURNITURE, STRUCTURE, box_room, box_solid, boundary_edges, concatenate, weld)
from sdm_pipeline.meshio import load_mesh
from sdm_pipeline.metrics import cloud_to_mesh_rmse, image_metrics, psnr_from_mse, ssim
from sdm_pipeline.panorama import EquirectCamera, Pose, camera_directions, pixel_to_ray, point_to_pixel, render_geometry
from sdm_pipeline.pipeline import build_scene_sdm, run_pipeline
from sdm_pipeline.sdm import SdmConfig, build_sdm
from sdm_pipeline.synth import desk_suite, generate_dataset, score_run, scene_dirs


@pytest.fixture
def gate(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


def tree_digest(root, skip=("run.json",)):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def test_criterion_1_geometric_accuracy(desk_dataset, gate):
    rows, ok = [], True
    for sd in scene_dirs(desk_dataset):
        t0 = time.perf_counter()
        res = build_scene_sdm(load_manifest(sd / "furnished" / "poses.json"), Config())
        dt = time.perf_counter() - t0
        rmse = cloud_to_mesh_rmse(res.mesh, load_mesh(sd / "empty" / "mesh.ply"), 100_000)
        ok &= rmse <= 0.03 and dt < 60.0
        rows.append(f"{sd.name} rmse={100 * rmse:.3f}cm t={dt:.1f}s")
    gate(1, ok, "; ".join(rows) + " (limits 3 cm, 60 s)")


def _hole_fixtures():
    """(name, SdmResult-like, closed room?) for every hole-filling fixture."""
    out = []

    def floor_square(c):
        return (c[:, 2] < 1e-9) & (np.abs(c[:, 0] - 2) < 0.5) & (np.abs(c[:, 1] - 2) < 0.5)

    def l_corner(c):
        floor = (c[:, 2] < 1e-9) & (c[:, 1] < 0.5) & (c[:, 0] > 1) & (c[:, 0] < 3)
        wall = (c[:, 1] < 1e-9) & (c[:, 2] < 0.5) & (c[:, 0] > 1) & (c[:, 0] < 2)
        return floor | wall

    def three_corner(c):
        return (c[:, 0] < 0.5 + 1e-9) & (c[:, 1] < 0.5 + 1e-9) & (c[:, 2] < 0.5 + 1e-9)

    for name, pred in (("floor square", floor_square), ("two-plane corner", l_corner),
                       ("three-plane corner", three_corner)):
        out.append((name, fill_with(ROOM, labels_where(ROOM, pred))[0]))
    c = ROOM.face_centroids()
    near = (c[:, 2] < 1.0) & ((c[:, 0] < 1.0) | (c[:, 1] < 1.0))
    for seed in range(20):
        rng = np.random.default_rng(seed)
        lab = np.full(ROOM.n_faces, STRUCTURE, dtype=np.uint8)
        lab[(c[:, 2] < 1e-9) & (rng.random(ROOM.n_faces) < 0.3)] = FURNITURE
        out.append((f"floor holes {seed}", fill_with(ROOM, lab)[0]))
        lab = np.full(ROOM.n_faces, STRUCTURE, dtype=np.uint8)
        lab[near & (rng.random(ROOM.n_faces) < 0.4)] = FURNITURE
        out.append((f"corner holes {seed}", fill_with(ROOM, lab)[0]))
    table = box_solid([2.0, 2.0, 0.0], [1.0, 1.0, 0.7], bottom=False)
    room, _ = ROOM.select_faces(~((c[:, 2] < 1e-9) & (np.abs(c[:, 0] - 2) < 0.5) & (np.abs(c[:, 1] - 2) < 0.5)))
    m = weld(concatenate([room, table]))
    out.append(("welded table", build_sdm(m, np.r_[np.zeros(room.n_faces), np.ones(table.n_faces)],
                                          SdmConfig(min_region_faces=1))))
    box = box_solid([2, 2, 1.0], [0.5, 0.5, 0.5])
    out.append(("floating box", build_sdm(concatenate([ROOM, box]),
                                          np.r_[np.zeros(ROOM.n_faces), np.ones(box.n_faces)],
                                          SdmConfig(min_region_faces=1))))
    return out


def test_criterion_2_planarity_and_watertightness(desk_dataset, gate):
    fixtures = _hole_fixtures()
    for sd in scene_dirs(desk_dataset):
        fixtures.append((f"desk {sd.name}", build_scene_sdm(load_manifest(sd / "furnished" / "poses.json"),
                                                            Config())))
    worst, open_edges, n_filled, n_bridge = 0.0, {}, 0, 0
    for name, res in fixtures:
        n_filled += len(res.filled_faces)
        worst = max(worst, filled_vertex_plane_error(res))
        # filled faces without a single plane must still have every vertex on some plane
        for f in res.filled_faces - set(res.plane_of_filled):
            n_bridge += 1
            for v in res.mesh.vertices[res.mesh.faces[f]]:
                worst = max(worst, min(float(pl.distance(v[None])[0]) for pl in res.planes))
        b = len(boundary_edges(res.mesh))
        if b:
            open_edges[name] = b
    ok = worst <= 1e-9 and not open_edges and n_filled > 0
    gate(2, ok, f"{len(fixtures)} fixtures, {n_filled} filled faces ({n_bridge} two-plane slivers), max vertex-plane distance {worst:.2e} m, "
                f"open edges {open_edges or 0}")


def test_criterion_3_losses(gate):
    errs = {"conv": 0.0, "fftmax": 0.0}
    rng = np.random.default_rng(0)
    for shape in ((4, 4), (8, 8), (16, 16), (9, 13)):
        p, t = rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)
        k = log_kernel(1.0)
        errs["conv"] = max(errs["conv"], abs(contrast_loss(p, t) - np.mean(np.abs(brute_conv(p, k) - brute_conv(t, k)))))
        eps = 1e-8 * brute_rdft_mag(t).max()
        errs["fftmax"] = max(errs["fftmax"], abs(fftmax_loss(p, t) - brute_fftmax(p, t, eps)))
    grads = []
    for shape in ((8, 8), (7, 6), (5, 8, 3)):
        g = np.random.default_rng(14)
        t = g.uniform(0, 1, shape)
        p = 2.0 * t + 0.05 * g.normal(size=shape)
        # every bin sits well past the one-sided kink
        assert np.all(magnitude_spectrum(p) - magnitude_spectrum(t) > 1e-4)
        grads.append(grad_check(fftmax_loss, p, t, step=1e-5))
        grads.append(grad_check(contrast_loss, rng.uniform(0, 1, shape), t, step=1e-5))
    ordered = np.random.default_rng(11)
    one_sided = 0
    for _ in range(100):
        shape = (int(ordered.integers(3, 17)), int(ordered.integers(3, 17)))
        pred, target = spectrum_ordered_pair(ordered, shape)
        one_sided += np.all(magnitude_spectrum(pred) <= magnitude_spectrum(target)) and fftmax_loss(pred, target) == 0.0
    ok = max(errs.values()) <= 1e-6 and max(grads) <= 1e-4 and one_sided == 100
    gate(3, ok, f"oracle error contrast {errs['conv']:.1e} fftmax {errs['fftmax']:.1e}; "
                f"max gradient rel. error {max(grads):.1e}; one-sided {one_sided}/100")


def test_criterion_4_metrics(gate):
    rng = np.random.default_rng(0)
    worst_psnr = 0.0
    for _ in range(20):
        t = rng.uniform(0, 1, (16, 16, 3))
        p = np.clip(t + rng.normal(0, rng.uniform(0.01, 0.3), t.shape), 0, 1)
        rep = image_metrics(p, t)
        mse = float(np.mean((p - t) ** 2))
        worst_psnr = max(worst_psnr, abs(rep["mse"] - mse), abs(rep["psnr_db"] - 10 * math.log10(1 / mse)),
                         abs(psnr_from_mse(mse) - rep["psnr_db"]))
    worst_ssim = 0.0
    for seed in range(3):
        r = np.random.default_rng(seed)
        a = r.uniform(0, 1, (18, 23))
        b = np.clip(a + r.normal(0, 0.1, a.shape), 0, 1)
        worst_ssim = max(worst_ssim, abs(ssim(a, b) - loop_ssim_mean(a, b)))
    p = rng.integers(0, 256, (24, 48, 3), dtype=np.uint8)
    t = rng.integers(0, 256, (24, 48, 3), dtype=np.uint8)
    rep = image_metrics(p, t, np.ones((24, 48), bool))
    masked_same = (rep["mse_masked"] == rep["mse"] and rep["psnr_masked_db"] == rep["psnr_db"]
                   and abs(rep["ssim_masked"] - rep["ssim"]) < 1e-12)
    ok = worst_psnr <= 1e-9 and worst_ssim <= 1e-6 and masked_same
    gate(4, ok, f"MSE/PSNR identity error {worst_psnr:.1e}; SSIM oracle error {worst_ssim:.1e}; "
                f"all-true mask equals unmasked: {masked_same}")


def test_criterion_5_pipeline_improvement(desk_dataset, desk_runs, gate):
    score = score_run(desk_dataset, desk_runs, n_samples=5000)
    rows, ok = [], True
    for sd in scene_dirs(desk_dataset):
        se = []
        for i in range(4):
            f = read_rgb(sd / "furnished" / f"pano_{i:03d}.png").astype(float) / 255
            e = read_rgb(sd / "empty" / f"pano_{i:03d}.png").astype(float) / 255
            se.append(((f - e) ** 2)[read_mask(sd / "furnished" / f"mask_{i:03d}.png")].ravel())
        passthrough = float(np.concatenate(se).mean())
        ours = score["scenes"][sd.name]["mean"]["mse_masked"]
        ok &= ours < passthrough
        rows.append(f"{sd.name} masked MSE {ours:.4f} vs passthrough {passthrough:.4f}")
    # two-tone junction: the control edge keeps each side's colour
    H, W = 32, 64
    a, b = np.array([220.0, 30, 30]), np.array([20.0, 60, 200])
    img = np.empty((H, W, 3), np.uint8)
    img[:, :32], img[:, 32:] = a, b
    mask = disc(32, 16, 10)
    ctrl = np.zeros((H, W), np.uint8)
    ctrl[:, 32] = 255
    cols = np.arange(W)[None, :].repeat(H, 0)

    def side_error(out):
        # the 1-px edge line itself belongs to neither side
        out = out.astype(float)
        return sum(np.abs(out[mask & side].mean(0) - col).mean()
                   for side, col in ((cols < 32, a), (cols > 32, b)))

    aware = side_error(baseline_inpaint(img, mask, ctrl))
    blind = side_error(baseline_inpaint(img, mask, ctrl, use_control=False))
    ok &= blind > 0 and aware < 0.1 * blind
    rows.append(f"two-tone per-side error aware {aware:.3f} vs blind {blind:.3f}")
    gate(5, ok, "; ".join(rows))


def test_criterion_6_rendering(gate):
    cam, pose = EquirectCamera(256, 128), Pose([2.0, 2.0, 1.5])
    room = box_room((4.0, 4.0, 3.0))
    t0 = time.perf_counter()
    depth, _, _ = render_geometry(room, cam, pose)
    dt = time.perf_counter() - t0
    want = ray_box_exit(pose.position, camera_directions(cam, pose), np.zeros(3), np.array([4.0, 4, 3]))
    depth_err = float(np.abs(depth.data - want).max())
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    rpose = Pose.from_wxyz(rng.uniform(-1, 1, 3), q)
    u = rng.uniform(0, cam.width, 10_000) * (1 - 1e-12)
    v = rng.uniform(0, cam.height - 1, 10_000)
    o, d = pixel_to_ray(cam, rpose, u, v)
    u2, v2, _ = point_to_pixel(cam, rpose, o + d * rng.uniform(0.1, 50, 10_000)[:, None])
    du = np.abs(u2 - u)
    du = np.minimum(du, cam.width - du)
    trip = float(max(du.max(), np.abs(v2 - v).max()))
    ok = depth_err <= 1e-6 and trip <= 1e-6 and dt < 2.0
    gate(6, ok, f"depth error {depth_err:.1e} m; round trip {trip:.1e} px; render {dt:.2f}s")


def test_criterion_7_determinism(desk_dataset, desk_runs, tmp_path, gate):
    cam = EquirectCamera(256, 128)
    spec = MaskSpec((2, 6), (0.05, 0.2), seed=1234)
    masks_same = generate_composite_mask(cam, spec).tobytes() == generate_composite_mask(cam, spec).tobytes()
    generate_dataset(desk_suite(0), tmp_path / "synth", workers=1)
    synth_same = tree_digest(tmp_path / "synth", ()) == tree_digest(desk_dataset, ())
    sd = scene_dirs(desk_dataset)[0]
    run_pipeline(sd / "furnished" / "poses.json", tmp_path / "run", workers=1)
    run_same = tree_digest(tmp_path / "run") == tree_digest(desk_runs / sd.name)
    ok = masks_same and synth_same and run_same
    gate(7, ok, f"masks identical {masks_same}; synth workers 1 vs 3 identical {synth_same}; "
                f"pipeline workers 1 vs 4 identical {run_same}")


def test_criterion_8_service_contract(gate):
    img, mask, ctrl = request_arrays()
    checks = {}
    with MockServer() as server:
        with ServiceClient(server.url, timeout=5) as client:
            checks["canned"] = bool(np.all(client.inpaint(img, mask, ctrl, prompt="empty") == CANNED_COLOR))
        checks["endpoint"] = len(server.state.requests) == 1
        server.state.mode = "slow"
        with ServiceClient(server.url, timeout=0.2, retries=1, backoff=0.01) as client:
            try:
                client.inpaint(img, mask, ctrl)
                checks["timeout"] = False
            except BackendUnavailable:
                checks["timeout"] = len(server.state.requests) == 3
        server.state.mode, server.state.fail_first = "flaky", len(server.state.requests) + 2
        with ServiceClient(server.url, retries=2, backoff=0.01) as client:
            n0 = len(server.state.requests)
            out = client.inpaint(img, mask, ctrl)
            checks["retry"] = bool(np.all(out == CANNED_COLOR)) and len(server.state.requests) - n0 == 3
        server.state.mode = "wrong_size"
        with ServiceClient(server.url, retries=0) as client:
            try:
                client.inpaint(img, mask, ctrl)
                checks["response size"] = False
            except BackendError:
                checks["response size"] = True
            try:
                client.inpaint(img, mask[:, :-1], ctrl)
                checks["request size"] = False
            except MismatchedInput:
                checks["request size"] = True
    gate(8, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
