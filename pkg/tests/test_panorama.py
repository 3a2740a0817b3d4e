import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdm_pipeline.errors import DegenerateInput, MismatchedInput, OutOfBounds, ValidationError
from sdm_pipeline.mesh import FURNITURE, STRUCTURE, UNKNOWN, TriMesh, box_room, concatenate, icosphere
from sdm_pipeline.panorama import (MASK, NO_FACE, EquirectCamera, PanoFrame, Pose, camera_directions,
                                   pixel_to_ray, point_to_pixel, project_masks_to_faces, render_geometry)

from conftest import ray_box_exit

CAM = EquirectCamera(256, 128)
ROOM = box_room((4.0, 4.0, 3.0))
CENTER = Pose([2.0, 2.0, 1.5])


def random_pose(rng):
    q = rng.normal(size=4)
    return Pose.from_wxyz(rng.uniform(-1, 1, 3), q)


def test_camera_and_pose_invariants():
    with pytest.raises(ValidationError):
        EquirectCamera(100, 40)
    with pytest.raises(ValidationError):
        EquirectCamera(8, 4)
    with pytest.raises(ValidationError):
        Pose([0, 0, 0], [1, 0, 0, 0.1])
    assert EquirectCamera.from_height(16).shape == (16, 32)


def test_center_pixel_is_forward():
    _, d = pixel_to_ray(CAM, Pose(), CAM.width / 2 - 0.5, CAM.height / 2 - 0.5)
    np.testing.assert_allclose(d, [1, 0, 0], atol=1e-15)


def test_top_row_points_up():
    _, d = pixel_to_ray(CAM, Pose(), CAM.width / 2 - 0.5, 0)
    half_px = np.pi / CAM.height / 2
    assert np.arccos(d[2]) <= half_px + 1e-12


def test_pixel_bounds():
    for u, v in [(-1, 0), (CAM.width, 0), (0, CAM.height), (0, -0.6)]:
        with pytest.raises(OutOfBounds):
            pixel_to_ray(CAM, Pose(), u, v)


def test_point_to_pixel_examples():
    u, v, d = point_to_pixel(CAM, Pose(), [5, 0, 0])
    assert (u, v) == pytest.approx((CAM.width / 2 - 0.5, CAM.height / 2 - 0.5), abs=1e-12) and d == 5.0
    u, v, d = point_to_pixel(CAM, Pose(), [0, 0, 3])
    assert v < 1 and d == 3.0
    with pytest.raises(DegenerateInput):
        point_to_pixel(CAM, Pose([1, 2, 3]), [1, 2, 3])


def test_round_trip_10k():
    rng = np.random.default_rng(0)
    pose = random_pose(rng)
    u = rng.uniform(0, CAM.width, 10_000) * (1 - 1e-12)
    v = rng.uniform(0, CAM.height - 1, 10_000)
    o, d = pixel_to_ray(CAM, pose, u, v)
    t = rng.uniform(0.1, 50, 10_000)
    u2, v2, depth = point_to_pixel(CAM, pose, o + d * t[:, None])
    du = np.abs(u2 - u)
    du = np.minimum(du, CAM.width - du)  # seam
    assert du.max() <= 1e-6 and np.abs(v2 - v).max() <= 1e-6
    np.testing.assert_allclose(depth, t, rtol=1e-12)


def test_round_trip_angular_error_from_directions():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    u, v, _ = point_to_pixel(CAM, Pose(), d)
    _, back = pixel_to_ray(CAM, Pose(), u, v)
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", d, back), -1, 1))
    assert ang.max() <= np.pi / CAM.height


@given(st.integers(0, 2**31), st.integers(8, 64))
@settings(max_examples=50, deadline=None)
def test_round_trip_property(seed, h):
    rng = np.random.default_rng(seed)
    cam = EquirectCamera.from_height(h)
    pose = random_pose(rng)
    u = rng.uniform(-0.5, cam.width - 1e-9, 50)
    v = rng.uniform(-0.5, cam.height - 0.5, 50)
    o, d = pixel_to_ray(cam, pose, u, v)
    u2, v2, _ = point_to_pixel(cam, pose, o + 2.0 * d)
    du = np.abs(u2 - u)
    du = np.minimum(du, cam.width - du)
    pole = np.abs(np.abs(v - (cam.height - 1) / 2) - cam.height / 2) < 1e-6
    assert np.all(du[~pole] < 1e-6) and np.all(np.abs(v2 - v) < 1e-6)


def test_box_room_depth_matches_analytic():
    t0 = time.perf_counter()
    depth, normal, face = render_geometry(ROOM, CAM, CENTER)
    dt = time.perf_counter() - t0
    want = ray_box_exit(CENTER.position, camera_directions(CAM, CENTER), np.zeros(3), np.array([4.0, 4, 3]))
    assert np.abs(depth.data - want).max() <= 1e-6
    assert np.all(face >= 0)
    dirs = camera_directions(CAM, CENTER)
    assert np.all(np.einsum("hwc,hwc->hw", normal.data, dirs) <= 0)
    np.testing.assert_allclose(np.linalg.norm(normal.data, axis=-1), 1.0, atol=1e-4)
    assert dt < 2.0


def test_sphere_depth():
    depth, _, _ = render_geometry(icosphere(4), CAM, Pose())
    assert np.abs(depth.data - 1.0).max() <= 2e-3


def test_empty_mesh_render():
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    depth, _, face = render_geometry(empty, CAM, Pose())
    assert np.all(np.isinf(depth.data)) and np.all(face == NO_FACE)


def test_render_rotation_equivariant():
    rng = np.random.default_rng(3)
    R = Pose.from_wxyz([0, 0, 0], rng.normal(size=4)).matrix
    pose = Pose([1.2, 2.5, 1.1], Pose.from_wxyz([0, 0, 0], rng.normal(size=4)).rotation)
    d0, _, _ = render_geometry(ROOM, CAM, pose)
    moved = ROOM.transformed(R)
    pose2 = Pose.from_matrix(R @ pose.position, R @ pose.matrix)
    d1, _, _ = render_geometry(moved, CAM, pose2)
    assert np.abs(d0.data - d1.data).max() <= 1e-6


def _mask(value, cam=CAM, pose=CENTER):
    return PanoFrame(cam, pose, np.full(cam.shape, value, dtype=bool), MASK)


def test_mask_projection_all_true_and_false():
    room = box_room((4, 4, 3), cell=1.0)
    s, lab = project_masks_to_faces(room, [_mask(True)])
    seen = ~np.isnan(s)
    assert seen.all() and np.all(s == 1) and np.all(lab == FURNITURE)
    s, lab = project_masks_to_faces(room, [_mask(False)])
    assert np.all(s == 0) and np.all(lab == STRUCTURE)


def test_mask_projection_rejects_nonbinary():
    bad = PanoFrame(CAM, CENTER, np.full(CAM.shape, 3, dtype=np.uint8), MASK)
    with pytest.raises(MismatchedInput):
        project_masks_to_faces(ROOM, [bad])


def test_mask_projection_hidden_face_is_unknown():
    room = box_room((4, 4, 3))
    hidden = TriMesh([[100, 100, 100], [101, 100, 100], [100, 101, 100]], [[0, 1, 2]])
    s, lab = project_masks_to_faces(concatenate([room, hidden]), [_mask(True)])
    assert np.isnan(s[-1]) and lab[-1] == UNKNOWN


def test_mask_projection_distance_weighting():
    # very large wall at x = 0 facing +x: both panos see the same set of directions
    L = 2000.0
    wall = TriMesh([[0, -L, -L], [0, L, -L], [0, 0, L]], [[0, 2, 1]])
    cam = EquirectCamera(64, 32)
    near = PanoFrame(cam, Pose([1, 0, 0]), np.ones(cam.shape, dtype=bool), MASK)
    far = PanoFrame(cam, Pose([4, 0, 0]), np.zeros(cam.shape, dtype=bool), MASK)
    s, lab = project_masks_to_faces(wall, [near, far])
    assert s[0] == pytest.approx(0.8, abs=2e-3)
    assert lab[0] == FURNITURE


def test_mask_projection_duplicate_pano_invariant():
    room = box_room((4, 4, 3), cell=1.0)
    rng = np.random.default_rng(5)
    frames = [PanoFrame(CAM, Pose(p), rng.random(CAM.shape) > 0.5, MASK)
              for p in ([1, 1, 1.5], [3, 2.5, 1.2])]
    s1, _ = project_masks_to_faces(room, frames)
    s2, _ = project_masks_to_faces(room, frames + frames)
    np.testing.assert_allclose(s1, s2, rtol=0, atol=1e-12)


def test_mask_shape_mismatch():
    with pytest.raises(MismatchedInput):
        PanoFrame(CAM, Pose(), np.zeros((10, 20), dtype=bool), MASK)
