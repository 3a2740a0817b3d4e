import hashlib
import json
import shutil

import numpy as np
import pytest

from sdm_pipeline.errors import MissingOutput, SpecError
from sdm_pipeline.imageio import read_mask, read_rgb
from sdm_pipeline.mesh import FURNITURE, is_watertight
from sdm_pipeline.meshio import load_mesh
from sdm_pipeline.panorama import EquirectCamera, render_geometry
from sdm_pipeline.synth import (Furniture, SceneSpec, desk_suite, generate_dataset, generate_scene, scene_dirs,
                                score_run, score_to_json)


def tree_digest(root):
    h = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return h


def make_run(dataset, run, source):
    """Fake pipeline output: panos from the dataset's ``source`` half, empty mesh as the SDM."""
    for sd in scene_dirs(dataset):
        out = run / sd.name
        (out / "panos").mkdir(parents=True)
        for png in (sd / source).glob("pano_*.png"):
            shutil.copy(png, out / "panos" / png.name)
        shutil.copy(sd / "empty" / "mesh.ply", out / "sdm.ply")
    return run


def test_zero_furniture_outputs_match():
    scene = generate_scene(SceneSpec(panos=[(2.0, 2.0, 1.6), (1.0, 3.0, 1.2)], resolution=32))
    for e, f, m in zip(scene.empty_panos, scene.furnished_panos, scene.masks):
        assert np.array_equal(e, f) and not m.any()
    assert np.array_equal(scene.empty_mesh.vertices, scene.furnished_mesh.vertices)
    assert np.array_equal(scene.empty_mesh.faces, scene.furnished_mesh.faces)
    assert is_watertight(scene.empty_mesh)


def test_center_box_mask_matches_face_ids():
    spec = SceneSpec(panos=[(2.0, 2.0, 1.6)], furniture=[Furniture("box", (1.0, 1.0, 1.0), (2.0, 2.0))],
                     resolution=64)
    scene = generate_scene(spec)
    cam = EquirectCamera.from_height(64)
    _, _, fid = render_geometry(scene.furnished_mesh, cam, scene.poses[0])
    labels = scene.furnished_mesh.face_labels
    expect = (fid >= 0) & (labels[np.maximum(fid, 0)] == FURNITURE)
    assert scene.masks[0].sum() == expect.sum() > 0
    assert np.array_equal(scene.masks[0], expect)


def test_masked_pixels_differ_and_shadows_are_unmasked():
    spec = desk_suite(0, resolution=64)[0]
    scene = generate_scene(spec)
    for e, f, m in zip(scene.empty_panos, scene.furnished_panos, scene.masks):
        diff = np.any(e != f, axis=2)
        assert np.all(diff[m])
        # shadow pixels change too but stay outside the mask
        assert (diff & ~m).any()
        assert np.all(f[~diff] == e[~diff])


def test_spec_validation():
    with pytest.raises(SpecError):
        SceneSpec(furniture=[Furniture("box", (1, 1, 1), (3.8, 2.0))])
    with pytest.raises(SpecError):
        SceneSpec(panos=[(0.2, 2.0, 1.6)])
    with pytest.raises(SpecError):
        SceneSpec(furniture=[{"shape": "sofa", "size": [1, 1, 1], "position": [2, 2]}])
    with pytest.raises(SpecError):
        SceneSpec(furniture=[Furniture("box", (1, 1, 3.5), (2.0, 2.0))])
    with pytest.raises(SpecError):
        SceneSpec.from_json({"room": [4, 4, 3], "colour": "red"})
    spec = desk_suite(3)[1]
    assert SceneSpec.from_json(json.loads(json.dumps(spec.to_json()))).to_json() == spec.to_json()


def test_desk_suite_shape():
    for seed in range(5):
        specs = desk_suite(seed)
        assert len(specs) == 3
        for s in specs:
            assert len(s.panos) == 4 and 3 <= len(s.furniture) <= 5
            s.validate()


def test_dataset_layout(desk_dataset):
    dirs = scene_dirs(desk_dataset)
    assert [d.name for d in dirs] == ["scene_000", "scene_001", "scene_002"]
    for d in dirs:
        for half in ("empty", "furnished"):
            man = json.loads((d / half / "poses.json").read_text())
            assert man["mesh"] == "mesh.ply" and len(man["panos"]) == 4
            for e in man["panos"]:
                assert (d / half / e["image"]).exists() and (d / half / e["mask"]).exists()
        assert not read_mask(d / "empty" / "mask_000.png").any()
        assert load_mesh(d / "empty" / "mesh.ply").n_faces > 0


def test_dataset_deterministic_across_workers(desk_dataset, tmp_path):
    generate_dataset(desk_suite(0), tmp_path / "serial", workers=1)
    assert tree_digest(tmp_path / "serial") == tree_digest(desk_dataset)


def test_score_of_ground_truth_is_perfect(desk_dataset, tmp_path):
    score = score_run(desk_dataset, make_run(desk_dataset, tmp_path / "gt", "empty"), n_samples=2000)
    mean = score["mean"].values
    assert mean["mse"] == 0.0 and mean["mse_masked"] == 0.0
    assert mean["rmse_m"] < 1e-12
    json.dumps(score_to_json(score))


def test_score_of_passthrough_matches_direct_computation(desk_dataset, tmp_path):
    score = score_run(desk_dataset, make_run(desk_dataset, tmp_path / "pt", "furnished"), n_samples=2000)
    for sd in scene_dirs(desk_dataset):
        per = score["scenes"][sd.name]["panos"]
        for i in range(4):
            e = read_rgb(sd / "empty" / f"pano_{i:03d}.png").astype(np.float64) / 255
            f = read_rgb(sd / "furnished" / f"pano_{i:03d}.png").astype(np.float64) / 255
            m = read_mask(sd / "furnished" / f"mask_{i:03d}.png")
            se = (f - e) ** 2
            assert abs(per[f"pano_{i:03d}"]["mse"] - se.mean()) < 1e-12
            if m.any():
                assert abs(per[f"pano_{i:03d}"]["mse_masked"] - se[m].mean()) < 1e-12
    assert score["mean"]["mse_masked"] > 0


def test_score_missing_outputs(desk_dataset, tmp_path):
    with pytest.raises(MissingOutput):
        score_run(desk_dataset, tmp_path / "nothing")
    run = make_run(desk_dataset, tmp_path / "partial", "empty")
    (run / "scene_001" / "panos" / "pano_002.png").unlink()
    with pytest.raises(MissingOutput):
        score_run(desk_dataset, run)
    with pytest.raises(MissingOutput):
        scene_dirs(tmp_path / "partial" / "scene_000")
