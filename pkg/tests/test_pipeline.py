import hashlib
import json
import shutil
import socket

import numpy as np
import pytest
from mock_service import CANNED_COLOR, MockServer
from PIL import Image

from sdm_pipeline.config import Config
from sdm_pipeline.errors import RefusesFurnished, StageFailure
from sdm_pipeline.imageio import read_mask, read_rgb
from sdm_pipeline.pipeline import STAGES, emit_finetune_dataset, load_run_log, run_pipeline, split_scenes
from sdm_pipeline.synth import Furniture, SceneSpec, generate_dataset, score_run, scene_dirs


def tree_digest(root, skip=("run.json",)):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def small_spec(**kw):
    base = dict(panos=[(2.0, 2.0, 1.6), (1.2, 2.8, 1.4)],
                furniture=[Furniture("box", (0.8, 0.6, 0.7), (2.6, 1.4))], resolution=32)
    base.update(kw)
    return SceneSpec(**base)


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    generate_dataset([small_spec()], root)
    return root / "scene_000" / "furnished"


@pytest.fixture
def scene_copy(small_scene, tmp_path):
    dst = tmp_path / "scene"
    shutil.copytree(small_scene, dst)
    return dst


def cached(out):
    return {s["name"]: s["cached"] for s in load_run_log(out)["stages"]}


def test_run_log_and_rerun_cached(scene_copy, tmp_path):
    out = run_pipeline(scene_copy / "poses.json", tmp_path / "out", workers=2)
    log = load_run_log(out)
    assert [s["name"] for s in log["stages"]] == list(STAGES)
    assert not any(cached(out).values())
    assert all(s["wall_time_s"] >= 0 for s in log["stages"])
    assert log["panos"] == ["pano_000", "pano_001"]
    assert abs(log["image_processing_s"] + log["mesh_processing_s"]
               - sum(s["wall_time_s"] for s in log["stages"])) < 1e-4
    for rel in ("sdm.ply", "panos/pano_000.png", "textured/sdm.obj", "textured/sdm_atlas.png", "control/pano_001.png"):
        assert (out / rel).exists()
    before = tree_digest(out)
    run_pipeline(scene_copy / "poses.json", out, workers=2)
    assert all(cached(out).values())
    assert tree_digest(out) == before


def _touch_pixel(path):
    img = read_rgb(path)
    img[0, 0] = (img[0, 0].astype(int) + 1) % 256
    Image.fromarray(img).save(path)


def test_edits_invalidate_only_downstream(scene_copy, tmp_path):
    man, out = scene_copy / "poses.json", tmp_path / "out"
    run_pipeline(man, out, workers=1)
    # a pano image feeds inpaint and blend, not the mesh stages
    _touch_pixel(scene_copy / "pano_001.png")
    run_pipeline(man, out, workers=1)
    c = cached(out)
    assert c["project_masks"] and c["build_sdm"] and c["control"]
    assert not c["inpaint"] and not c["blend"]
    # a control parameter reruns control and everything after it
    run_pipeline(man, out, Config({"control.sigma": 2.0}), workers=1)
    c = cached(out)
    assert c["project_masks"] and c["build_sdm"]
    assert not any(c[s] for s in STAGES[2:])
    # a mask byte reruns everything
    m = read_mask(scene_copy / "mask_000.png")
    m[0, 0] = ~m[0, 0]
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8)).save(scene_copy / "mask_000.png")
    run_pipeline(man, out, Config({"control.sigma": 2.0}), workers=1)
    assert not any(cached(out).values())


def test_damaged_output_is_rebuilt(scene_copy, tmp_path):
    out = run_pipeline(scene_copy / "poses.json", tmp_path / "out", workers=1)
    before = tree_digest(out)
    (out / "control" / "pano_000.png").write_bytes(b"junk")
    run_pipeline(scene_copy / "poses.json", out, workers=1)
    c = cached(out)
    assert not c["control"] and c["inpaint"] and c["texture"]
    assert tree_digest(out) == before


def test_missing_mask_fails_in_first_stage(scene_copy, tmp_path):
    (scene_copy / "mask_001.png").unlink()
    with pytest.raises(StageFailure) as err:
        run_pipeline(scene_copy / "poses.json", tmp_path / "out")
    assert err.value.stage == "project_masks"
    assert "mask_001.png" in str(err.value)


def test_failed_stage_keeps_earlier_caches(scene_copy, tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    cfg = Config({"inpaint.backend": "service", "inpaint.endpoint": f"http://127.0.0.1:{port}",
                  "inpaint.retries": 0})
    out = tmp_path / "out"
    with pytest.raises(StageFailure) as err:
        run_pipeline(scene_copy / "poses.json", out, cfg, workers=1)
    assert err.value.stage == "inpaint"
    assert {p.stem for p in (out / ".cache").glob("*.json")} == {"project_masks", "build_sdm", "control"}
    run_pipeline(scene_copy / "poses.json", out, workers=1)
    c = cached(out)
    assert c["project_masks"] and c["build_sdm"] and c["control"] and not c["inpaint"]


def test_service_backend_with_superres_command(scene_copy, tmp_path):
    script = tmp_path / "up.py"
    script.write_text("import sys\nfrom PIL import Image\n"
                      "src, dst, w, h = sys.argv[1:]\n"
                      "Image.open(src).resize((int(w), int(h)), Image.NEAREST).save(dst)\n")
    with MockServer() as server:
        cfg = Config({"inpaint.backend": "service", "inpaint.endpoint": server.url,
                      "inpaint.downscale_factor": 4,
                      "superres.command": f"python3 {script} {{input}} {{output}} {{width}} {{height}}"})
        out = run_pipeline(scene_copy / "poses.json", tmp_path / "out", cfg, workers=2)
        n_requests = len(server.state.requests)
    raw = read_rgb(out / "inpainted" / "pano_000.png")
    up = read_rgb(out / "upscaled" / "pano_000.png")
    assert raw.shape == (8, 16, 3) and up.shape == (32, 64, 3)
    assert np.all(up == CANNED_COLOR)
    masks = [read_mask(scene_copy / f"mask_{i:03d}.png") for i in range(2)]
    assert n_requests == sum(m.any() for m in masks)
    final = read_rgb(out / "panos" / "pano_000.png")
    assert np.all(final[masks[0]] == CANNED_COLOR)


def test_pipeline_beats_passthrough(desk_dataset, desk_runs):
    score = score_run(desk_dataset, desk_runs, n_samples=5000)
    for sd in scene_dirs(desk_dataset):
        per = score["scenes"][sd.name]
        fur = [read_rgb(p).astype(float) / 255 for p in sorted((sd / "furnished").glob("pano_*.png"))]
        emp = [read_rgb(p).astype(float) / 255 for p in sorted((sd / "empty").glob("pano_*.png"))]
        msk = [read_mask(p) for p in sorted((sd / "furnished").glob("mask_*.png"))]
        passthrough = np.concatenate([((f - e) ** 2)[m].ravel() for f, e, m in zip(fur, emp, msk)]).mean()
        assert per["mean"]["mse_masked"] < passthrough


def test_deterministic_across_worker_counts(desk_dataset, desk_runs, tmp_path):
    sd = scene_dirs(desk_dataset)[0]
    serial = run_pipeline(sd / "furnished" / "poses.json", tmp_path / "serial", workers=1)
    assert tree_digest(serial) == tree_digest(desk_runs / sd.name)


# -- fine-tuning dataset --------------------------------------------------------

@pytest.fixture(scope="module")
def empty_scenes(tmp_path_factory):
    root = tmp_path_factory.mktemp("empty10")
    specs = [SceneSpec(panos=[(2.0, 2.0, 1.5)], resolution=16, seed=k) for k in range(10)]
    return [d / "empty" / "poses.json" for d in generate_dataset(specs, root)]


def test_split_arithmetic():
    ids = [f"s{k}" for k in range(10)]
    split = split_scenes(ids, seed=3)
    assert [len(split[k]) for k in ("train", "val", "test")] == [8, 1, 1]
    assert sorted(sum(split.values(), [])) == ids
    assert split == split_scenes(list(reversed(ids)), seed=3)


def test_emit_dataset_split_and_determinism(empty_scenes, tmp_path):
    index = json.loads(emit_finetune_dataset(empty_scenes, tmp_path / "a").read_text())
    assert index["counts"] == {"train": 8, "val": 1, "test": 1}
    assert len(index["samples"]) == 10
    for rec in index["samples"]:
        mask = read_mask(tmp_path / "a" / rec["mask"])
        masked = read_rgb(tmp_path / "a" / rec["masked_image"])
        assert mask.any() and np.all(masked[mask] == 0)
        assert rec["scene"] in index["splits"][rec["split"]]
    emit_finetune_dataset(empty_scenes, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    other = json.loads(emit_finetune_dataset(empty_scenes, tmp_path / "c", Config({"dataset.seed": 9})).read_text())
    assert other["samples"][0]["mask"] == index["samples"][0]["mask"]
    assert tree_digest(tmp_path / "c") != tree_digest(tmp_path / "a")


def test_emit_refuses_furnished(empty_scenes, small_scene):
    with pytest.raises(RefusesFurnished, match="scene_000/pano_00"):
        emit_finetune_dataset(empty_scenes[1:3] + [small_scene / "poses.json"], "/nonexistent/never")
