import json

import pytest

from sdm_pipeline.config import DEFAULTS, Config
from sdm_pipeline.errors import ParseError, ValidationError
from sdm_pipeline.manifest import load_manifest


def test_defaults():
    cfg = Config()
    assert cfg["sdm.angle_tol_deg"] == 5.0 and cfg["sdm.dist_tol_m"] == 0.02
    assert cfg["sdm.min_region_faces"] == 20 and cfg["sdm.label_threshold"] == 0.5
    assert cfg["sdm.plane_snap_radius_m"] == 0.5 and cfg["inpaint.backend"] == "baseline"


def test_parse_sections_comments_and_types():
    text = """
    # comment line
    [sdm]
    angle_tol_deg = 3   # trailing comment
    sdm.min_region_faces = 7
    preserve_openings = off
    [inpaint]
    prompt = "a bare room"
    """
    cfg = Config.parse(text)
    assert cfg["sdm.angle_tol_deg"] == 3.0 and isinstance(cfg["sdm.angle_tol_deg"], float)
    assert cfg["sdm.min_region_faces"] == 7
    assert cfg["sdm.preserve_openings"] is False
    assert cfg["inpaint.prompt"] == "a bare room"
    # keys under a header are prefixed unless they are already dotted under it
    with pytest.raises(ValidationError):
        Config.parse("[inpaint]\npipeline.workers = 2\n")


@pytest.mark.parametrize("text", ["sdm.nope = 1", "sdm.min_region_faces = 2.5", "sdm.preserve_openings = maybe",
                                  "just words"])
def test_parse_errors(text):
    with pytest.raises(ValidationError):
        Config.parse(text)


def test_text_round_trip(tmp_path):
    cfg = Config({"control.sigma": 2.0, "inpaint.retries": "5"})
    p = tmp_path / "c.cfg"
    p.write_text(cfg.to_text())
    assert Config.load(p).values == cfg.values
    assert set(cfg.values) == set(DEFAULTS)
    with pytest.raises(FileNotFoundError):
        Config.load(tmp_path / "missing.cfg")


def test_subset_and_section():
    cfg = Config()
    assert set(cfg.subset("blend")) == {"blend.dilate_px", "blend.feather_px"}
    assert cfg.section("texture")["max_atlas"] == 8192


def _write(tmp_path, data):
    p = tmp_path / "scene" / "poses.json"
    p.parent.mkdir(exist_ok=True)
    p.write_text(data if isinstance(data, str) else json.dumps(data))
    return p


def test_manifest_forms(tmp_path):
    entry = {"image": "a.png", "position": [1, 2, 1.5], "mask": "m.png"}
    m = load_manifest(_write(tmp_path, {"mesh": "room.ply", "panos": [entry]}))
    assert m.mesh == tmp_path / "scene" / "room.ply" and m.panos[0].id == "pano_000"
    assert m.panos[0].mask == tmp_path / "scene" / "m.png" and m.scene_id == "scene"
    m = load_manifest(_write(tmp_path, [{"id": "x", "image": "a.png", "position": [0, 0, 0],
                                         "rotation_wxyz": [0, 0, 0, 1]}]))
    assert m.mesh.name == "mesh.ply" and m.panos[0].id == "x" and m.panos[0].mask is None


@pytest.mark.parametrize("data,err", [
    ("{not json", ParseError),
    ("3", ValidationError),
    ({"panos": []}, ValidationError),
    ({"panos": [{"image": "a.png"}]}, ValidationError),
    ({"panos": [{"image": "a.png", "position": [1, 2]}]}, ValidationError),
    ({"panos": [{"id": "a", "image": "a.png", "position": [0, 0, 0]},
                {"id": "a", "image": "b.png", "position": [0, 0, 0]}]}, ValidationError),
])
def test_manifest_errors(tmp_path, data, err):
    with pytest.raises(err):
        load_manifest(_write(tmp_path, data))


def test_manifest_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "none.json")
