"""Synthetic furnished/empty room pairs and scoring of pipeline runs."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingOutput, SpecError
from .imageio import read_mask, read_rgb, write_image
from .mesh import FURNITURE, STRUCTURE, TriMesh, box_room, box_solid, concatenate, cylinder_solid
from .meshio import load_mesh, save_mesh
from .metrics import MetricReport, cloud_to_mesh_rmse, image_metrics
from .panorama import EquirectCamera, PanoFrame, Pose, camera_directions, render_geometry
from .texture import bake_layout, build_layout

log = logging.getLogger(__name__)

WALL_MARGIN = 0.5
ROOM_CELL = 0.25
SHADOW_FACTOR = 0.6
SHADOW_SCALE = 1.5
AMBIENT, DIFFUSE = 0.35, 0.65
GRAIN = 0.06
CYL_SEGMENTS = 16

# Room albedos keep red >= blue + 10, furniture albedos blue >= red + 40, so a
# furniture pixel can never render to the same value as the room behind it.
ROOM_BASE = {
    "floor": (168, 128, 96),
    "ceiling": (236, 232, 226),
    "wall": (214, 204, 190),
}
FURNITURE_PALETTE = [
    (60, 90, 170), (40, 120, 160), (90, 70, 150), (50, 60, 120), (70, 130, 190), (30, 90, 110),
]


@dataclass
class Furniture:
    shape: str  # "box" | "cylinder"
    size: tuple  # (dx, dy, dz); cylinders use radius min(dx, dy) / 2
    position: tuple  # footprint center (x, y) on the floor
    yaw: float = 0.0  # degrees

    def footprint(self) -> np.ndarray:
        """Footprint polygon (counter-clockwise) of the primitive as built."""
        cx, cy = self.position[:2]
        if self.shape == "box":
            hx, hy = self.size[0] / 2, self.size[1] / 2
            pts = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
            c, s = math.cos(math.radians(self.yaw)), math.sin(math.radians(self.yaw))
            pts = pts @ np.array([[c, s], [-s, c]])
        else:
            r = min(self.size[0], self.size[1]) / 2
            a = 2 * np.pi * np.arange(CYL_SEGMENTS) / CYL_SEGMENTS
            pts = np.stack([r * np.cos(a), r * np.sin(a)], 1)
        return pts + [cx, cy]

    def mesh(self) -> TriMesh:
        x, y = self.position[:2]
        if self.shape == "box":
            return box_solid((x, y, 0.0), self.size, math.radians(self.yaw), bottom=False)
        r = min(self.size[0], self.size[1]) / 2
        return cylinder_solid((x, y, 0.0), r, self.size[2], CYL_SEGMENTS, bottom=False)

    def shadow_axes(self):
        """Center, semi-axes and rotation (radians) of the floor shadow ellipse."""
        if self.shape == "box":
            a, b = self.size[0] / 2, self.size[1] / 2
        else:
            a = b = min(self.size[0], self.size[1]) / 2
        return np.asarray(self.position[:2], float), SHADOW_SCALE * a, SHADOW_SCALE * b, math.radians(self.yaw)

    def to_json(self) -> dict:
        return {"shape": self.shape, "size": list(self.size), "position": list(self.position[:2]), "yaw": self.yaw}


@dataclass
class SceneSpec:
    room: tuple = (4.0, 4.0, 3.0)
    panos: list = field(default_factory=lambda: [(2.0, 2.0, 1.6)])
    furniture: list = field(default_factory=list)
    seed: int = 0
    resolution: int = 128  # pano height; width is twice that
    texel_density: float = 50.0

    def __post_init__(self):
        self.room = tuple(float(x) for x in self.room)
        self.panos = [tuple(float(x) for x in p) for p in self.panos]
        self.furniture = [f if isinstance(f, Furniture) else Furniture(
            f["shape"], tuple(float(x) for x in f["size"]), tuple(float(x) for x in f["position"]),
            float(f.get("yaw", 0.0))) for f in self.furniture]
        self.validate()

    def validate(self):
        w, d, h = self.room
        if min(w, d, h) <= 0:
            raise SpecError("room dimensions must be positive")
        if not self.panos:
            raise SpecError("scene needs at least one pano")
        for i, p in enumerate(self.panos):
            x, y, z = p
            if not (WALL_MARGIN <= x <= w - WALL_MARGIN and WALL_MARGIN <= y <= d - WALL_MARGIN and 0 < z < h):
                raise SpecError(f"pano {i} at {p} is not inside the room {WALL_MARGIN} m from the walls")
        for i, f in enumerate(self.furniture):
            if f.shape not in ("box", "cylinder"):
                raise SpecError(f"furniture {i}: unknown shape {f.shape!r}")
            if len(f.size) != 3 or min(f.size) <= 0:
                raise SpecError(f"furniture {i}: size must be three positive numbers")
            fp = f.footprint()
            if fp[:, 0].min() < 0 or fp[:, 1].min() < 0 or fp[:, 0].max() > w or fp[:, 1].max() > d \
                    or f.size[2] >= h:
                raise SpecError(f"furniture {i} ({f.shape} at {f.position[:2]}) is outside the room")

    def to_json(self) -> dict:
        return {"room": list(self.room), "panos": [list(p) for p in self.panos],
                "furniture": [f.to_json() for f in self.furniture], "seed": self.seed,
                "resolution": self.resolution, "texel_density": self.texel_density}

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        known = {"room", "panos", "furniture", "seed", "resolution", "texel_density"}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown scene spec keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class SynthScene:
    spec: SceneSpec
    empty_mesh: TriMesh
    furnished_mesh: TriMesh
    poses: list
    empty_panos: list  # uint8 (H, W, 3)
    furnished_panos: list
    masks: list  # bool (H, W)


# ----------------------------------------------------------------------------
# appearance


class _Appearance:
    def __init__(self, spec: SceneSpec, n_room_faces: int, room: TriMesh, furniture_faces: list):
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        self.spec = spec
        self.n_room = n_room_faces
        self.room_kind = _room_face_kind(room)
        self.piece_of = np.concatenate([np.full(n, i) for i, n in enumerate(furniture_faces)]) \
            if furniture_faces else np.zeros(0, dtype=np.int64)
        self.piece_color = np.array([FURNITURE_PALETTE[int(k)] for k in
                                     rng.integers(0, len(FURNITURE_PALETTE), len(spec.furniture))]
                                    ).reshape(-1, 3).astype(np.float64)
        # grain: a few seeded plane waves per surface kind
        self.waves = rng.normal(size=(4, 3)) * 18.0
        self.phases = rng.uniform(0, 2 * np.pi, 4)
        w, d, h = spec.room
        self.light = np.array([w / 2, d / 2, h - 0.05])

    def grain(self, pts):
        return np.mean(np.sin(pts @ self.waves.T + self.phases), axis=-1)

    def albedo(self, pts, faces):
        faces = np.asarray(faces)
        out = np.zeros((len(faces), 3))
        room = faces < self.n_room
        kinds = self.room_kind[faces[room]]
        for k, base in ROOM_BASE.items():
            sel = np.flatnonzero(room)[kinds == k]
            out[sel] = base
        fur = ~room
        if fur.any():
            out[fur] = self.piece_color[self.piece_of[faces[fur] - self.n_room]]
        return out * (1.0 + GRAIN * self.grain(pts))[:, None]

    def shadow(self, pts, faces, active: bool):
        f = np.ones(len(pts))
        if not active or not self.spec.furniture:
            return f
        faces = np.asarray(faces)
        on_floor = (faces < self.n_room)
        on_floor[on_floor] = self.room_kind[faces[on_floor]] == "floor"
        inside = np.zeros(len(pts), dtype=bool)
        for piece in self.spec.furniture:
            c, a, b, yaw = piece.shadow_axes()
            rel = pts[:, :2] - c
            cs, sn = math.cos(yaw), math.sin(yaw)
            x = rel[:, 0] * cs + rel[:, 1] * sn
            y = -rel[:, 0] * sn + rel[:, 1] * cs
            inside |= (x / a) ** 2 + (y / b) ** 2 <= 1.0
        f[on_floor & inside] = SHADOW_FACTOR
        return f

    def texture_color(self, shadows: bool):
        def fn(pts, faces):
            return self.albedo(pts, faces) * self.shadow(pts, faces, shadows)[:, None]
        return fn


def _room_face_kind(room: TriMesh) -> np.ndarray:
    nz = room.face_normals()[:, 2]
    kinds = np.full(room.n_faces, "wall", dtype=object)
    kinds[nz > 0.9] = "floor"
    kinds[nz < -0.9] = "ceiling"
    return kinds


def _cells_under(room: TriMesh, furniture: list) -> np.ndarray:
    """Floor triangles lying entirely inside some footprint."""
    kinds = _room_face_kind(room)
    tri = room.triangles()
    drop = np.zeros(room.n_faces, dtype=bool)
    for f in furniture:
        poly = f.footprint()
        edges = np.roll(poly, -1, axis=0) - poly
        for i in np.flatnonzero(kinds == "floor"):
            p = tri[i, :, :2]
            # convex polygon containment of all three corners (boundary counts)
            cross = edges[:, 0][None] * (p[:, None, 1] - poly[None, :, 1]) - \
                edges[:, 1][None] * (p[:, None, 0] - poly[None, :, 0])
            if np.all(cross >= -1e-12):
                drop[i] = True
    return drop


def _render(mesh: TriMesh, app: _Appearance, cam: EquirectCamera, pose: Pose, shadows: bool):
    depth, normal, fid = render_geometry(mesh, cam, pose)
    hit = fid >= 0
    dirs = camera_directions(cam, pose)
    pts = pose.position + dirs[hit] * depth.data[hit][:, None]
    faces = fid[hit]
    to_light = app.light - pts
    to_light /= np.linalg.norm(to_light, axis=1, keepdims=True)
    shade = AMBIENT + DIFFUSE * np.maximum(0.0, np.einsum("ij,ij->i", normal.data[hit], to_light))
    col = app.albedo(pts, faces) * (shade * app.shadow(pts, faces, shadows))[:, None]
    img = np.zeros(cam.shape + (3,), dtype=np.uint8)
    img[hit] = np.clip(np.rint(col), 0, 255).astype(np.uint8)
    return img, fid


def generate_scene(spec: SceneSpec) -> SynthScene:
    spec.validate()
    w, d, h = spec.room
    room = box_room((w, d, h), cell=ROOM_CELL)
    room.face_labels = np.full(room.n_faces, STRUCTURE, dtype=np.uint8)
    pieces = [f.mesh() for f in spec.furniture]
    app_empty = _Appearance(spec, room.n_faces, room, [p.n_faces for p in pieces])

    if pieces:
        drop = _cells_under(room, spec.furniture)
        kept, _ = room.select_faces(~drop)
        kept.face_labels = np.full(kept.n_faces, STRUCTURE, dtype=np.uint8)
        for p in pieces:
            p.face_labels = np.full(p.n_faces, FURNITURE, dtype=np.uint8)
        furnished = concatenate([kept] + pieces)
        app_fur = _Appearance(spec, kept.n_faces, kept, [p.n_faces for p in pieces])
    else:
        furnished = room.copy()
        app_fur = app_empty

    cam = EquirectCamera.from_height(spec.resolution)
    poses = [Pose(p) for p in spec.panos]
    empty_p, fur_p, masks = [], [], []
    for pose in poses:
        img_e, _ = _render(room, app_empty, cam, pose, shadows=False)
        empty_p.append(img_e)
        if pieces:
            img_f, fid = _render(furnished, app_fur, cam, pose, shadows=True)
            masks.append((fid >= 0) & (furnished.face_labels[np.maximum(fid, 0)] == FURNITURE))
        else:
            img_f = img_e.copy()
            masks.append(np.zeros(cam.shape, dtype=bool))
        fur_p.append(img_f)

    empty_mesh = _textured(room, app_empty.texture_color(False), spec.texel_density)
    furnished_mesh = _textured(furnished, app_fur.texture_color(True), spec.texel_density)
    return SynthScene(spec, empty_mesh, furnished_mesh, poses, empty_p, fur_p, masks)


def _textured(mesh: TriMesh, color_fn, density: float) -> TriMesh:
    out = mesh.copy()
    layout = build_layout(out, None, density)
    out.uvs = layout.uvs
    out.atlas = bake_layout(out, layout, color_fn)
    out.atlas_name = "mesh_atlas.png"
    return out


# ----------------------------------------------------------------------------
# desk suite and dataset files


def desk_suite(seed: int = 0, resolution: int = 128, max_furniture: int = 5) -> list[SceneSpec]:
    """Three small rooms, four panos each, up to ``max_furniture`` primitives."""
    rooms = [(4.0, 4.0, 3.0), (5.0, 3.5, 2.8), (3.5, 4.5, 3.0)]
    rng = np.random.Generator(np.random.PCG64(seed))
    specs = []
    for k, (w, d, h) in enumerate(rooms):
        panos = [(w * fx, d * fy, 1.6) for fx, fy in ((0.3, 0.3), (0.7, 0.3), (0.7, 0.7), (0.3, 0.7))]
        n = int(rng.integers(3, max_furniture + 1)) if max_furniture >= 3 else max_furniture
        furniture = []
        tries = 0
        while len(furniture) < n and tries < 500:
            tries += 1
            shape = "box" if rng.random() < 0.7 else "cylinder"
            if shape == "box":
                size = (float(rng.uniform(0.5, 1.2)), float(rng.uniform(0.4, 0.9)), float(rng.uniform(0.4, 1.1)))
            else:
                dia = float(rng.uniform(0.4, 0.8))
                size = (dia, dia, float(rng.uniform(0.4, 1.0)))
            pos = (float(rng.uniform(0.3, w - 0.3)), float(rng.uniform(0.3, d - 0.3)))
            yaw = float(rng.choice([0.0, 15.0, 30.0, 45.0, 90.0]))
            cand = Furniture(shape, size, pos, yaw)
            fp = cand.footprint()
            if fp[:, 0].min() < 0.05 or fp[:, 1].min() < 0.05 or fp[:, 0].max() > w - 0.05 \
                    or fp[:, 1].max() > d - 0.05:
                continue
            r = np.max(np.linalg.norm(fp - pos, axis=1))
            if any(np.hypot(pos[0] - p[0], pos[1] - p[1]) < r + 0.4 for p in panos):
                continue
            if any(np.hypot(pos[0] - o.position[0], pos[1] - o.position[1]) <
                   r + np.max(np.linalg.norm(o.footprint() - o.position[:2], axis=1)) + 0.1
                   for o in furniture):
                continue
            furniture.append(cand)
        specs.append(SceneSpec((w, d, h), panos, furniture, seed=seed * 1000 + k, resolution=resolution))
    return specs


def pano_id(i: int) -> str:
    return f"pano_{i:03d}"


def write_scene(scene: SynthScene, root) -> Path:
    """Write scene files; both halves carry a ``poses.json`` scene manifest."""
    root = Path(root)
    for half, mesh, panos, masks in (
        ("empty", scene.empty_mesh, scene.empty_panos, [np.zeros_like(m) for m in scene.masks]),
        ("furnished", scene.furnished_mesh, scene.furnished_panos, scene.masks),
    ):
        d = root / half
        d.mkdir(parents=True, exist_ok=True)
        save_mesh(mesh, d / "mesh.ply")
        entries = []
        for i, (img, m, pose) in enumerate(zip(panos, masks, scene.poses)):
            pid = pano_id(i)
            write_image(d / f"{pid}.png", img)
            write_image(d / f"mask_{i:03d}.png", m)
            entries.append({"id": pid, "image": f"{pid}.png", "mask": f"mask_{i:03d}.png", **pose.to_json()})
        (d / "poses.json").write_text(json.dumps({"mesh": "mesh.ply", "panos": entries}, indent=2) + "\n")
    (root / "spec.json").write_text(json.dumps(scene.spec.to_json(), indent=2) + "\n")
    return root


def generate_dataset(specs: list[SceneSpec], out, workers: int = 1) -> list[Path]:
    """Generate and write ``scene_###`` directories; output is independent of ``workers``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    def job(k):
        return write_scene(generate_scene(specs[k]), out / f"scene_{k:03d}")

    if workers <= 1:
        return [job(k) for k in range(len(specs))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(len(specs))))


# ----------------------------------------------------------------------------
# scoring


def scene_dirs(dataset) -> list[Path]:
    dataset = Path(dataset)
    dirs = sorted(p for p in dataset.iterdir() if p.is_dir() and p.name.startswith("scene_"))
    if not dirs:
        raise MissingOutput(f"no scene_### directories in {dataset}")
    return dirs


def score_scene(scene_dir, run_dir, n_samples: int = 20000, seed: int = 0) -> dict:
    scene_dir, run_dir = Path(scene_dir), Path(run_dir)
    manifest = json.loads((scene_dir / "empty" / "poses.json").read_text())
    reports = {}
    for entry in manifest["panos"]:
        pid = entry["id"]
        pred_path = run_dir / "panos" / f"{pid}.png"
        if not pred_path.exists():
            raise MissingOutput(f"missing pipeline output {pred_path}")
        gt = read_rgb(scene_dir / "empty" / entry["image"])
        mask = read_mask(scene_dir / "furnished" / entry["mask"])
        pred = read_rgb(pred_path)
        reports[pid] = image_metrics(pred, gt, mask if mask.any() else None)
    sdm_path = run_dir / "sdm.ply"
    if not sdm_path.exists():
        raise MissingOutput(f"missing pipeline output {sdm_path}")
    rmse = cloud_to_mesh_rmse(load_mesh(sdm_path), load_mesh(scene_dir / "empty" / "mesh.ply"), n_samples, seed)
    return {"panos": reports, "rmse_m": rmse}


def _mean_report(reports: list[MetricReport]) -> MetricReport:
    keys = sorted(set().union(*[r.values for r in reports])) if reports else []
    vals = {}
    for k in keys:
        xs = [r.values[k] for r in reports if k in r.values]
        vals[k] = float(np.mean(xs))
    counts = {}
    for r in reports:
        for k, v in r.counts.items():
            counts[k] = counts.get(k, 0) + v
    return MetricReport(vals, counts)


def score_run(dataset, run, n_samples: int = 20000, seed: int = 0) -> dict:
    """Per-scene and aggregate metrics of a pipeline run against the empty ground truth.

    ``run`` holds one output directory per scene, named like the dataset's.
    """
    run = Path(run)
    scenes = {}
    for sd in scene_dirs(dataset):
        rd = run / sd.name
        if not rd.is_dir():
            raise MissingOutput(f"no pipeline output for {sd.name} in {run}")
        res = score_scene(sd, rd, n_samples, seed)
        agg = _mean_report(list(res["panos"].values()))
        agg.values["rmse_m"] = res["rmse_m"]
        scenes[sd.name] = {"mean": agg, "panos": res["panos"]}
    overall = _mean_report([s["mean"] for s in scenes.values()])
    overall.counts["samples"] = n_samples * len(scenes)
    return {"scenes": scenes, "mean": overall}


def score_to_json(score: dict) -> dict:
    return {
        "mean": score["mean"].to_dict(),
        "scenes": {k: {"mean": v["mean"].to_dict(), "panos": {p: r.to_dict() for p, r in v["panos"].items()}}
                   for k, v in score["scenes"].items()},
    }
