"""Staged, content-hash cached defurnishing pipeline and fine-tuning data export."""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
import shutil
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import Config
from .control import CannyParams, MaskSpec, generate_composite_mask, make_control_image
from .errors import MismatchedInput, RefusesFurnished, SdmError, StageFailure
from .imageio import read_image, read_mask, read_rgb, write_image
from .inpaint import BlendParams, ServiceClient, baseline_inpaint, blend_inpaint
from .manifest import SceneManifest, load_manifest
from .mesh import TriMesh
from .meshio import load_mesh, save_mesh
from .panorama import MASK, EquirectCamera, PanoFrame, project_masks_to_faces, render_geometry
from .planes import Plane
from .sdm import SdmConfig, build_sdm
from .texture import bake_texture, select_views

log = logging.getLogger(__name__)

STAGES = ("project_masks", "build_sdm", "control", "inpaint", "superres", "blend", "texture")
MESH_STAGES = {"project_masks", "build_sdm", "texture"}
CACHE_DIR = ".cache"
CHUNK = 1 << 20


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            b = f.read(CHUNK)
            if not b:
                break
            h.update(b)
    return h.hexdigest()


@dataclass
class StageRecord:
    name: str
    key: str
    cached: bool
    wall_time_s: float
    outputs: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"name": self.name, "key": self.key, "cached": self.cached,
                "wall_time_s": round(self.wall_time_s, 6), "outputs": self.outputs}


class StageCache:
    """Per-stage key and output hashes under ``out/.cache``."""

    def __init__(self, out: Path):
        self.out = out
        self.dir = out / CACHE_DIR
        self.dir.mkdir(parents=True, exist_ok=True)

    def key(self, name: str, config: dict, inputs: dict, upstream: list) -> str:
        hashes = {k: file_sha256(p) for k, p in sorted(inputs.items())}
        blob = json.dumps({"stage": name, "config": config, "inputs": hashes, "upstream": upstream},
                          sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def lookup(self, name: str, key: str) -> list | None:
        f = self.dir / f"{name}.json"
        if not f.exists():
            return None
        rec = json.loads(f.read_text())
        if rec.get("key") != key:
            return None
        for rel, digest in rec["outputs"].items():
            p = self.out / rel
            if not p.exists() or file_sha256(p) != digest:
                return None
        return sorted(rec["outputs"])

    def store(self, name: str, key: str, outputs: list):
        rec = {"key": key, "outputs": {rel: file_sha256(self.out / rel) for rel in sorted(outputs)}}
        (self.dir / f"{name}.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _rel(out: Path, paths) -> list:
    return sorted(str(Path(p).relative_to(out)) for p in paths)


def _camera_for(shape) -> EquirectCamera:
    H, W = shape[:2]
    return EquirectCamera(W, H)


def _image_size(path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size  # (W, H)


def _load_mask(entry, shape) -> np.ndarray:
    if entry.mask is None:
        return np.zeros(shape, dtype=bool)
    m = read_mask(entry.mask)
    if m.shape != tuple(shape):
        raise MismatchedInput(f"mask {entry.mask} is {m.shape[1]}x{m.shape[0]}, image is {shape[1]}x{shape[0]}")
    return m


def save_planes(planes: list[Plane], path: Path):
    path.write_text(json.dumps([{"normal": p.normal.tolist(), "offset": p.offset, "kind": p.kind}
                                for p in planes], indent=1) + "\n")


def load_planes(path: Path) -> list[Plane]:
    return [Plane(np.asarray(d["normal"]), d["offset"], d["kind"]) for d in json.loads(Path(path).read_text())]


def sdm_config(cfg: Config) -> SdmConfig:
    return SdmConfig(cfg["sdm.angle_tol_deg"], cfg["sdm.dist_tol_m"], cfg["sdm.min_region_faces"],
                     cfg["sdm.refit_every"], cfg["sdm.label_threshold"], cfg["sdm.plane_snap_radius_m"],
                     cfg["sdm.opening_min_views"], cfg["sdm.opening_tol_m"])


def _centers(m: SceneManifest, cfg: Config):
    return [e.pose.position for e in m.panos] if cfg["sdm.preserve_openings"] else None


def scene_face_scores(m: SceneManifest, cfg: Config) -> np.ndarray:
    """Per-face furniture scores of the manifest mesh from its pano masks."""
    mesh = load_mesh(m.mesh)
    frames = []
    for e in m.panos:
        W, H = _image_size(e.image)
        frames.append(PanoFrame(EquirectCamera(W, H), e.pose, _load_mask(e, (H, W)), MASK))
    scores, _ = project_masks_to_faces(mesh, frames, cfg["masks.threshold"], cfg["masks.erosion_px"])
    return scores


def build_scene_sdm(m: SceneManifest, cfg: Config):
    """Face scores plus SDM construction for one scene, outside the staged runner."""
    mesh = load_mesh(m.mesh)
    return build_sdm(TriMesh(mesh.vertices, mesh.faces), scene_face_scores(m, cfg), sdm_config(cfg),
                     _centers(m, cfg))


def make_client(cfg: Config) -> ServiceClient:
    if not cfg["inpaint.endpoint"]:
        raise MismatchedInput("inpaint.backend = service needs inpaint.endpoint")
    return ServiceClient(cfg["inpaint.endpoint"], timeout=cfg["inpaint.timeout_s"], retries=cfg["inpaint.retries"],
                         max_concurrency=cfg["inpaint.max_concurrency"],
                         downscale_factor=cfg["inpaint.downscale_factor"])


class Pipeline:
    def __init__(self, manifest: SceneManifest, out, config: Config | None = None, workers: int | None = None,
                 client: ServiceClient | None = None):
        self.m = manifest
        self.out = Path(out)
        self.cfg = config or Config()
        self.workers = int(workers if workers is not None else self.cfg["pipeline.workers"])
        self.client = client
        self.records: list[StageRecord] = []
        self.keys: dict[str, str] = {}

    # -- helpers -----------------------------------------------------------
    def _map(self, fn, items):
        if self.workers <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def _stage(self, name, config: dict, inputs: dict, upstream: list, fn):
        t0 = time.perf_counter()
        try:
            key = self.cache.key(name, config, inputs, [self.keys[u] for u in upstream])
            hit = self.cache.lookup(name, key)
            if hit is None:
                produced = fn()
                outputs = _rel(self.out, produced)
                self.cache.store(name, key, outputs)
            else:
                outputs = hit
        except StageFailure:
            raise
        except (SdmError, OSError, ValueError, subprocess.CalledProcessError) as exc:
            raise StageFailure(name, exc) from exc
        dt = time.perf_counter() - t0
        self.keys[name] = key
        self.records.append(StageRecord(name, key, hit is not None, dt, outputs))
        log.info("stage %-13s %s %.3fs", name, "cached" if hit is not None else "ran", dt)

    def _pano_inputs(self, attr: str) -> dict:
        out = {}
        for e in self.m.panos:
            p = getattr(e, attr)
            if p is not None:
                out[f"{attr}:{e.id}"] = p
        return out

    def _poses_blob(self) -> list:
        return [{"id": e.id, **e.pose.to_json()} for e in self.m.panos]

    # -- stages ------------------------------------------------------------
    def run(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = StageCache(self.out)
        t_all = time.perf_counter()
        cfg = self.cfg
        for e in self.m.panos:
            if not e.image.exists():
                raise StageFailure("project_masks", FileNotFoundError(f"missing pano image {e.image}"))
            if e.mask is not None and not e.mask.exists():
                raise StageFailure("project_masks", FileNotFoundError(f"missing mask file {e.mask}"))
        if not self.m.mesh.exists():
            raise StageFailure("project_masks", FileNotFoundError(f"missing mesh {self.m.mesh}"))
        sizes = {e.id: _image_size(e.image) for e in self.m.panos}
        poses = {"poses": self._poses_blob(), "sizes": sizes}

        self._stage("project_masks", {**cfg.subset("masks"), **poses},
                    {"mesh": self.m.mesh, **self._pano_inputs("mask")}, [], self._project_masks)
        self._stage("build_sdm", {**cfg.subset("sdm"), **poses},
                    {"mesh": self.m.mesh, "scores": self.out / "face_scores.npy"}, ["project_masks"],
                    self._build_sdm)
        self._stage("control", {**cfg.subset("control"), **poses}, {"sdm": self.out / "sdm.ply"},
                    ["build_sdm"], self._control)
        inpaint_cfg = {k: v for k, v in cfg.subset("inpaint").items()
                       if k not in ("inpaint.timeout_s", "inpaint.retries", "inpaint.max_concurrency")}
        self._stage("inpaint", {**inpaint_cfg, **poses},
                    {**self._pano_inputs("image"), **self._pano_inputs("mask"),
                     **{f"control:{e.id}": self.out / "control" / f"{e.id}.png" for e in self.m.panos}},
                    ["control"], self._inpaint)
        self._stage("superres", {**cfg.subset("superres"), **poses},
                    {f"raw:{e.id}": self.out / "inpainted" / f"{e.id}.png" for e in self.m.panos},
                    ["inpaint"], self._superres)
        self._stage("blend", {**cfg.subset("blend"), "inpaint.mask_dilate_px": cfg["inpaint.mask_dilate_px"],
                              **poses},
                    {**self._pano_inputs("image"), **self._pano_inputs("mask"),
                     **{f"up:{e.id}": self.out / "upscaled" / f"{e.id}.png" for e in self.m.panos}},
                    ["superres"], self._blend)
        self._stage("texture", {**cfg.subset("texture"), **poses},
                    {"sdm": self.out / "sdm.ply", "planes": self.out / "sdm_planes.json",
                     **{f"pano:{e.id}": self.out / "panos" / f"{e.id}.png" for e in self.m.panos}},
                    ["blend"], self._texture)
        total = time.perf_counter() - t_all
        self._write_log(total)
        return self.out

    def _write_log(self, total: float):
        image_t = sum(r.wall_time_s for r in self.records if r.name not in MESH_STAGES)
        mesh_t = sum(r.wall_time_s for r in self.records if r.name in MESH_STAGES)
        n = max(1, len(self.m.panos))
        log_ = {
            "manifest": str(self.m.path),
            "scene": self.m.scene_id,
            "panos": [e.id for e in self.m.panos],
            "stages": [r.to_json() for r in self.records],
            "total_wall_time_s": round(total, 6),
            "image_processing_s": round(image_t, 6),
            "mesh_processing_s": round(mesh_t, 6),
            "image_processing_s_per_pano": round(image_t / n, 6),
            "mesh_processing_s_per_pano": round(mesh_t / n, 6),
        }
        (self.out / "run.json").write_text(json.dumps(log_, indent=2) + "\n")

    def _project_masks(self):
        scores = scene_face_scores(self.m, self.cfg)
        path = self.out / "face_scores.npy"
        np.save(path, scores)
        return [path]

    def _build_sdm(self):
        cfg = self.cfg
        mesh = load_mesh(self.m.mesh)
        scores = np.load(self.out / "face_scores.npy")
        res = build_sdm(TriMesh(mesh.vertices, mesh.faces), scores, sdm_config(cfg), _centers(self.m, cfg))
        save_mesh(res.mesh, self.out / "sdm.ply")
        save_planes(res.planes, self.out / "sdm_planes.json")
        report = {
            "faces": int(res.mesh.n_faces), "removed_faces": len(res.removed_faces),
            "filled_faces": len(res.filled_faces), "reopened_faces": int(res.reopened_faces),
            "boundary_edges": int(res.boundary_edge_count), "watertight": bool(res.watertight),
            "unsupported_loops": [str(u) for u in res.unsupported],
            "planes": [{"kind": p.kind, "faces": len(p.inlier_faces)} for p in res.planes],
        }
        (self.out / "sdm_report.json").write_text(json.dumps(report, indent=2) + "\n")
        return [self.out / "sdm.ply", self.out / "sdm_planes.json", self.out / "sdm_report.json"]

    def _control(self):
        sdm = load_mesh(self.out / "sdm.ply")
        p = CannyParams(self.cfg["control.sigma"], self.cfg["control.low"], self.cfg["control.high"])
        (self.out / "control").mkdir(exist_ok=True)

        def one(e):
            W, H = _image_size(e.image)
            depth, normal, _ = render_geometry(sdm, EquirectCamera(W, H), e.pose)
            ctrl = make_control_image(depth, normal, p)
            return write_image(self.out / "control" / f"{e.id}.png", ctrl.edges)

        return self._map(one, self.m.panos)

    def _inpaint_mask(self, e, shape):
        m = _load_mask(e, shape)
        r = self.cfg["inpaint.mask_dilate_px"]
        if r > 0 and m.any():
            pad = np.pad(m, ((0, 0), (r, r)), mode="wrap")
            m = ndimage.binary_dilation(pad, iterations=r)[:, r:-r]
        return m

    def _inpaint(self):
        cfg = self.cfg
        (self.out / "inpainted").mkdir(exist_ok=True)
        client = self.client
        if cfg["inpaint.backend"] == "service" and client is None:
            client = self.client = make_client(cfg)
        elif cfg["inpaint.backend"] not in ("service", "baseline"):
            raise MismatchedInput(f"unknown inpaint.backend {cfg['inpaint.backend']!r}")

        def one(e):
            img = read_rgb(e.image)
            mask = self._inpaint_mask(e, img.shape[:2])
            ctrl = read_image(self.out / "control" / f"{e.id}.png")
            if ctrl.shape != mask.shape:
                raise MismatchedInput(f"control for {e.id} has the wrong size")
            if not mask.any():
                raw = img
            elif cfg["inpaint.backend"] == "service":
                raw = client.inpaint(img, mask, ctrl, cfg["inpaint.prompt"], cfg["inpaint.seed"], upscale=False)
            else:
                raw = baseline_inpaint(img, mask, ctrl if cfg["inpaint.use_control"] else None)
            return write_image(self.out / "inpainted" / f"{e.id}.png", raw)

        return self._map(one, self.m.panos)

    def _superres(self):
        cmd = self.cfg["superres.command"]
        (self.out / "upscaled").mkdir(exist_ok=True)

        def one(e):
            W, H = _image_size(e.image)
            src = self.out / "inpainted" / f"{e.id}.png"
            dst = self.out / "upscaled" / f"{e.id}.png"
            w, h = _image_size(src)
            if (w, h) == (W, H):
                shutil.copyfile(src, dst)
            elif cmd:
                args = shlex.split(cmd.format(input=shlex.quote(str(src)), output=shlex.quote(str(dst)),
                                              width=W, height=H))
                subprocess.run(args, check=True, capture_output=True)
                if _image_size(dst) != (W, H):
                    raise MismatchedInput(f"super-resolution command wrote {_image_size(dst)}, expected {(W, H)}")
            else:
                up = np.array(Image.fromarray(read_rgb(src)).resize((W, H), Image.BICUBIC))
                write_image(dst, up)
            return dst

        return self._map(one, self.m.panos)

    def _blend(self):
        params = BlendParams(self.cfg["blend.feather_px"], self.cfg["blend.dilate_px"])
        (self.out / "panos").mkdir(exist_ok=True)

        def one(e):
            img = read_rgb(e.image)
            mask = self._inpaint_mask(e, img.shape[:2])
            up = read_rgb(self.out / "upscaled" / f"{e.id}.png")
            out = blend_inpaint(img, up, mask, params) if mask.any() else img
            return write_image(self.out / "panos" / f"{e.id}.png", out)

        return self._map(one, self.m.panos)

    def _texture(self):
        sdm = load_mesh(self.out / "sdm.ply")
        planes = load_planes(self.out / "sdm_planes.json")
        panos = []
        for e in self.m.panos:
            img = read_rgb(self.out / "panos" / f"{e.id}.png")
            panos.append(PanoFrame(_camera_for(img.shape), e.pose, img))
        choice = select_views(sdm, panos, self.cfg["texture.visibility_tol_m"])
        tex = bake_texture(sdm, panos, choice, self.cfg["texture.density_px_per_m"], planes,
                           self.cfg["texture.max_atlas"])
        d = self.out / "textured"
        obj = tex.save(d / "sdm.obj")
        views = {"face_view": tex.face_view.tolist(), "unseen_faces": sorted(tex.unseen_faces)}
        (d / "views.json").write_text(json.dumps(views) + "\n")
        return [obj, d / "sdm.mtl", d / "sdm_atlas.png", d / "sdm.ply", d / "views.json"]


def run_pipeline(manifest, out, config: Config | None = None, workers: int | None = None,
                 client: ServiceClient | None = None) -> Path:
    """Run every stage for one scene manifest; returns the output directory."""
    m = manifest if isinstance(manifest, SceneManifest) else load_manifest(manifest)
    return Pipeline(m, out, config, workers, client).run()


def load_run_log(out) -> dict:
    return json.loads((Path(out) / "run.json").read_text())


# ----------------------------------------------------------------------------
# fine-tuning dataset


def split_scenes(scene_ids: list[str], seed: int = 0) -> dict[str, list[str]]:
    """Deterministic 80/10/10 split ordered by sha256(seed:scene id)."""
    order = sorted(scene_ids, key=lambda s: (hashlib.sha256(f"{seed}:{s}".encode()).hexdigest(), s))
    n = len(order)
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return {"train": order[:n_train], "val": order[n_train:n_train + n_val], "test": order[n_train + n_val:]}


def _mask_seed(seed: int, scene: str, pano: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{scene}:{pano}".encode()).digest()[:8], "little")


def emit_finetune_dataset(manifests: list, out, config: Config | None = None) -> Path:
    """Control image, composite mask and masked image per pano of unfurnished scenes.

    Refuses any scene whose panos carry a non-empty furniture mask.  Writes
    ``index.json`` listing every sample with its split.
    """
    cfg = config or Config()
    out = Path(out)
    scenes = [m if isinstance(m, SceneManifest) else load_manifest(m) for m in manifests]
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise MismatchedInput(f"scene ids are not unique: {ids}")
    for s in scenes:
        for e in s.panos:
            if e.mask is not None:
                if not e.mask.exists():
                    raise FileNotFoundError(f"missing mask file {e.mask}")
                if read_mask(e.mask).any():
                    raise RefusesFurnished(f"pano {s.scene_id}/{e.id} has furniture pixels in {e.mask}")
    seed = cfg["dataset.seed"]
    split = split_scenes(ids, seed)
    split_of = {sid: name for name, group in split.items() for sid in group}
    p = CannyParams(cfg["control.sigma"], cfg["control.low"], cfg["control.high"])
    samples = []
    for s in sorted(scenes, key=lambda s: s.scene_id):
        mesh = load_mesh(s.mesh)
        for e in s.panos:
            img = read_rgb(e.image)
            cam = _camera_for(img.shape)
            depth, normal, _ = render_geometry(mesh, cam, e.pose)
            ctrl = make_control_image(depth, normal, p)
            spec = MaskSpec((cfg["dataset.n_circles_min"], cfg["dataset.n_circles_max"]),
                            (cfg["dataset.radius_frac_min"], cfg["dataset.radius_frac_max"]),
                            _mask_seed(seed, s.scene_id, e.id))
            mask = generate_composite_mask(cam, spec)
            masked = img.copy()
            masked[mask] = 0
            d = out / split_of[s.scene_id] / s.scene_id
            rec = {"split": split_of[s.scene_id], "scene": s.scene_id, "pano": e.id}
            for kind, arr in (("image", img), ("control", ctrl.edges), ("mask", mask), ("masked_image", masked)):
                path = write_image(d / f"{e.id}_{kind}.png", arr)
                rec[kind] = str(path.relative_to(out))
            samples.append(rec)
    index = {"seed": seed, "splits": split,
             "counts": {k: len(v) for k, v in split.items()}, "samples": samples}
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return out / "index.json"
