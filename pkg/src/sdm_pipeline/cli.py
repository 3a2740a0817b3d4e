"""``sdm-pipeline`` command line.

Exit codes: 0 success, 1 bad input (arguments, files, specs), 2 a pipeline
stage or backend failed.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .config import Config
from .errors import (AtlasOverflow, BackendError, BackendUnavailable, SdmError, StageFailure)
from .imageio import read_image, read_mask, read_rgb, write_image

log = logging.getLogger("sdm_pipeline")

EXIT_OK, EXIT_INPUT, EXIT_STAGE = 0, 1, 2
_STAGE_ERRORS = (StageFailure, BackendError, BackendUnavailable, AtlasOverflow)


def _config(path) -> Config:
    return Config.load(path) if path else Config()


def _dump(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    click.echo(text)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="key = value config file")


@click.group()
@click.option("-v", "--verbose", count=True, help="more logging (repeatable)")
def cli(verbose):
    """Defurnish indoor scans: SDM, control images, inpainting, texture."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              help="scene spec JSON (one scene, or {\"scenes\": [...]})")
@click.option("--suite", type=click.Choice(["desk"]), help="built-in scene suite")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--workers", type=int, default=1, show_default=True)
def synth(spec_path, suite, seed, out, workers):
    """Generate furnished/empty synthetic scenes."""
    from .synth import SceneSpec, desk_suite, generate_dataset

    if bool(spec_path) == bool(suite):
        raise click.UsageError("give exactly one of --spec or --suite")
    if suite:
        specs = desk_suite(seed)
    else:
        data = json.loads(Path(spec_path).read_text())
        items = data["scenes"] if isinstance(data, dict) and "scenes" in data else [data]
        specs = [SceneSpec.from_json(d) for d in items]
    dirs = generate_dataset(specs, out, workers)
    click.echo(f"wrote {len(dirs)} scene(s) to {out}")


@cli.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mesh", "mesh_path", type=click.Path(exists=True, dir_okay=False),
              help="mesh to render (default: the manifest's mesh)")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
def control(manifest, mesh_path, out, config_path):
    """Render depth/normal Canny control images for every pano."""
    from .control import CannyParams, make_control_image
    from .manifest import load_manifest
    from .meshio import load_mesh
    from .panorama import EquirectCamera, render_geometry
    from .pipeline import _image_size

    cfg = _config(config_path)
    m = load_manifest(manifest)
    mesh = load_mesh(mesh_path or m.mesh)
    p = CannyParams(cfg["control.sigma"], cfg["control.low"], cfg["control.high"])
    for e in m.panos:
        W, H = _image_size(e.image)
        depth, normal, _ = render_geometry(mesh, EquirectCamera(W, H), e.pose)
        write_image(Path(out) / f"{e.id}.png", make_control_image(depth, normal, p).edges)
    click.echo(f"wrote {len(m.panos)} control image(s) to {out}")


@cli.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="output mesh (.ply or .obj)")
@config_option
def sdm(manifest, out, config_path):
    """Build the simplified defurnished mesh of a scene."""
    from .manifest import load_manifest
    from .meshio import save_mesh
    from .pipeline import build_scene_sdm

    res = build_scene_sdm(load_manifest(manifest), _config(config_path))
    save_mesh(res.mesh, out)
    click.echo(json.dumps({"faces": int(res.mesh.n_faces), "removed": len(res.removed_faces),
                           "filled": len(res.filled_faces), "boundary_edges": int(res.boundary_edge_count)}))


@cli.command()
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--control", "control_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--backend", type=click.Choice(["baseline", "service"]), default=None)
@click.option("--endpoint", default=None, help="service base URL")
@click.option("--prompt", default=None)
@click.option("--seed", type=int, default=None)
@config_option
def inpaint(image, mask_path, control_path, out, backend, endpoint, prompt, seed, config_path):
    """Inpaint one pano and blend the result over it."""
    from .inpaint import BlendParams, InpaintRequest
    from .inpaint import inpaint as run_inpaint
    from .pipeline import make_client

    cfg = _config(config_path)
    if backend:
        cfg.set("inpaint.backend", backend)
    if endpoint:
        cfg.set("inpaint.endpoint", endpoint)
    req = InpaintRequest(read_rgb(image), read_mask(mask_path), read_image(control_path),
                         prompt if prompt is not None else cfg["inpaint.prompt"], cfg["inpaint.backend"],
                         seed if seed is not None else cfg["inpaint.seed"])
    client = make_client(cfg) if req.backend == "service" else None
    try:
        result = run_inpaint(req, client, BlendParams(cfg["blend.feather_px"], cfg["blend.dilate_px"]))
    finally:
        if client:
            client.close()
    write_image(out, result)
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--scene", "manifest", required=True, type=click.Path(exists=True, dir_okay=False),
              help="scene manifest (poses)")
@click.option("--sdm", "sdm_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--panos", "pano_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="folder with <pano id>.png defurnished panos")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="output .obj path")
@config_option
def texture(manifest, sdm_path, pano_dir, out, config_path):
    """Bake an atlas for a mesh from posed panoramas."""
    from .manifest import load_manifest
    from .meshio import load_mesh
    from .panorama import EquirectCamera, PanoFrame
    from .texture import bake_texture, select_views

    cfg = _config(config_path)
    m = load_manifest(manifest)
    mesh = load_mesh(sdm_path)
    panos = []
    for e in m.panos:
        img = read_rgb(Path(pano_dir) / f"{e.id}.png")
        panos.append(PanoFrame(EquirectCamera(img.shape[1], img.shape[0]), e.pose, img))
    choice = select_views(mesh, panos, cfg["texture.visibility_tol_m"])
    tex = bake_texture(mesh, panos, choice, cfg["texture.density_px_per_m"], None, cfg["texture.max_atlas"])
    path = tex.save(out)
    click.echo(f"wrote {path} ({tex.atlas.shape[1]}x{tex.atlas.shape[0]} atlas, {len(tex.unseen_faces)} unseen faces)")


def _mask_for(mask_dir: Path, name: str):
    """Mask named like the image, or the dataset's mask_### twin of pano_###."""
    cands = [mask_dir / name]
    if name.startswith("pano_"):
        cands.insert(0, mask_dir / ("mask_" + name[len("pano_"):]))
    return next((p for p in cands if p.exists()), None)


@cli.command(name="eval")
@click.option("--pred-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--target-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mask-dir", type=click.Path(exists=True, file_okay=False))
@click.option("--mesh-pred", type=click.Path(exists=True, dir_okay=False))
@click.option("--mesh-ref", type=click.Path(exists=True, dir_okay=False))
@click.option("--samples", type=int, default=100_000, show_default=True)
@click.option("--symmetric", is_flag=True, help="symmetric cloud-to-mesh RMSE")
@click.option("--out", type=click.Path(dir_okay=False), help="also write the report here")
def eval_cmd(pred_dir, target_dir, mask_dir, mesh_pred, mesh_ref, samples, symmetric, out):
    """Image metrics for each prediction PNG against the same name in the target dir."""
    from .errors import MissingOutput
    from .metrics import cloud_to_mesh_rmse, image_metrics

    names = sorted(p.name for p in Path(pred_dir).glob("*.png"))
    if not names:
        raise MissingOutput(f"no PNG files in {pred_dir}")
    report = {"images": {}}
    for n in names:
        pred = Path(pred_dir) / n
        if not (Path(target_dir) / n).exists():
            raise MissingOutput(f"no target for {n} in {target_dir}")
        mask = None
        if mask_dir:
            mp = _mask_for(Path(mask_dir), n)
            mask = read_mask(mp) if mp else None
            if mask is not None and not mask.any():
                mask = None
        report["images"][n] = image_metrics(read_rgb(pred), read_rgb(Path(target_dir) / n), mask).to_dict()
    keys = sorted(set().union(*[r["values"] for r in report["images"].values()]))
    report["mean"] = {}
    for k in keys:
        vals = [r["values"][k] for r in report["images"].values() if k in r["values"]]
        vals = [float("inf") if v == "inf" else v for v in vals]
        mean = float(np.mean(vals))
        report["mean"][k] = "inf" if np.isinf(mean) else mean
    if bool(mesh_pred) != bool(mesh_ref):
        raise click.UsageError("--mesh-pred and --mesh-ref go together")
    if mesh_pred:
        from .meshio import load_mesh

        report["rmse_m"] = cloud_to_mesh_rmse(load_mesh(mesh_pred), load_mesh(mesh_ref), samples,
                                              symmetric=symmetric)
    _dump(report, out)


@cli.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--samples", type=int, default=20_000, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False))
def score(dataset, run_dir, samples, out):
    """Score pipeline outputs against a synthetic dataset's empty ground truth."""
    from .synth import score_run, score_to_json

    _dump(score_to_json(score_run(dataset, run_dir, samples)), out)


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), help="scene manifest")
@click.option("--dataset", type=click.Path(exists=True, file_okay=False),
              help="synthetic dataset: run every scene_###/furnished")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--workers", type=int, default=None, help="per-pano worker pool size")
@config_option
def run(manifest, dataset, out, workers, config_path):
    """Run the full pipeline (cached per stage)."""
    from .pipeline import load_run_log, run_pipeline
    from .synth import scene_dirs

    if bool(manifest) == bool(dataset):
        raise click.UsageError("give exactly one of --manifest or --dataset")
    cfg = _config(config_path)
    jobs = [(Path(manifest), Path(out))] if manifest else \
        [(d / "furnished" / "poses.json", Path(out) / d.name) for d in scene_dirs(dataset)]
    for mf, od in jobs:
        run_pipeline(mf, od, cfg, workers)
        rec = load_run_log(od)
        stages = ", ".join(f"{s['name']}{'*' if s['cached'] else ''}" for s in rec["stages"])
        click.echo(f"{od}: {rec['total_wall_time_s']:.2f}s [{stages}] (* = cached)")


@cli.command(name="emit-dataset")
@click.option("--scenes", "scene_paths", required=True, multiple=True, type=click.Path(exists=True),
              help="manifest file or synthetic dataset folder (repeatable)")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@config_option
def emit_dataset(scene_paths, out, seed, config_path):
    """Export control/mask/masked-image triples from unfurnished scenes."""
    from .pipeline import emit_finetune_dataset
    from .synth import scene_dirs

    cfg = _config(config_path)
    if seed is not None:
        cfg.set("dataset.seed", seed)
    manifests = []
    for p in map(Path, scene_paths):
        manifests += [d / "empty" / "poses.json" for d in scene_dirs(p)] if p.is_dir() else [p]
    index = emit_finetune_dataset(manifests, out, cfg)
    counts = json.loads(index.read_text())["counts"]
    click.echo(f"wrote {index} (train {counts['train']}, val {counts['val']}, test {counts['test']} scenes)")


@cli.command()
@click.option("--pred", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--which", type=click.Choice(["log", "fftmax", "both"]), default="both", show_default=True)
@click.option("--sigma", type=float, default=1.0, show_default=True)
def loss(pred, target, which, sigma):
    """Print the LoG contrast and/or FFTMax loss of two images (scaled to [0, 1])."""
    from .losses import contrast_loss, fftmax_loss

    p = read_image(pred).astype(np.float64) / 255.0
    t = read_image(target).astype(np.float64) / 255.0
    if which in ("log", "both"):
        click.echo(f"log {contrast_loss(p, t, sigma):.12g}")
    if which in ("fftmax", "both"):
        click.echo(f"fftmax {fftmax_loss(p, t):.12g}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="sdm-pipeline", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_INPUT
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT
    except _STAGE_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_STAGE
    except (SdmError, OSError, ValueError, json.JSONDecodeError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
