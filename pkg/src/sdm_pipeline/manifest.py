"""Scene manifests: a mesh plus posed panoramas (and optional furniture masks).

JSON object form::

    {"mesh": "mesh.ply", "panos": [{"id": "pano_000", "image": "pano_000.png",
      "mask": "mask_000.png", "position": [x, y, z], "rotation_wxyz": [w, x, y, z]}]}

A bare list of pano entries is also accepted; the mesh is then ``mesh.ply``
next to the manifest.  Relative paths resolve against the manifest's folder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .panorama import Pose


@dataclass
class PanoEntry:
    id: str
    image: Path
    mask: Path | None
    pose: Pose


@dataclass
class SceneManifest:
    path: Path
    mesh: Path
    panos: list

    @property
    def scene_id(self) -> str:
        parent = self.path.parent
        if parent.name in ("empty", "furnished") and parent.parent.name:
            return parent.parent.name
        return parent.name or "scene"


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent
    if isinstance(data, list):
        mesh, entries = "mesh.ply", data
    elif isinstance(data, dict):
        mesh, entries = data.get("mesh", "mesh.ply"), data.get("panos")
    else:
        raise ValidationError(f"{path}: manifest must be an object or a list")
    if not isinstance(entries, list) or not entries:
        raise ValidationError(f"{path}: manifest lists no panoramas")
    panos, seen = [], set()
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "image" not in e or "position" not in e:
            raise ValidationError(f"{path}: pano entry {i} needs 'image' and 'position'")
        pid = str(e.get("id", f"pano_{i:03d}"))
        if pid in seen:
            raise ValidationError(f"{path}: duplicate pano id {pid!r}")
        seen.add(pid)
        pos = np.asarray(e["position"], dtype=np.float64)
        if pos.shape != (3,):
            raise ValidationError(f"{path}: pano {pid} position must have 3 numbers")
        pose = Pose.from_wxyz(pos, e.get("rotation_wxyz", [1.0, 0.0, 0.0, 0.0]))
        mask = base / e["mask"] if e.get("mask") else None
        panos.append(PanoEntry(pid, base / e["image"], mask, pose))
    return SceneManifest(path, base / mesh, panos)
