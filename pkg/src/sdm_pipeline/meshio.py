"""OBJ (+MTL) and PLY reading/writing for :class:`TriMesh`.

Per-face labels travel in a PLY face property ``label`` (uint8, 0 unknown,
1 structure, 2 furniture) and plane ids in ``plane`` (int32, -1 none).
UVs use the MeshLab ``texcoord`` list property plus a ``TextureFile``
comment naming the atlas image.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .mesh import TriMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_mesh(path) -> TriMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        mesh = _read_ply(path)
    elif suffix == ".obj":
        mesh = _read_obj(path)
    else:
        raise ParseError(f"unsupported mesh format: {path.suffix}")
    return mesh.validate()


def save_mesh(mesh: TriMesh, path, binary: bool = True) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".ply":
            _write_ply(mesh, path, binary)
        elif suffix == ".obj":
            _write_obj(mesh, path)
        else:
            raise ValueError(f"unsupported mesh format: {path.suffix}")
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# PLY


def _parse_ply_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise ParseError("missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop, dtype) | (prop, ("list", count_t, item_t))])
    comments = []
    while True:
        line = f.readline()
        if not line:
            raise ParseError("unterminated PLY header")
        parts = line.decode("ascii", errors="replace").split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            fmt = parts[1]
        elif key == "comment" or key == "obj_info":
            comments.append(" ".join(parts[1:]))
        elif key == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif key == "property":
            if not elements:
                raise ParseError("property before element")
            try:
                if parts[1] == "list":
                    prop = (parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    prop = (parts[2], _PLY_TYPES[parts[1]])
            except (KeyError, IndexError) as exc:
                raise ParseError(f"bad property line: {line!r}") from exc
            elements[-1][2].append(prop)
        elif key == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ParseError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, comments


def _read_ply(path: Path) -> TriMesh:
    with open(path, "rb") as f:
        try:
            fmt, elements, comments = _parse_ply_header(f)
        except (ValueError, UnicodeError) as exc:
            raise ParseError(str(exc)) from exc
        body = f.read()
    try:
        if fmt == "ascii":
            data = _read_ply_ascii(body, elements)
        else:
            data = _read_ply_binary(body, elements, "<" if fmt.endswith("little_endian") else ">")
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed PLY body: {exc}") from exc

    vert = data.get("vertex")
    face = data.get("face")
    if vert is None or not all(k in vert for k in "xyz"):
        raise ParseError("PLY lacks vertex x/y/z")
    vertices = np.stack([np.asarray(vert[k], dtype=np.float64) for k in "xyz"], 1)
    faces = np.zeros((0, 3), dtype=np.int64)
    labels = planes = uvs = None
    if face is not None:
        key = "vertex_indices" if "vertex_indices" in face else "vertex_index"
        if key not in face:
            raise ParseError("PLY face element lacks vertex_indices")
        polys = face[key]
        tri, src = _fan(polys)
        faces = tri
        if "label" in face:
            labels = np.asarray(face["label"])[src]
        if "plane" in face:
            planes = np.asarray(face["plane"])[src]
        if "texcoord" in face:
            tc = face["texcoord"]
            if all(len(t) == 6 for t in tc) and len(tc) == len(faces):
                uvs = np.asarray(np.stack(tc) if len(tc) else np.zeros((0, 6)), dtype=np.float64).reshape(-1, 3, 2)
    atlas = atlas_name = None
    for c in comments:
        m = re.match(r"TextureFile\s+(\S+)", c)
        if m:
            atlas_name = m.group(1)
            atlas = _maybe_load_image(path.parent / atlas_name)
    return TriMesh(vertices, faces, face_labels=labels, face_plane=planes, uvs=uvs,
                   atlas=atlas, atlas_name=atlas_name)


def _fan(polys):
    """Fan-triangulate polygon index lists; returns faces and source-poly index."""
    if isinstance(polys, np.ndarray) and polys.ndim == 2 and polys.shape[1] == 3:
        return polys.astype(np.int64), np.arange(len(polys))
    tris, src = [], []
    for i, p in enumerate(polys):
        p = list(p)
        if len(p) < 3:
            raise ParseError(f"face {i} has fewer than 3 vertices")
        for k in range(1, len(p) - 1):
            tris.append((p[0], p[k], p[k + 1]))
            src.append(i)
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3), np.asarray(src, dtype=np.int64)


def _read_ply_ascii(body: bytes, elements):
    tokens = body.split()
    pos = 0
    out = {}
    for name, count, props in elements:
        cols = {p: [] for p, _ in props}
        for _ in range(count):
            for p, t in props:
                if isinstance(t, tuple):
                    n = int(tokens[pos])
                    pos += 1
                    cols[p].append([float(x) if "f" in t[2] else int(x) for x in tokens[pos:pos + n]])
                    pos += n
                else:
                    cols[p].append(tokens[pos])
                    pos += 1
        for p, t in props:
            if not isinstance(t, tuple):
                cols[p] = np.asarray(cols[p], dtype=np.float64).astype(t) if cols[p] else np.zeros(0, t)
            elif all(len(x) == 3 for x in cols[p]) and p in ("vertex_indices", "vertex_index"):
                cols[p] = np.asarray(cols[p], dtype=np.int64).reshape(-1, 3)
        out[name] = cols
    return out


def _read_ply_binary(body: bytes, elements, endian: str):
    pos = 0
    out = {}
    for name, count, props in elements:
        has_list = any(isinstance(t, tuple) for _, t in props)
        if not has_list:
            dt = np.dtype([(p, endian + t) for p, t in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
            pos += dt.itemsize * count
            out[name] = {p: arr[p].copy() for p, _ in props}
            continue
        # fast path: every list has length 3 (triangles) or 6 (texcoords)
        fixed = []
        for p, t in props:
            if isinstance(t, tuple):
                n = 6 if p == "texcoord" else 3
                fixed.append((p + "__n", endian + t[1]))
                fixed.append((p, endian + t[2], (n,)))
            else:
                fixed.append((p, endian + t))
        dt = np.dtype(fixed)
        if count and pos + dt.itemsize * count <= len(body):
            arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
            ok = all(
                np.all(arr[p + "__n"] == (6 if p == "texcoord" else 3))
                for p, t in props if isinstance(t, tuple)
            )
            if ok:
                pos += dt.itemsize * count
                out[name] = {p: arr[p].copy() for p, _ in props}
                continue
        cols = {p: [] for p, _ in props}
        for _ in range(count):
            for p, t in props:
                if isinstance(t, tuple):
                    cdt = np.dtype(endian + t[1])
                    n = int(np.frombuffer(body, cdt, 1, pos)[0])
                    pos += cdt.itemsize
                    idt = np.dtype(endian + t[2])
                    cols[p].append(np.frombuffer(body, idt, n, pos).tolist())
                    pos += idt.itemsize * n
                else:
                    sdt = np.dtype(endian + t)
                    cols[p].append(np.frombuffer(body, sdt, 1, pos)[0])
                    pos += sdt.itemsize
        for p, t in props:
            if not isinstance(t, tuple):
                cols[p] = np.asarray(cols[p])
        out[name] = cols
    return out


def _write_ply(mesh: TriMesh, path: Path, binary: bool) -> None:
    nf = mesh.n_faces
    header = ["ply", "format " + ("binary_little_endian 1.0" if binary else "ascii 1.0")]
    if mesh.uvs is not None and mesh.atlas is not None:
        atlas_name = mesh.atlas_name or (path.stem + "_atlas.png")
        header.append(f"comment TextureFile {atlas_name}")
    else:
        atlas_name = None
    header += [
        f"element vertex {mesh.n_vertices}",
        "property double x", "property double y", "property double z",
        f"element face {nf}",
        "property list uchar int vertex_indices",
    ]
    fields = [("n", "u1"), ("vertex_indices", "<i4", (3,))]
    if mesh.face_labels is not None:
        header.append("property uchar label")
        fields.append(("label", "u1"))
    if mesh.face_plane is not None:
        header.append("property int plane")
        fields.append(("plane", "<i4"))
    if mesh.uvs is not None:
        header.append("property list uchar float texcoord")
        fields += [("tn", "u1"), ("texcoord", "<f4", (6,))]
    header.append("end_header")

    rec = np.zeros(nf, dtype=np.dtype(fields))
    rec["n"] = 3
    rec["vertex_indices"] = mesh.faces
    if mesh.face_labels is not None:
        rec["label"] = mesh.face_labels
    if mesh.face_plane is not None:
        rec["plane"] = mesh.face_plane
    if mesh.uvs is not None:
        rec["tn"] = 6
        rec["texcoord"] = mesh.uvs.reshape(-1, 6)

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            f.write(rec.tobytes())
        else:
            lines = [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
            for r in rec:
                parts = ["3", *map(str, r["vertex_indices"])]
                if mesh.face_labels is not None:
                    parts.append(str(r["label"]))
                if mesh.face_plane is not None:
                    parts.append(str(r["plane"]))
                if mesh.uvs is not None:
                    parts.append("6")
                    parts += [repr(float(x)) for x in r["texcoord"]]
                lines.append(" ".join(parts))
            f.write(("\n".join(lines) + "\n").encode("ascii"))
    if atlas_name is not None:
        _save_image(path.parent / atlas_name, mesh.atlas)


# ----------------------------------------------------------------------------
# OBJ


def _obj_index(tok: str, n: int) -> int:
    i = int(tok)
    return i - 1 if i > 0 else n + i


def _read_obj(path: Path) -> TriMesh:
    verts, tex = [], []
    polys, tpolys = [], []
    mtllibs = []
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                key = parts[0]
                if key == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ParseError(f"line {lineno}: vertex needs 3 coordinates")
                elif key == "vt":
                    tex.append([float(x) for x in parts[1:3]])
                elif key == "f":
                    vi, ti = [], []
                    for tok in parts[1:]:
                        sub = tok.split("/")
                        vi.append(_obj_index(sub[0], len(verts)))
                        if len(sub) > 1 and sub[1]:
                            ti.append(_obj_index(sub[1], len(tex)))
                    if len(vi) < 3:
                        raise ParseError(f"line {lineno}: face needs 3 vertices")
                    polys.append(vi)
                    tpolys.append(ti if len(ti) == len(vi) else None)
                elif key == "mtllib":
                    mtllibs.append(" ".join(parts[1:]))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc

    faces, uvs = [], []
    use_uv = bool(tpolys) and all(t is not None for t in tpolys)
    for p, t in zip(polys, tpolys):
        for k in range(1, len(p) - 1):
            faces.append((p[0], p[k], p[k + 1]))
            if use_uv:
                uvs.append((t[0], t[k], t[k + 1]))
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    mesh_uvs = None
    if use_uv and faces.size:
        tex = np.asarray(tex, dtype=np.float64).reshape(-1, 2)
        ti = np.asarray(uvs, dtype=np.int64)
        if ti.min() < 0 or ti.max() >= len(tex):
            raise ValidationError("texture coordinate index out of range")
        mesh_uvs = tex[ti]
    atlas = atlas_name = None
    for lib in mtllibs:
        mtl = path.parent / lib
        if mtl.exists():
            for line in mtl.read_text(errors="replace").splitlines():
                parts = line.split()
                if parts and parts[0] == "map_Kd":
                    atlas_name = parts[-1]
                    atlas = _maybe_load_image(path.parent / atlas_name)
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), faces, uvs=mesh_uvs,
                   atlas=atlas, atlas_name=atlas_name)


def _write_obj(mesh: TriMesh, path: Path) -> None:
    lines = []
    textured = mesh.uvs is not None
    if textured:
        mtl_name = path.stem + ".mtl"
        atlas_name = mesh.atlas_name or (path.stem + "_atlas.png")
        lines.append(f"mtllib {mtl_name}")
    lines += ["v %r %r %r" % tuple(map(float, v)) for v in mesh.vertices]
    if textured:
        lines += ["vt %r %r" % tuple(map(float, t)) for t in mesh.uvs.reshape(-1, 2)]
        lines.append("usemtl atlas")
        for i, (a, b, c) in enumerate(mesh.faces.tolist()):
            t = 3 * i
            lines.append(f"f {a + 1}/{t + 1} {b + 1}/{t + 2} {c + 1}/{t + 3}")
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    if textured:
        with open(path.parent / mtl_name, "w") as f:
            f.write(f"newmtl atlas\nKa 1 1 1\nKd 1 1 1\nmap_Kd {atlas_name}\n")
        if mesh.atlas is not None:
            _save_image(path.parent / atlas_name, mesh.atlas)


def _maybe_load_image(path):
    if not os.path.exists(path):
        return None
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _save_image(path, arr):
    from PIL import Image

    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
