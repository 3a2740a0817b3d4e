"""PNG helpers shared by the pipeline, the CLI and the service client."""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParseError


def to_uint8(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a
    if a.dtype == bool:
        return a.astype(np.uint8) * 255
    return np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_png(img) -> bytes:
    a = to_uint8(img)
    buf = io.BytesIO()
    # fixed settings so identical arrays give identical bytes
    Image.fromarray(a).save(buf, format="PNG", compress_level=6, optimize=False)
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGBA" if "A" in im.mode else "RGB")
                if im.mode == "RGBA":
                    im = im.convert("RGB")
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise ParseError(f"not a readable PNG: {exc}") from exc


def png_b64(img) -> str:
    return base64.b64encode(encode_png(img)).decode("ascii")


def from_png_b64(text: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad base64 payload: {exc}") from exc
    return decode_png(raw)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return decode_png(path.read_bytes())


def read_rgb(path) -> np.ndarray:
    a = read_image(path)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    return a


def read_mask(path) -> np.ndarray:
    a = read_image(path)
    if a.ndim == 3:
        a = a.max(axis=2)
    return a > 127


def write_image(path, img) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(img))
    return path
