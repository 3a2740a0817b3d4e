"""Single key-value configuration file with dotted keys.

Format: one ``key = value`` per line, ``#`` comments, optional ``[section]``
headers that prefix the following keys (``[sdm]`` + ``dist_tol_m`` is
``sdm.dist_tol_m``).  Values are typed by the default they override.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ValidationError

DEFAULTS: dict[str, object] = {
    # furniture mask projection
    "masks.threshold": 0.5,
    "masks.erosion_px": 0,
    # simplified defurnished mesh
    "sdm.angle_tol_deg": 5.0,
    "sdm.dist_tol_m": 0.02,
    "sdm.min_region_faces": 20,
    "sdm.refit_every": 64,
    "sdm.label_threshold": 0.5,
    "sdm.plane_snap_radius_m": 0.5,
    "sdm.preserve_openings": True,
    "sdm.opening_min_views": 2,
    "sdm.opening_tol_m": 0.01,
    # control images
    "control.sigma": 1.4,
    "control.low": 70.0,
    "control.high": 90.0,
    # inpainting
    "inpaint.backend": "baseline",
    "inpaint.endpoint": "",
    "inpaint.timeout_s": 30.0,
    "inpaint.retries": 2,
    "inpaint.max_concurrency": 4,
    "inpaint.downscale_factor": 4,
    "inpaint.prompt": "an empty room",
    "inpaint.seed": 0,
    "inpaint.use_control": True,
    "inpaint.mask_dilate_px": 0,
    # blending
    "blend.dilate_px": 8.0,
    "blend.feather_px": 16.0,
    # external super-resolution: command template with {input} {output} {width} {height}
    "superres.command": "",
    # texture baking
    "texture.density_px_per_m": 100.0,
    "texture.max_atlas": 8192,
    "texture.visibility_tol_m": 0.01,
    # execution
    "pipeline.workers": 4,
    # fine-tuning dataset emission
    "dataset.seed": 0,
    "dataset.n_circles_min": 1,
    "dataset.n_circles_max": 10,
    "dataset.radius_frac_min": 0.05,
    "dataset.radius_frac_max": 0.25,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValidationError(f"config key {key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


class Config:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value):
        if key not in DEFAULTS:
            raise ValidationError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        self.values[key] = _coerce(key, value, default) if isinstance(value, str) else type(default)(value)

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def subset(self, *prefixes: str) -> dict:
        return {k: v for k, v in sorted(self.values.items()) if any(k.startswith(p + ".") for p in prefixes)}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "Config":
        cfg = cls()
        section = ""
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                continue
            if "=" not in line:
                raise ValidationError(f"{source}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if section and not key.startswith(section + "."):
                key = f"{section}.{key}"
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.parse(path.read_text(), str(path))
