"""Defurnishing of indoor scans: simplified defurnished meshes, control-guided
panorama inpainting, texture re-baking and a synthetic benchmark."""

from .errors import SdmError
from .mesh import FURNITURE, STRUCTURE, UNKNOWN, TriMesh
from .meshio import load_mesh, save_mesh
from .panorama import EquirectCamera, PanoFrame, Pose, pixel_to_ray, point_to_pixel, render_geometry

__version__ = "0.1.0"

__all__ = [
    "SdmError", "TriMesh", "UNKNOWN", "STRUCTURE", "FURNITURE", "load_mesh", "save_mesh",
    "EquirectCamera", "PanoFrame", "Pose", "pixel_to_ray", "point_to_pixel", "render_geometry",
]
