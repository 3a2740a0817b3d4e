"""Simplified Defurnished Mesh generation."""

from .build import SdmConfig, build_sdm, labels_from_scores, propagate_unknown
from .decompose import PlanarDecomposition, decompose_planes
from .holes import SdmResult, fill_holes_plane_extension, remove_furniture_faces
from .triangulate import triangulate_polygon

__all__ = [
    "PlanarDecomposition", "SdmConfig", "SdmResult", "build_sdm", "decompose_planes",
    "fill_holes_plane_extension", "labels_from_scores", "propagate_unknown",
    "remove_furniture_faces", "triangulate_polygon",
]
