"""Joint refinement and relocation of triangle meshes driven by two agent swarms."""

from .mesh import Mesh, Polygon, RefinementMaps, detect_tangled, rgb_refine, uniform_refine
from .domains import generate_domain

__version__ = "0.1.0"

__all__ = [
    "Mesh",
    "Polygon",
    "RefinementMaps",
    "detect_tangled",
    "rgb_refine",
    "uniform_refine",
    "generate_domain",
]
