"""Cut discontinuous Galerkin solver for 2D advection-reaction problems.

The physical domain is described implicitly by a level set embedded in a
structured background mesh.  Upwind DG forms are integrated over the cut
geometry and ghost penalties stabilize the scheme near the boundary.
"""

from cutdg.levelset import Circle, Flower, HalfPlane, Intersection, Translate, WavyBand
from cutdg.mesh import (
    ActiveMesh,
    BackgroundMesh,
    ElementClass,
    MeshError,
    build_background,
    classify_elements,
    extract_active,
)
from cutdg.quadrature import QuadratureSet

__all__ = [
    "ActiveMesh",
    "BackgroundMesh",
    "Circle",
    "ElementClass",
    "Flower",
    "HalfPlane",
    "Intersection",
    "MeshError",
    "QuadratureSet",
    "Translate",
    "WavyBand",
    "build_background",
    "classify_elements",
    "extract_active",
]

__version__ = "0.1.0"
