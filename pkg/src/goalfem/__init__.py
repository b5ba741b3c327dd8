"""Goal-oriented space-time adaptive finite elements for parabolic problems.

Low-order continuous finite elements in space (bilinear/biquadratic on
quadtree meshes), piecewise-constant discontinuous Galerkin stepping in time,
dual-weighted residual error estimation localized by a partition of unity,
and fixed-rate space-time adaptivity.
"""

__version__ = "0.1.0"

from .mesh import Cell, MeshError, SpatialMesh, SpaceTimeMesh, TemporalMesh

__all__ = [
    "Cell",
    "MeshError",
    "SpatialMesh",
    "SpaceTimeMesh",
    "TemporalMesh",
    "__version__",
]
