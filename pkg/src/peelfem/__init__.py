"""Tetrahedral FEM EEG forward modelling with source-space peeling and localisation studies."""

from .exceptions import ConfigError, MeshError, NumericalError
from .inverse import DipoleScan, Measurement, Reconstruction, SLORETA
from .mesh import TetrahedralMesh, extract_surface, refine_compartments
from .peeling import PeelConfig, PeelResult, effective_depth, peel, peel_exhaustive
from .sphere import ShellSpec, analytic_sphere_leadfield, generate_sphere_mesh

__all__ = [
    "ConfigError", "MeshError", "NumericalError",
    "DipoleScan", "Measurement", "Reconstruction", "SLORETA",
    "TetrahedralMesh", "extract_surface", "refine_compartments",
    "PeelConfig", "PeelResult", "effective_depth", "peel", "peel_exhaustive",
    "ShellSpec", "analytic_sphere_leadfield", "generate_sphere_mesh",
]
