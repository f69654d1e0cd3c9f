"""Monotone P1 finite element solver for parabolic HJB equations with mixed
Dirichlet / Robin / time-dependent Robin boundary conditions."""

from .mesh import (
    INTERIOR, TIME_ROBIN, ROBIN, DIRICHLET,
    Mesh, MeshError, ConeError, AcutenessReport, BoundaryRegionSpec,
    build_mesh, load_mesh, write_mesh, crisscross_mesh, refine,
    certify_acuteness, find_dini_stencil, dini_stencil_weights,
)

__version__ = "0.1.0"
