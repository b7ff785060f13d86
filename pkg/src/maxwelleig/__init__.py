"""Adaptive multilevel edge-element eigensolver for 3D cavity problems."""

from .mesh import (
    DomainSpec,
    MeshHierarchy,
    TetMesh,
    bisect,
    box_mesh,
    fichera_mesh,
    generate_domain,
    read_mesh,
    uniform_refine,
    write_mesh,
)

__version__ = "0.1.0"

__all__ = [
    "DomainSpec",
    "MeshHierarchy",
    "TetMesh",
    "bisect",
    "box_mesh",
    "fichera_mesh",
    "generate_domain",
    "read_mesh",
    "uniform_refine",
    "write_mesh",
    "__version__",
]
