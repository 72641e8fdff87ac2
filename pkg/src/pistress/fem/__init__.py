from .mesh import (
    Mesh,
    MeshError,
    build_mesh_cantilever,
    build_mesh_lshape,
    build_mesh_truss_like,
    load_mesh,
    save_mesh,
)
from .solver import (
    load_nodes,
    LoadCase,
    Material,
    SolveResult,
    SolverError,
    StressField,
    load_stress_field,
    save_stress_field,
    solve,
    solve_with_details,
)

__all__ = [
    "Mesh",
    "MeshError",
    "build_mesh_cantilever",
    "build_mesh_lshape",
    "build_mesh_truss_like",
    "load_mesh",
    "save_mesh",
    "LoadCase",
    "Material",
    "SolveResult",
    "SolverError",
    "StressField",
    "load_stress_field",
    "save_stress_field",
    "solve",
    "solve_with_details",
    "load_nodes",
]
