"""Plane-stress linear elasticity on quad4/tri3 meshes.

Assembly is vectorized over elements; the reduced system is solved with a
sparse direct factorization. Nodal stresses are recovered by evaluating the
element stress at each corner and volume-averaging over adjacent elements.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .mesh import Mesh

__all__ = [
    "Material",
    "LoadCase",
    "StressField",
    "SolverError",
    "SolveResult",
    "solve",
    "solve_with_details",
    "load_nodes",
    "save_stress_field",
    "load_stress_field",
]


class SolverError(RuntimeError):
    """FEM system could not be solved (singular or non-finite)."""


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 200e9     # Pa (generic steel)
    poissons_ratio: float = 0.3
    thickness: float = 0.01           # m, plane stress

    def __post_init__(self):
        if self.youngs_modulus <= 0:
            raise ValueError("youngs_modulus must be positive")
        if not 0.0 <= self.poissons_ratio < 0.5:
            raise ValueError("poissons_ratio must be in [0, 0.5)")
        if self.thickness <= 0:
            raise ValueError("thickness must be positive")

    def d_matrix(self) -> np.ndarray:
        e, nu = self.youngs_modulus, self.poissons_ratio
        return (e / (1.0 - nu * nu)) * np.array(
            [[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]]
        )


@dataclass(frozen=True)
class LoadCase:
    constraint_kind: str              # "fixed" | "sliding"
    load_kind: str                    # "concentrated" | "distributed"
    direction: str                    # "x" | "y"
    location_parameter: float = 0.0   # attachment ordinate along the load edge
    total_magnitude: float = 1000.0   # N (paper: total load 1 kN)
    edge: str = "load_edge"           # boundary-set name of the loaded edge

    def __post_init__(self):
        if self.constraint_kind not in ("fixed", "sliding"):
            raise ValueError(f"unknown constraint_kind {self.constraint_kind!r}")
        if self.load_kind not in ("concentrated", "distributed"):
            raise ValueError(f"unknown load_kind {self.load_kind!r}")
        if self.direction not in ("x", "y"):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass
class StressField:
    mesh: Mesh
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    tau_xy: np.ndarray

    def validate(self) -> None:
        n = self.mesh.n_nodes
        for name in ("sigma_x", "sigma_y", "tau_xy"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} length {arr.shape} != node count {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    def components(self) -> np.ndarray:
        """(3, n_nodes) array in sigma_x, sigma_y, tau_xy order."""
        return np.stack([self.sigma_x, self.sigma_y, self.tau_xy])


@dataclass
class SolveResult:
    field: StressField
    displacements: np.ndarray        # (n_nodes, 2)
    reactions: np.ndarray            # (n_nodes, 2), nonzero only on constrained DOFs
    applied_forces: np.ndarray       # (n_nodes, 2)
    strain_energy: float


# ---------------------------------------------------------------------------
# Element kinematics
# ---------------------------------------------------------------------------

_GAUSS_1D = 1.0 / np.sqrt(3.0)
_QUAD_GP = [(-_GAUSS_1D, -_GAUSS_1D), (_GAUSS_1D, -_GAUSS_1D),
            (_GAUSS_1D, _GAUSS_1D), (-_GAUSS_1D, _GAUSS_1D)]
_QUAD_CORNERS = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]


def _quad_shape_grad(xi: float, eta: float):
    dn_dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    dn_deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    return dn_dxi, dn_deta


def _quad_b_matrices(xy: np.ndarray, xi: float, eta: float):
    """Batched B (m,3,8) and Jacobian determinant (m,) at one natural point."""
    dn_dxi, dn_deta = _quad_shape_grad(xi, eta)
    j11 = xy[:, :, 0] @ dn_dxi
    j12 = xy[:, :, 1] @ dn_dxi
    j21 = xy[:, :, 0] @ dn_deta
    j22 = xy[:, :, 1] @ dn_deta
    det = j11 * j22 - j12 * j21
    inv = 1.0 / det
    dn_dx = inv[:, None] * (j22[:, None] * dn_dxi - j12[:, None] * dn_deta)
    dn_dy = inv[:, None] * (-j21[:, None] * dn_dxi + j11[:, None] * dn_deta)
    m = xy.shape[0]
    b = np.zeros((m, 3, 8))
    b[:, 0, 0::2] = dn_dx
    b[:, 1, 1::2] = dn_dy
    b[:, 2, 0::2] = dn_dy
    b[:, 2, 1::2] = dn_dx
    return b, det


def _tri_b_matrices(xy: np.ndarray):
    """Constant B (m,3,6) and areas (m,) for tri3."""
    x1, y1 = xy[:, 0, 0], xy[:, 0, 1]
    x2, y2 = xy[:, 1, 0], xy[:, 1, 1]
    x3, y3 = xy[:, 2, 0], xy[:, 2, 1]
    area2 = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
    bcoef = np.stack([y2 - y3, y3 - y1, y1 - y2], axis=1) / area2[:, None]
    ccoef = np.stack([x3 - x2, x1 - x3, x2 - x1], axis=1) / area2[:, None]
    m = xy.shape[0]
    b = np.zeros((m, 3, 6))
    b[:, 0, 0::2] = bcoef
    b[:, 1, 1::2] = ccoef
    b[:, 2, 0::2] = ccoef
    b[:, 2, 1::2] = bcoef
    return b, area2 / 2.0


def _element_stiffness(mesh: Mesh, material: Material):
    """Batched element stiffness (m, ndof_e, ndof_e) and element areas."""
    d = material.d_matrix()
    t = material.thickness
    xy = mesh.nodes[mesh.elements]
    if mesh.element_kind == "quad4":
        ke = np.zeros((mesh.n_elements, 8, 8))
        areas = np.zeros(mesh.n_elements)
        for xi, eta in _QUAD_GP:
            b, det = _quad_b_matrices(xy, xi, eta)
            ke += t * det[:, None, None] * np.einsum("mki,kl,mlj->mij", b, d, b)
            areas += det
        return ke, areas
    b, areas = _tri_b_matrices(xy)
    ke = t * areas[:, None, None] * np.einsum("mki,kl,mlj->mij", b, d, b)
    return ke, areas


def _assemble(mesh: Mesh, material: Material) -> tuple[sparse.csr_matrix, np.ndarray]:
    ke, areas = _element_stiffness(mesh, material)
    npe = mesh.elements.shape[1]
    dofs = np.empty((mesh.n_elements, 2 * npe), dtype=np.int64)
    dofs[:, 0::2] = 2 * mesh.elements
    dofs[:, 1::2] = 2 * mesh.elements + 1
    rows = np.repeat(dofs, 2 * npe, axis=1).ravel()
    cols = np.tile(dofs, (1, 2 * npe)).ravel()
    k = sparse.coo_matrix(
        (ke.ravel(), (rows, cols)), shape=(2 * mesh.n_nodes, 2 * mesh.n_nodes)
    ).tocsr()
    return k, areas


# ---------------------------------------------------------------------------
# Loads and constraints
# ---------------------------------------------------------------------------

def _edge_tangent_coordinate(mesh: Mesh, edge_nodes: np.ndarray) -> np.ndarray:
    """Coordinate along a (straight, axis-aligned) load edge."""
    pts = mesh.nodes[edge_nodes]
    spans = np.ptp(pts, axis=0)
    axis = int(np.argmax(spans))
    return pts[:, axis]


def _force_vector(mesh: Mesh, load: LoadCase) -> np.ndarray:
    if load.edge not in mesh.boundary_sets:
        raise SolverError(f"mesh has no boundary set {load.edge!r}")
    edge_nodes = np.asarray(mesh.boundary_sets[load.edge])
    if len(edge_nodes) == 0:
        raise SolverError(f"boundary set {load.edge!r} is empty")
    dof_off = 0 if load.direction == "x" else 1
    f = np.zeros(2 * mesh.n_nodes)
    coord = _edge_tangent_coordinate(mesh, edge_nodes)
    if load.load_kind == "concentrated":
        lo, hi = coord.min(), coord.max()
        if not (lo - 1e-9 <= load.location_parameter <= hi + 1e-9):
            raise SolverError(
                f"load ordinate {load.location_parameter} outside edge range [{lo}, {hi}]"
            )
        node = edge_nodes[np.argmin(np.abs(coord - load.location_parameter))]
        f[2 * node + dof_off] = load.total_magnitude
    else:
        # uniform traction along the full edge, consistent (trapezoidal) lumping
        order = np.argsort(coord)
        nodes_sorted = edge_nodes[order]
        seg = np.diff(coord[order])
        length = seg.sum()
        if length <= 0:
            raise SolverError(f"load edge {load.edge!r} has zero length")
        per_len = load.total_magnitude / length
        nodal = np.zeros(len(nodes_sorted))
        nodal[:-1] += 0.5 * per_len * seg
        nodal[1:] += 0.5 * per_len * seg
        f[2 * nodes_sorted + dof_off] = nodal
    return f


def load_nodes(mesh: Mesh, load: LoadCase) -> np.ndarray:
    """Node ids that receive external force under this load case."""
    if load.edge not in mesh.boundary_sets:
        raise SolverError(f"mesh has no boundary set {load.edge!r}")
    edge_nodes = np.asarray(mesh.boundary_sets[load.edge])
    if load.load_kind == "distributed":
        return np.sort(edge_nodes)
    coord = _edge_tangent_coordinate(mesh, edge_nodes)
    return np.array([edge_nodes[np.argmin(np.abs(coord - load.location_parameter))]])


def _constrained_dofs(mesh: Mesh, load: LoadCase) -> np.ndarray:
    if "constrained" not in mesh.boundary_sets:
        raise SolverError("mesh has no 'constrained' boundary set")
    sup = np.asarray(mesh.boundary_sets["constrained"])
    if load.constraint_kind == "fixed":
        return np.unique(np.concatenate([2 * sup, 2 * sup + 1]))
    # sliding: edge normal is x for all bundled geometries; pin one node in y
    pin = np.asarray(mesh.boundary_sets.get("pin", sup[:1]))
    return np.unique(np.concatenate([2 * sup, 2 * pin + 1]))


def _name_unconstrained_mode(mesh: Mesh, fixed: np.ndarray) -> str | None:
    n = mesh.n_nodes
    modes = {
        "x-translation": np.tile([1.0, 0.0], n),
        "y-translation": np.tile([0.0, 1.0], n),
    }
    c = mesh.nodes.mean(axis=0)
    rot = np.empty(2 * n)
    rot[0::2] = -(mesh.nodes[:, 1] - c[1])
    rot[1::2] = mesh.nodes[:, 0] - c[0]
    scale = max(np.abs(rot).max(), 1.0)
    modes["rotation"] = rot / scale
    for name, v in modes.items():
        if len(fixed) == 0 or np.all(np.abs(v[fixed]) < 1e-12):
            return name
    return None


# ---------------------------------------------------------------------------
# Solve and stress recovery
# ---------------------------------------------------------------------------

def solve_with_details(mesh: Mesh, material: Material, load: LoadCase) -> SolveResult:
    mesh.validate()
    k, areas = _assemble(mesh, material)
    f = _force_vector(mesh, load)
    fixed = _constrained_dofs(mesh, load)

    mode = _name_unconstrained_mode(mesh, fixed)
    if mode is not None:
        raise SolverError(f"constraints leave a rigid-body mode free: {mode}")

    ndof = 2 * mesh.n_nodes
    free = np.setdiff1d(np.arange(ndof), fixed, assume_unique=False)
    kff = k[free][:, free].tocsc()
    try:
        lu = splu(kff)
        uf = lu.solve(f[free])
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    if not np.all(np.isfinite(uf)):
        raise SolverError("non-finite displacement solution (singular system?)")

    u = np.zeros(ndof)
    u[free] = uf
    residual = k @ u - f
    reactions = np.zeros(ndof)
    reactions[fixed] = residual[fixed]

    field = _recover_stresses(mesh, material, u, areas)
    field.validate()
    return SolveResult(
        field=field,
        displacements=u.reshape(-1, 2),
        reactions=reactions.reshape(-1, 2),
        applied_forces=f.reshape(-1, 2),
        strain_energy=0.5 * float(u @ (k @ u)),
    )


def solve(mesh: Mesh, material: Material, load: LoadCase) -> StressField:
    return solve_with_details(mesh, material, load).field


def _recover_stresses(
    mesh: Mesh, material: Material, u: np.ndarray, areas: np.ndarray
) -> StressField:
    d = material.d_matrix()
    npe = mesh.elements.shape[1]
    dofs = np.empty((mesh.n_elements, 2 * npe), dtype=np.int64)
    dofs[:, 0::2] = 2 * mesh.elements
    dofs[:, 1::2] = 2 * mesh.elements + 1
    ue = u[dofs]                                          # (m, 2*npe)
    xy = mesh.nodes[mesh.elements]

    acc = np.zeros((mesh.n_nodes, 3))
    wsum = np.zeros(mesh.n_nodes)
    if mesh.element_kind == "quad4":
        for corner, (xi, eta) in enumerate(_QUAD_CORNERS):
            b, _ = _quad_b_matrices(xy, xi, eta)
            sig = np.einsum("kl,mlj,mj->mk", d, b, ue)    # (m, 3)
            nid = mesh.elements[:, corner]
            np.add.at(acc, nid, areas[:, None] * sig)
            np.add.at(wsum, nid, areas)
    else:
        b, _ = _tri_b_matrices(xy)
        sig = np.einsum("kl,mlj,mj->mk", d, b, ue)
        for corner in range(3):
            nid = mesh.elements[:, corner]
            np.add.at(acc, nid, areas[:, None] * sig)
            np.add.at(wsum, nid, areas)
    nodal = acc / wsum[:, None]
    return StressField(
        mesh=mesh, sigma_x=nodal[:, 0], sigma_y=nodal[:, 1], tau_xy=nodal[:, 2]
    )


# ---------------------------------------------------------------------------
# Plain-text serialization of per-node stresses
# ---------------------------------------------------------------------------

def save_stress_field(field: StressField, path) -> None:
    with open(path, "w") as fh:
        fh.write("pistress-stress 1\n")
        fh.write(f"nodes {field.mesh.n_nodes}\n")
        fh.write("sigma_x sigma_y tau_xy\n")
        for sx, sy, txy in zip(field.sigma_x, field.sigma_y, field.tau_xy):
            fh.write(f"{float(sx)!r} {float(sy)!r} {float(txy)!r}\n")


def load_stress_field(path, mesh: Mesh) -> StressField:
    with open(path) as fh:
        header = fh.readline().split()
        if header[:1] != ["pistress-stress"]:
            raise ValueError(f"{path}: not a pistress stress file")
        n = int(fh.readline().split()[1])
        if n != mesh.n_nodes:
            raise ValueError(f"{path}: node count {n} != mesh node count {mesh.n_nodes}")
        fh.readline()
        vals = np.array([[float(v) for v in fh.readline().split()] for _ in range(n)])
    field = StressField(mesh=mesh, sigma_x=vals[:, 0], sigma_y=vals[:, 1], tau_xy=vals[:, 2])
    field.validate()
    return field
