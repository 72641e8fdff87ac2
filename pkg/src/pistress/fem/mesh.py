"""Mesh generation for the three geometry families.

All meshes live in the x-y plane with length units of the generating
parameter (H for the cantilever, d for the L-shape, the template bounding
box for the truss-like cantilever). Boundary sets use fixed names:

* ``constrained`` -- nodes of the support edge (always a vertical edge at
  the minimum x of the domain, so the edge normal is x),
* ``pin``         -- single node used to remove the tangential rigid-body
  translation under a sliding support,
* ``load_edge``   -- nodes of the primary load edge,
* ``load_edge2``  -- nodes of the secondary load edge (L-shape only).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "Mesh",
    "MeshError",
    "build_mesh_cantilever",
    "build_mesh_lshape",
    "build_mesh_truss_like",
    "save_mesh",
    "load_mesh",
]

_DUP_TOL = 1e-12


class MeshError(ValueError):
    """Invalid mesh parameters or a failed meshing step."""


@dataclass
class Mesh:
    nodes: np.ndarray                      # (n_nodes, 2) float
    elements: np.ndarray                   # (n_elems, 4) quad4 or (n_elems, 3) tri3
    element_kind: str                      # "quad4" | "tri3"
    boundary_sets: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def validate(self) -> None:
        if self.element_kind not in ("quad4", "tri3"):
            raise MeshError(f"unknown element kind {self.element_kind!r}")
        nodes_per_elem = 4 if self.element_kind == "quad4" else 3
        if self.elements.ndim != 2 or self.elements.shape[1] != nodes_per_elem:
            raise MeshError("element connectivity shape does not match element kind")
        if self.elements.size and (
            self.elements.min() < 0 or self.elements.max() >= self.n_nodes
        ):
            raise MeshError("element references a node index out of range")
        span = float(np.ptp(self.nodes, axis=0).max()) or 1.0
        if _has_duplicate_nodes(self.nodes, _DUP_TOL * span):
            raise MeshError("duplicate nodes within tolerance")
        if self.element_kind == "quad4":
            _check_quad_orientation(self.nodes, self.elements)
        else:
            _check_tri_orientation(self.nodes, self.elements)
        for name, ids in self.boundary_sets.items():
            if len(ids) and (ids.min() < 0 or ids.max() >= self.n_nodes):
                raise MeshError(f"boundary set {name!r} references invalid node index")


def _has_duplicate_nodes(nodes: np.ndarray, tol: float) -> bool:
    rounded = np.round(nodes / max(tol, 1e-300)).astype(np.int64)
    return len(np.unique(rounded, axis=0)) != len(nodes)


def _check_quad_orientation(nodes: np.ndarray, elements: np.ndarray) -> None:
    # Jacobian of the bilinear map at all four corners must be positive.
    corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
    xy = nodes[elements]                    # (m, 4, 2)
    for xi, eta in corners:
        dn_dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
        dn_deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
        j11 = xy[:, :, 0] @ dn_dxi
        j12 = xy[:, :, 1] @ dn_dxi
        j21 = xy[:, :, 0] @ dn_deta
        j22 = xy[:, :, 1] @ dn_deta
        det = j11 * j22 - j12 * j21
        if np.any(det <= 0):
            raise MeshError("quad4 element with non-positive Jacobian (not convex CCW)")


def _check_tri_orientation(nodes: np.ndarray, elements: np.ndarray) -> None:
    xy = nodes[elements]
    area2 = (xy[:, 1, 0] - xy[:, 0, 0]) * (xy[:, 2, 1] - xy[:, 0, 1]) - (
        xy[:, 2, 0] - xy[:, 0, 0]
    ) * (xy[:, 1, 1] - xy[:, 0, 1])
    domain_area = float(np.abs(area2).sum() / 2.0)
    if np.any(area2 <= 2e-10 * domain_area):
        raise MeshError("degenerate or inverted tri3 element")


def _divisions(length: float, element_size: float, what: str) -> int:
    n = length / element_size
    if abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise MeshError(
            f"element_size {element_size} does not divide {what} {length} evenly"
        )
    n = int(round(n))
    if n < 1:
        raise MeshError(f"element_size {element_size} larger than {what} {length}")
    return n


def _structured_quads(nx: int, ny: int, dx: float, dy: float):
    """Nodes and CCW quad4 connectivity of an (nx x ny)-cell rectangle grid."""
    xs = np.arange(nx + 1) * dx
    ys = np.arange(ny + 1) * dy
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    def nid(ix, iy):
        return iy * (nx + 1) + ix

    elems = np.empty((nx * ny, 4), dtype=np.int64)
    k = 0
    for iy in range(ny):
        for ix in range(nx):
            elems[k] = (nid(ix, iy), nid(ix + 1, iy), nid(ix + 1, iy + 1), nid(ix, iy + 1))
            k += 1
    return nodes, elems


def build_mesh_cantilever(H: float, element_size: float) -> Mesh:
    """Structured quad4 mesh of the W x H cantilever rectangle, W = 2H.

    Support edge at x = 0, load edge at x = W. Concentrated-load attachment
    ordinates i*H/5 (i = 0..5) coincide with grid nodes for the standard
    coarse (H/10) and fine (H/40) sizes.
    """
    if H <= 0 or element_size <= 0:
        raise MeshError("H and element_size must be positive")
    ny = _divisions(H, element_size, "H")
    nx = _divisions(2.0 * H, element_size, "W=2H")
    nodes, elems = _structured_quads(nx, ny, element_size, element_size)
    left = np.where(np.isclose(nodes[:, 0], 0.0))[0]
    right = np.where(np.isclose(nodes[:, 0], 2.0 * H))[0]
    pin = left[np.argmin(nodes[left, 1])]
    mesh = Mesh(
        nodes=nodes,
        elements=elems,
        element_kind="quad4",
        boundary_sets={
            "constrained": left,
            "pin": np.array([pin]),
            "load_edge": right,
        },
    )
    mesh.validate()
    return mesh


def build_mesh_lshape(d: float, element_size: float) -> Mesh:
    """Structured quad4 mesh of an L bracket: two arms of length L = 3d, width d.

    Footprint: the union of [0,3d]x[0,d] and [0,d]x[0,3d] (area 5*d^2).
    Support edge at x = 0 (full 3d height of the vertical arm); primary load
    edge at x = 3d (the horizontal arm tip), secondary load edge at y = 3d.
    """
    if d <= 0 or element_size <= 0:
        raise MeshError("d and element_size must be positive")
    n = _divisions(d, element_size, "d")
    nc = 3 * n
    nodes_full, elems_full = _structured_quads(nc, nc, element_size, element_size)
    cx = (np.arange(nc) + 0.5) * element_size
    gx, gy = np.meshgrid(cx, cx, indexing="xy")
    keep = ((gx.ravel() < d) | (gy.ravel() < d))
    # element order in _structured_quads is row-major over (iy, ix)
    keep = keep.reshape(nc, nc)
    keep_flat = np.array(
        [keep[iy, ix] for iy in range(nc) for ix in range(nc)], dtype=bool
    )
    elems = elems_full[keep_flat]
    nodes, elems = _compact_nodes(nodes_full, elems)
    left = np.where(np.isclose(nodes[:, 0], 0.0))[0]
    tip = np.where(np.isclose(nodes[:, 0], 3.0 * d))[0]
    top = np.where(np.isclose(nodes[:, 1], 3.0 * d))[0]
    pin = left[np.argmin(nodes[left, 1])]
    mesh = Mesh(
        nodes=nodes,
        elements=elems,
        element_kind="quad4",
        boundary_sets={
            "constrained": left,
            "pin": np.array([pin]),
            "load_edge": tip,
            "load_edge2": top,
        },
    )
    mesh.validate()
    return mesh


def _compact_nodes(nodes: np.ndarray, elems: np.ndarray):
    used = np.unique(elems)
    remap = -np.ones(nodes.shape[0], dtype=np.int64)
    remap[used] = np.arange(len(used))
    return nodes[used], remap[elems]


def _template_path(template_id: str) -> Path:
    base = resources.files("pistress.fem") / "templates" / f"{template_id}.json"
    return Path(str(base))


def load_template(template_id: str) -> dict:
    path = _template_path(template_id)
    if not path.is_file():
        raise MeshError(f"unknown truss template {template_id!r}")
    with open(path) as fh:
        return json.load(fh)


def _point_in_bars(points: np.ndarray, bars: list[dict]) -> np.ndarray:
    """True where a point lies within half-width of any bar segment."""
    inside = np.zeros(points.shape[0], dtype=bool)
    for bar in bars:
        p = np.asarray(bar["p"], dtype=float)
        q = np.asarray(bar["q"], dtype=float)
        half = 0.5 * float(bar["w"])
        pq = q - p
        denom = float(pq @ pq)
        if denom == 0.0:
            dist = np.linalg.norm(points - p, axis=1)
        else:
            t = np.clip(((points - p) @ pq) / denom, 0.0, 1.0)
            nearest = p + t[:, None] * pq
            dist = np.linalg.norm(points - nearest, axis=1)
        inside |= dist <= half + 1e-12
    return inside


def build_mesh_truss_like(template_id: str, element_size: float) -> Mesh:
    """tri3 mesh of a bundled truss-like cantilever outline.

    Cell membership is decided once on the template's base grid, then each
    kept base cell is subdivided, so meshes at element_size and
    element_size/k share the exact same footprint (nested refinement).
    element_size must divide the template's base_cell size.
    """
    tpl = load_template(template_id)
    w, h = tpl["bbox"]
    s0 = float(tpl["base_cell"])
    if element_size <= 0:
        raise MeshError("element_size must be positive")
    r = _divisions(s0, element_size, "template base_cell")
    ncx = _divisions(w, s0, "template bbox width")
    ncy = _divisions(h, s0, "template bbox height")

    # keep/drop decided on the base grid
    cxs = (np.arange(ncx) + 0.5) * s0
    cys = (np.arange(ncy) + 0.5) * s0
    gx, gy = np.meshgrid(cxs, cys, indexing="xy")
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    keep = _point_in_bars(centers, tpl["bars"]).reshape(ncy, ncx)
    if not keep.any():
        raise MeshError(f"template {template_id!r} produced an empty region")

    nx, ny = ncx * r, ncy * r
    dx = w / nx
    dy = h / ny

    def nid(ix, iy):
        return iy * (nx + 1) + ix

    tris = []
    for iy in range(ncy):
        for ix in range(ncx):
            if not keep[iy, ix]:
                continue
            for sy in range(r):
                for sx in range(r):
                    jx, jy = ix * r + sx, iy * r + sy
                    a = nid(jx, jy)
                    b = nid(jx + 1, jy)
                    c = nid(jx + 1, jy + 1)
                    d = nid(jx, jy + 1)
                    tris.append((a, b, c))
                    tris.append((a, c, d))
    elems = np.asarray(tris, dtype=np.int64)
    xs = np.arange(nx + 1) * dx
    ys = np.arange(ny + 1) * dy
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    nodes_full = np.column_stack([gx.ravel(), gy.ravel()])
    nodes, elems = _compact_nodes(nodes_full, elems)

    root = np.where(np.isclose(nodes[:, 0], 0.0))[0]
    tipn = np.where(np.isclose(nodes[:, 0], w))[0]
    if len(root) == 0 or len(tipn) == 0:
        raise MeshError(f"template {template_id!r} has no root or tip boundary nodes")
    pin = root[np.argmin(nodes[root, 1])]
    mesh = Mesh(
        nodes=nodes,
        elements=elems,
        element_kind="tri3",
        boundary_sets={
            "constrained": root,
            "pin": np.array([pin]),
            "load_edge": tipn,
        },
    )
    mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# Plain-text serialization
# ---------------------------------------------------------------------------

def save_mesh(mesh: Mesh, path: str | Path) -> None:
    """Write the documented plain-text mesh format (see README)."""
    with open(path, "w") as fh:
        fh.write("pistress-mesh 1\n")
        fh.write(f"kind {mesh.element_kind}\n")
        fh.write(f"nodes {mesh.n_nodes}\n")
        for x, y in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        fh.write(f"elements {mesh.n_elements}\n")
        for row in mesh.elements:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")
        fh.write(f"boundary_sets {len(mesh.boundary_sets)}\n")
        for name, ids in mesh.boundary_sets.items():
            fh.write(f"{name} " + " ".join(str(int(v)) for v in ids) + "\n")


def load_mesh(path: str | Path) -> Mesh:
    with open(path) as fh:
        header = fh.readline().split()
        if header[:1] != ["pistress-mesh"]:
            raise MeshError(f"{path}: not a pistress mesh file")
        kind = fh.readline().split()[1]
        n_nodes = int(fh.readline().split()[1])
        nodes = np.array(
            [[float(v) for v in fh.readline().split()] for _ in range(n_nodes)]
        )
        n_elems = int(fh.readline().split()[1])
        elems = np.array(
            [[int(v) for v in fh.readline().split()] for _ in range(n_elems)],
            dtype=np.int64,
        )
        n_sets = int(fh.readline().split()[1])
        sets = {}
        for _ in range(n_sets):
            parts = fh.readline().split()
            sets[parts[0]] = np.array([int(v) for v in parts[1:]], dtype=np.int64)
    mesh = Mesh(nodes=nodes, elements=elems, element_kind=kind, boundary_sets=sets)
    mesh.validate()
    return mesh
