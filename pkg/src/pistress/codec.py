"""Stress field <-> grayscale contour image conversion.

One analysis case k gets a single linear contour map (C_k, s_k) shared by
all three channels:

    sigma = C_k * (I + s_k)        I = sigma / C_k - s_k

Background is white (intensity 1.0). Images are stored as float rasters of
shape (3, height, width); 8-bit PGM/PNG files are written for inspection
only, training always consumes the float rasters.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fem.mesh import Mesh
from .fem.solver import StressField

__all__ = [
    "CodecError",
    "ContourMap",
    "RasterGrid",
    "ImageTriple",
    "InteriorMask",
    "fit_contour_map",
    "rasterize",
    "node_load_pixels",
    "decode",
    "interior_mask",
    "apply_augmentation",
    "augment_pair",
    "transform_pixels",
    "write_pgm",
    "read_pgm",
    "write_png",
    "save_image_triple",
    "load_image_triple",
]

BACKGROUND = 1.0
INTENSITY_LO = 0.05   # darkest contour intensity after fitting
INTENSITY_HI = 0.95   # brightest contour intensity, keeps contours off white
DEFAULT_EPSILON = 0.02

CHANNEL_NAMES = ("sx", "sy", "txy")


class CodecError(ValueError):
    """Invalid codec input (canvas too small, malformed image file, ...)."""


@dataclass(frozen=True)
class ContourMap:
    c: float                       # stress per unit intensity (C_k)
    s: float                       # intensity offset (s_k)
    background_intensity: float = BACKGROUND

    def __post_init__(self):
        if self.c == 0.0:
            raise CodecError("contour coefficient C_k must be nonzero")

    def intensity(self, sigma: np.ndarray) -> np.ndarray:
        return sigma / self.c - self.s

    def stress(self, intensity: np.ndarray) -> np.ndarray:
        return self.c * (intensity + self.s)

    def inverted(self) -> "ContourMap":
        # I -> 1 - I decodes to the same stress under (-c, -1-s)
        return ContourMap(c=-self.c, s=-1.0 - self.s,
                          background_intensity=self.background_intensity)


def fit_contour_map(fld: StressField) -> ContourMap:
    """Map the min/max over all three components to [INTENSITY_LO, INTENSITY_HI]."""
    comps = fld.components()
    if comps.size == 0:
        raise CodecError("stress field has no nodes")
    lo = float(comps.min())
    hi = float(comps.max())
    span = hi - lo
    if span <= 0.0:
        return ContourMap(c=1.0, s=0.5)    # degenerate-range rule
    c = span / (INTENSITY_HI - INTENSITY_LO)
    s = lo / c - INTENSITY_LO
    return ContourMap(c=c, s=s)


@dataclass(frozen=True)
class RasterGrid:
    """Mapping between domain coordinates and pixel indices on a canvas.

    The mesh bounding box is scaled uniformly to fit the canvas and centered
    (letterboxed); row 0 is the top of the image, y grows upward.
    """
    width: int
    height: int
    ppu: float            # pixels per length unit
    offset_x: float       # left letterbox margin in pixels
    offset_y: float       # bottom letterbox margin in pixels

    @classmethod
    def from_bbox(cls, width: int, height: int, bbox: tuple[float, float, float, float]):
        x0, y0, x1, y1 = bbox
        bw, bh = x1 - x0, y1 - y0
        if bw <= 0 or bh <= 0:
            raise CodecError("degenerate domain bounding box")
        ppu = min(width / bw, height / bh)
        return cls(
            width=width,
            height=height,
            ppu=ppu,
            offset_x=(width - bw * ppu) / 2.0 - x0 * ppu,
            offset_y=(height - bh * ppu) / 2.0 - y0 * ppu,
        )

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """x and y coordinates of all pixel centers, each (height, width)."""
        cols = np.arange(self.width) + 0.5
        rows = np.arange(self.height) + 0.5
        x = (cols - self.offset_x) / self.ppu
        y = (self.height - rows - self.offset_y) / self.ppu
        return np.broadcast_to(x, (self.height, self.width)), np.broadcast_to(
            y[:, None], (self.height, self.width)
        )

    def point_to_pixel(self, x: float, y: float) -> tuple[int, int]:
        col = int(np.clip(np.floor(x * self.ppu + self.offset_x), 0, self.width - 1))
        row = int(
            np.clip(np.floor(self.height - y * self.ppu - self.offset_y), 0, self.height - 1)
        )
        return row, col


@dataclass
class ImageTriple:
    channels: np.ndarray           # (3, height, width) float intensities in [0, 1]
    contour_map: ContourMap
    case_id: str
    footprint: np.ndarray | None = None   # (height, width) bool, True inside domain

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    def validate(self) -> None:
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise CodecError("channels must have shape (3, height, width)")
        if self.channels.min() < -1e-12 or self.channels.max() > 1.0 + 1e-12:
            raise CodecError("intensities out of [0, 1]")
        if self.footprint is not None and self.footprint.shape != self.channels.shape[1:]:
            raise CodecError("footprint shape mismatch")


@dataclass
class InteriorMask:
    mask: np.ndarray               # (height, width) uint8/bool

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def count(self) -> int:
        return int(self.mask.sum())


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def _quad_local_coords(corners: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Invert the bilinear map for one quad, Newton iteration (k, 2)."""
    loc = np.zeros_like(pts)
    for _ in range(6):
        xi, eta = loc[:, 0], loc[:, 1]
        n = 0.25 * np.stack(
            [(1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
             (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)], axis=1)
        r = n @ corners - pts
        dn_dxi = 0.25 * np.stack([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)], axis=1)
        dn_deta = 0.25 * np.stack([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)], axis=1)
        j = np.stack([dn_dxi @ corners, dn_deta @ corners], axis=1)  # (k,2,2) rows d/dxi
        det = j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        dxi = (r[:, 0] * j[:, 1, 1] - r[:, 1] * j[:, 1, 0]) / det
        deta = (-r[:, 0] * j[:, 0, 1] + r[:, 1] * j[:, 0, 0]) / det
        loc[:, 0] -= dxi
        loc[:, 1] -= deta
        if max(np.abs(dxi).max(initial=0.0), np.abs(deta).max(initial=0.0)) < 1e-13:
            break
    return loc


def _quad_shape_values(loc: np.ndarray) -> np.ndarray:
    xi, eta = loc[:, 0], loc[:, 1]
    return 0.25 * np.stack(
        [(1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
         (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)], axis=1)


def _tri_bary(corners: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a, b, c = corners
    m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    rhs = (pts - a).T
    lam = np.linalg.solve(m, rhs).T
    l1, l2 = lam[:, 0], lam[:, 1]
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def rasterize(
    fld: StressField,
    cmap: ContourMap,
    width: int,
    height: int,
    case_id: str = "",
) -> ImageTriple:
    """Sample the interpolated stress field at pixel centers inside the domain."""
    mesh = fld.mesh
    bbox = (
        float(mesh.nodes[:, 0].min()), float(mesh.nodes[:, 1].min()),
        float(mesh.nodes[:, 0].max()), float(mesh.nodes[:, 1].max()),
    )
    grid = RasterGrid.from_bbox(width, height, bbox)

    elem_xy = mesh.nodes[mesh.elements]                    # (m, npe, 2)
    spans = elem_xy.max(axis=1) - elem_xy.min(axis=1)      # (m, 2)
    if (spans * grid.ppu).min() < 2.0 - 1e-9:
        raise CodecError(
            "canvas too small: smallest element covers fewer than 2x2 pixels"
        )

    comps = fld.components()                               # (3, n_nodes)
    channels = np.full((3, height, width), BACKGROUND)
    covered = np.zeros((height, width), dtype=bool)
    tol = 1e-9

    px_x, px_y = grid.pixel_centers()
    for e in range(mesh.n_elements):
        corners = elem_xy[e]
        lo = corners.min(axis=0)
        hi = corners.max(axis=0)
        c0 = max(int(np.floor(lo[0] * grid.ppu + grid.offset_x - 0.5)), 0)
        c1 = min(int(np.ceil(hi[0] * grid.ppu + grid.offset_x + 0.5)), width - 1)
        r0 = max(int(np.floor(height - hi[1] * grid.ppu - grid.offset_y - 0.5)), 0)
        r1 = min(int(np.ceil(height - lo[1] * grid.ppu - grid.offset_y + 0.5)), height - 1)
        if c1 < c0 or r1 < r0:
            continue
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
        rr, cc = rr.ravel(), cc.ravel()
        todo = ~covered[rr, cc]
        rr, cc = rr[todo], cc[todo]
        if rr.size == 0:
            continue
        pts = np.column_stack([px_x[rr, cc], px_y[rr, cc]])
        if mesh.element_kind == "quad4":
            loc = _quad_local_coords(corners, pts)
            inside = np.all(np.abs(loc) <= 1.0 + tol, axis=1)
            if not inside.any():
                continue
            nvals = _quad_shape_values(loc[inside])
        else:
            bary = _tri_bary(corners, pts)
            inside = np.all(bary >= -tol, axis=1)
            if not inside.any():
                continue
            nvals = bary[inside]
        rr, cc = rr[inside], cc[inside]
        sigma = nvals @ comps[:, mesh.elements[e]].T       # (k, 3)
        inten = np.clip(cmap.intensity(sigma), 0.0, 1.0)
        channels[:, rr, cc] = inten.T
        covered[rr, cc] = True

    triple = ImageTriple(
        channels=channels, contour_map=cmap, case_id=case_id, footprint=covered
    )
    triple.validate()
    return triple


def node_load_pixels(mesh: Mesh, node_ids: np.ndarray, width: int, height: int) -> list[tuple[int, int]]:
    """Pixels of load-application nodes under the same canvas transform as rasterize."""
    bbox = (
        float(mesh.nodes[:, 0].min()), float(mesh.nodes[:, 1].min()),
        float(mesh.nodes[:, 0].max()), float(mesh.nodes[:, 1].max()),
    )
    grid = RasterGrid.from_bbox(width, height, bbox)
    return sorted({grid.point_to_pixel(x, y) for x, y in mesh.nodes[node_ids]})


# ---------------------------------------------------------------------------
# Decode and interior mask
# ---------------------------------------------------------------------------

def decode(image: ImageTriple) -> tuple[np.ndarray, np.ndarray]:
    """Pixelwise stresses (3, h, w) plus a background flag raster (h, w)."""
    stresses = image.contour_map.stress(image.channels)
    if image.footprint is not None:
        background = ~image.footprint
    else:
        background = np.all(
            image.channels >= image.contour_map.background_intensity - 1e-12, axis=0
        )
    return stresses, background


def interior_mask(
    image: ImageTriple,
    epsilon: float = DEFAULT_EPSILON,
    load_pixels: list[tuple[int, int]] | None = None,
) -> InteriorMask:
    """Binary mask of pixels whose full 5-point stencil is interior.

    m(i,j) = 1 iff the pixel and its four stencil neighbors all have channel-1
    intensity below 1 - epsilon, and none of them is a load-application pixel
    (load pixels carry external force, so residuals touching them are skipped).
    """
    if not 0.0 < epsilon < 0.5:
        raise CodecError("epsilon must lie in (0, 0.5)")
    y1 = image.channels[0]
    interior = y1 < (1.0 - epsilon)
    if load_pixels:
        for r, c in load_pixels:
            if 0 <= r < interior.shape[0] and 0 <= c < interior.shape[1]:
                interior[r, c] = False
    m = np.zeros_like(interior)
    m[1:-1, 1:-1] = (
        interior[1:-1, 1:-1]
        & interior[:-2, 1:-1]
        & interior[2:, 1:-1]
        & interior[1:-1, :-2]
        & interior[1:-1, 2:]
    )
    return InteriorMask(mask=m)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def apply_augmentation(
    image: ImageTriple, flip_h: bool, flip_v: bool, invert: bool
) -> ImageTriple:
    """Left-right / top-bottom / black-white transform of one image.

    Intensity inversion touches only non-background pixels and swaps the
    contour map to (-C, -1-s), so decoded stresses are unchanged.
    """
    ch = image.channels
    fp = image.footprint
    if flip_h:
        ch = ch[:, :, ::-1]
        fp = fp[:, ::-1] if fp is not None else None
    if flip_v:
        ch = ch[:, ::-1, :]
        fp = fp[::-1, :] if fp is not None else None
    ch = np.ascontiguousarray(ch)
    fp = np.ascontiguousarray(fp) if fp is not None else None
    cmap = image.contour_map
    if invert:
        if fp is None:
            raise CodecError("inversion requires a footprint")
        ch = ch.copy()
        ch[:, fp] = 1.0 - ch[:, fp]
        cmap = cmap.inverted()
    return ImageTriple(channels=ch, contour_map=cmap, case_id=image.case_id, footprint=fp)


def transform_pixels(
    pixels: list[tuple[int, int]], flip_h: bool, flip_v: bool, height: int, width: int
) -> list[tuple[int, int]]:
    out = []
    for r, c in pixels:
        if flip_h:
            c = width - 1 - c
        if flip_v:
            r = height - 1 - r
        out.append((r, c))
    return sorted(out)


def augment_pair(
    coarse: ImageTriple, fine: ImageTriple
) -> list[tuple[ImageTriple, ImageTriple, dict]]:
    """All 2x2x2 flip/inversion combinations, identical transform on both images."""
    if coarse.footprint is None or fine.footprint is None:
        raise CodecError("augmentation requires footprints")
    if not np.array_equal(coarse.footprint, fine.footprint):
        raise CodecError("coarse/fine footprints differ")
    out = []
    for flip_h, flip_v, invert in itertools.product((False, True), repeat=3):
        lineage = {"flip_h": flip_h, "flip_v": flip_v, "invert": invert}
        out.append(
            (
                apply_augmentation(coarse, flip_h, flip_v, invert),
                apply_augmentation(fine, flip_h, flip_v, invert),
                lineage,
            )
        )
    return out


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, raster: np.ndarray) -> None:
    """8-bit binary PGM (P5) of one intensity raster in [0, 1]."""
    data = np.clip(np.rint(raster * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise CodecError(f"{path}: not a binary PGM (P5) file")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


def write_png(path: str | Path, raster: np.ndarray) -> None:
    from PIL import Image

    data = np.clip(np.rint(raster * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(str(path))


def save_image_triple(path: str | Path, image: ImageTriple) -> None:
    """Float raster container (.npz) used as the training-precision format."""
    np.savez_compressed(
        path,
        channels=image.channels.astype(np.float32),
        c=image.contour_map.c,
        s=image.contour_map.s,
        case_id=np.array(image.case_id),
        footprint=(
            image.footprint if image.footprint is not None
            else np.zeros((0, 0), dtype=bool)
        ),
    )


def load_image_triple(path: str | Path) -> ImageTriple:
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CodecError(f"{path}: cannot read image triple: {exc}") from exc
    fp = data["footprint"]
    triple = ImageTriple(
        channels=np.asarray(data["channels"], dtype=np.float64),
        contour_map=ContourMap(c=float(data["c"]), s=float(data["s"])),
        case_id=str(data["case_id"]),
        footprint=fp if fp.size else None,
    )
    triple.validate()
    return triple
