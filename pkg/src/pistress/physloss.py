"""Equilibrium-residual physics loss, MSE loss, and their exact gradients.

Rasters are (3, height, width) arrays with row 0 at the top of the image, so
the y axis points from high row indices to low ones. Central differences are
pure neighbor differences with no 1/(2h) factor: only the relative scale of
the penalty matters and the reference loss tables were produced this way.

Residuals at pixel p (x index = column c, y index = row r, y up):

    r_x = [y1(c+1) - y1(c-1)] + [y3(r-1) - y3(r+1)]
    r_y = [y2(r-1) - y2(r+1)] + [y3(c+1) - y3(c-1)]

Border pixels have no valid stencil; they are never masked in.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .codec import ImageTriple, InteriorMask

__all__ = [
    "LossReport",
    "PhysicalLossResult",
    "divergence",
    "physical_loss",
    "physical_loss_grad",
    "mse_loss",
    "loss_table",
]


def _channels(output) -> np.ndarray:
    if isinstance(output, ImageTriple):
        return output.channels
    arr = np.asarray(output)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("expected (3, height, width) rasters")
    return arr


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, InteriorMask):
        return mask.mask
    return np.asarray(mask)


@dataclass
class LossReport:
    total: float
    mse: float
    physical: float
    pixel_count: int
    masked_count: int
    physical_sum: float = 0.0     # unnormalized masked residual sum

    def validate(self) -> None:
        vals = (self.total, self.mse, self.physical)
        if any(v < 0 or not np.isfinite(v) for v in vals):
            raise ValueError(f"loss values must be finite and >= 0: {vals}")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "LossReport":
        return cls(**json.loads(text))


def loss_table(rows: dict[str, LossReport]) -> str:
    """Aligned plain-text table in Total / MSE / physical column order."""
    header = f"{'':16s} {'Total loss':>14s} {'MSE loss':>14s} {'physical loss':>14s}"
    lines = [header]
    for name, rep in rows.items():
        lines.append(
            f"{name:16s} {rep.total:14.6e} {rep.mse:14.6e} {rep.physical:14.6e}"
        )
    return "\n".join(lines)


@dataclass
class PhysicalLossResult:
    normalized: float
    total_sum: float
    masked_count: int
    empty_mask: bool


def divergence(output) -> np.ndarray:
    """Two-channel equilibrium residual raster (2, h, w); borders are zero."""
    y = _channels(output)
    _, h, w = y.shape
    if h < 3 or w < 3:
        raise ValueError(f"rasters must be at least 3x3 for the stencil, got {h}x{w}")
    y1, y2, y3 = y[0], y[1], y[2]
    res = np.zeros((2, h, w), dtype=y.dtype)
    res[0, 1:-1, 1:-1] = (
        (y1[1:-1, 2:] - y1[1:-1, :-2]) + (y3[:-2, 1:-1] - y3[2:, 1:-1])
    )
    res[1, 1:-1, 1:-1] = (
        (y2[:-2, 1:-1] - y2[2:, 1:-1]) + (y3[1:-1, 2:] - y3[1:-1, :-2])
    )
    return res


def physical_loss(output, mask) -> PhysicalLossResult:
    """Masked sum of squared residuals, also divided by the masked pixel count."""
    m = _mask_array(mask)
    y = _channels(output)
    if m.shape != y.shape[1:]:
        raise ValueError("mask dimensions do not match rasters")
    res = divergence(y)
    total = float(np.sum(m * (res[0] ** 2 + res[1] ** 2)))
    count = int(np.count_nonzero(m))
    if count == 0:
        return PhysicalLossResult(0.0, 0.0, 0, empty_mask=True)
    return PhysicalLossResult(total / count, total, count, empty_mask=False)


def physical_loss_grad(output, mask) -> np.ndarray:
    """Gradient of the normalized physical loss w.r.t. the three rasters."""
    m = _mask_array(mask)
    y = _channels(output)
    if m.shape != y.shape[1:]:
        raise ValueError("mask dimensions do not match rasters")
    res = divergence(y)
    count = int(np.count_nonzero(m))
    grad = np.zeros_like(y)
    if count == 0:
        return grad
    rx = ((2.0 / count) * m * res[0])[1:-1, 1:-1]
    ry = ((2.0 / count) * m * res[1])[1:-1, 1:-1]
    g1, g2, g3 = grad[0], grad[1], grad[2]
    # adjoint of r_x: y1(c+1) +, y1(c-1) -, y3(r-1) +, y3(r+1) -
    g1[1:-1, 2:] += rx
    g1[1:-1, :-2] -= rx
    g3[:-2, 1:-1] += rx
    g3[2:, 1:-1] -= rx
    # adjoint of r_y: y2(r-1) +, y2(r+1) -, y3(c+1) +, y3(c-1) -
    g2[:-2, 1:-1] += ry
    g2[2:, 1:-1] -= ry
    g3[1:-1, 2:] += ry
    g3[1:-1, :-2] -= ry
    return grad


def mse_loss(output, target) -> tuple[float, np.ndarray]:
    """Mean squared error over all pixel-channel entries, and its gradient."""
    o = _channels(output)
    t = _channels(target)
    if o.shape != t.shape:
        raise ValueError(f"shape mismatch: {o.shape} vs {t.shape}")
    diff = o - t
    n = o.size
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff
