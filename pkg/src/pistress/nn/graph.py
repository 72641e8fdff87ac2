"""Layer parameters and a recording tape over the closed kernel set.

The tape is not a general autodiff engine: it only wires together the
kernels from :mod:`pistress.nn.ops` for the static U-Net-family graphs.
Parameter gradients accumulate into ``Param.grad``; activation gradients
accumulate in reverse recording order, which is fixed and deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops

__all__ = ["Param", "Conv2d", "Tape", "Var", "he_normal"]


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None        # Adam first moment
    v: np.ndarray = None        # Adam second moment

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d:
    """Same-padded conv layer holding its weight/bias parameters."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = ""):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.name = name
        fan_in = in_ch * ksize * ksize
        self.w = Param(he_normal(rng, (out_ch, in_ch, ksize, ksize), fan_in, dtype))
        self.b = Param(np.zeros(out_ch, dtype=dtype))

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.w": self.w.value, f"{self.name}.b": self.b.value}


class Var:
    """Activation node: value plus accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = None

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


class Tape:
    """Records op applications for one forward pass; replays adjoints."""

    def __init__(self):
        self._records: list = []

    def input(self, x: np.ndarray) -> Var:
        return Var(x)

    def conv2d(self, x: Var, layer: Conv2d) -> Var:
        y, cache = ops.conv2d_forward(x.value, layer.w.value, layer.b.value)
        out = Var(y)

        def bwd():
            dx, dw, db = ops.conv2d_backward(out.grad, cache)
            layer.w.grad += dw
            layer.b.grad += db
            x.add_grad(dx)

        self._records.append((out, bwd))
        return out

    def relu(self, x: Var) -> Var:
        y, cache = ops.relu_forward(x.value)
        out = Var(y)
        self._records.append((out, lambda: x.add_grad(ops.relu_backward(out.grad, cache))))
        return out

    def sigmoid(self, x: Var) -> Var:
        y, cache = ops.sigmoid_forward(x.value)
        out = Var(y)
        self._records.append(
            (out, lambda: x.add_grad(ops.sigmoid_backward(out.grad, cache)))
        )
        return out

    def maxpool2x2(self, x: Var) -> Var:
        y, cache = ops.maxpool2x2_forward(x.value)
        out = Var(y)
        self._records.append(
            (out, lambda: x.add_grad(ops.maxpool2x2_backward(out.grad, cache)))
        )
        return out

    def upsample2x(self, x: Var) -> Var:
        out = Var(ops.upsample2x_forward(x.value))
        self._records.append(
            (out, lambda: x.add_grad(ops.upsample2x_backward(out.grad)))
        )
        return out

    def add(self, a: Var, b: Var) -> Var:
        out = Var(a.value + b.value)

        def bwd():
            a.add_grad(out.grad)
            b.add_grad(out.grad)

        self._records.append((out, bwd))
        return out

    def concat(self, parts: list[Var]) -> Var:
        sizes = [p.value.shape[1] for p in parts]
        out = Var(ops.concat_forward([p.value for p in parts]))

        def bwd():
            for p, dp in zip(parts, ops.concat_backward(out.grad, sizes)):
                p.add_grad(dp)

        self._records.append((out, bwd))
        return out

    def backward(self, output: Var, seed: np.ndarray) -> None:
        output.add_grad(seed)
        for out, bwd in reversed(self._records):
            if out.grad is not None:
                bwd()
