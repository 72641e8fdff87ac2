"""U-Net and U-Net++ topologies over the kernel set, plus loss composition.

Both variants map a 3-channel intensity image to a 3-channel image of the
same resolution through a 1x1-conv + sigmoid head. The head sees the last
decoder features concatenated with the logit of the (clipped) input image
and is initialized as the identity on those logit channels, so an untrained
model reproduces its input and training learns a correction on top of it
(global residual learning, standard for super-resolution). The
physics-informed flavor adds the masked equilibrium-residual penalty to the
MSE training objective; the plain flavor trains on MSE alone (the physical
loss is still reported).
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .nn.graph import Conv2d, Param, Tape, Var
from .nn.checkpoint import save_checkpoint, load_checkpoint, CheckpointError
from .physloss import LossReport, mse_loss, physical_loss, physical_loss_grad

__all__ = ["ModelConfig", "Model", "compose_loss", "batch_loss"]

# intensities are clipped to [LOGIT_CLIP, 1 - LOGIT_CLIP] before the logit
# transform feeding the head, keeping the skip channels finite
LOGIT_CLIP = 1e-3


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    base_channels: int = 16
    variant: str = "unet"             # "unet" | "unetpp"
    physics_informed: bool = False
    physics_weight: float = 1.0
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.variant not in ("unet", "unetpp"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.physics_weight < 0:
            raise ValueError("physics_weight must be >= 0")

    def check_canvas(self, height: int, width: int) -> None:
        div = 2 ** self.depth
        if height % div or width % div:
            raise ValueError(
                f"canvas {height}x{width} not divisible by 2^depth = {div}"
            )

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)


class Model:
    """Layered convolutional network with explicit forward/backward."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.layers: dict[str, Conv2d] = {}
        rng = np.random.default_rng(seed)
        if config.variant == "unet":
            self._build_unet(rng)
        else:
            self._build_unetpp(rng)

    # -- construction -----------------------------------------------------

    def _add(self, name: str, in_ch: int, out_ch: int, rng, ksize: int = 3) -> None:
        self.layers[name] = Conv2d(in_ch, out_ch, ksize, rng, self.dtype, name=name)

    def _build_unet(self, rng) -> None:
        cfg = self.config
        ch_in = cfg.in_channels
        for i in range(cfg.depth):
            c = cfg.level_channels(i)
            self._add(f"enc{i}a", ch_in, c, rng)
            self._add(f"enc{i}b", c, c, rng)
            ch_in = c
        cb = cfg.level_channels(cfg.depth)
        self._add("bott_a", ch_in, cb, rng)
        self._add("bott_b", cb, cb, rng)
        for i in reversed(range(cfg.depth)):
            c = cfg.level_channels(i)
            self._add(f"dec{i}_up", cfg.level_channels(i + 1), c, rng)
            self._add(f"dec{i}a", 2 * c, c, rng)
            self._add(f"dec{i}b", c, c, rng)
        self._add_head(rng)

    def _build_unetpp(self, rng) -> None:
        # nested dense skips: node (i, j) exists for i + j <= depth,
        # column 0 is the encoder backbone, the head sits on (0, depth)
        cfg = self.config
        for i in range(cfg.depth + 1):
            c = cfg.level_channels(i)
            cin = cfg.in_channels if i == 0 else cfg.level_channels(i - 1)
            self._add(f"x{i}_0a", cin, c, rng)
            self._add(f"x{i}_0b", c, c, rng)
        for j in range(1, cfg.depth + 1):
            for i in range(cfg.depth + 1 - j):
                c = cfg.level_channels(i)
                self._add(f"x{i}_{j}_up", cfg.level_channels(i + 1), c, rng)
                self._add(f"x{i}_{j}a", (j + 1) * c, c, rng)
                self._add(f"x{i}_{j}b", c, c, rng)
        self._add_head(rng)

    def _add_head(self, rng) -> None:
        # Residual head: a small conv branch computes a local correction to
        # the input logits (zero-initialized last layer), and the 1x1 head
        # over [decoder features, corrected logits] starts as the identity on
        # the logit channels, so sigmoid(head(...)) begins as the input copy.
        cfg = self.config
        c0 = cfg.level_channels(0)
        self._add("res_a", cfg.in_channels, c0, rng)
        self._add("res_b", c0, cfg.in_channels, rng)
        self.layers["res_b"].w.value[...] = 0.0
        self._add("head", c0 + cfg.in_channels, cfg.out_channels, rng, ksize=1)
        head = self.layers["head"]
        head.w.value[...] = 0.0
        for o in range(cfg.out_channels):
            head.w.value[o, c0 + o % cfg.in_channels, 0, 0] = 1.0

    # -- forward / backward -------------------------------------------------

    def _conv_block(self, tape: Tape, x: Var, name: str) -> Var:
        h = tape.relu(tape.conv2d(x, self.layers[f"{name}a"]))
        return tape.relu(tape.conv2d(h, self.layers[f"{name}b"]))

    def _corrected_logits(self, tape: Tape, zin: Var) -> Var:
        h = tape.relu(tape.conv2d(zin, self.layers["res_a"]))
        return tape.add(zin, tape.conv2d(h, self.layers["res_b"]))

    def forward(self, x: np.ndarray) -> tuple[Var, Var, Tape]:
        """Returns (input var, output var, tape). Output values lie in (0, 1)."""
        cfg = self.config
        self.config.check_canvas(x.shape[2], x.shape[3])
        tape = Tape()
        xin = tape.input(x.astype(self.dtype, copy=False))
        clipped = np.clip(xin.value, LOGIT_CLIP, 1.0 - LOGIT_CLIP)
        zin = tape.input(np.log(clipped / (1.0 - clipped)).astype(self.dtype))
        if cfg.variant == "unet":
            out = self._forward_unet(tape, xin, zin)
        else:
            out = self._forward_unetpp(tape, xin, zin)
        return xin, out, tape

    def _forward_unet(self, tape: Tape, xin: Var, zin: Var) -> Var:
        cfg = self.config
        skips = []
        h = xin
        for i in range(cfg.depth):
            h = self._conv_block(tape, h, f"enc{i}")
            skips.append(h)
            h = tape.maxpool2x2(h)
        h = self._conv_block(tape, h, "bott_")
        for i in reversed(range(cfg.depth)):
            h = tape.relu(tape.conv2d(tape.upsample2x(h), self.layers[f"dec{i}_up"]))
            h = tape.concat([skips[i], h])
            h = self._conv_block(tape, h, f"dec{i}")
        h = tape.concat([h, self._corrected_logits(tape, zin)])
        return tape.sigmoid(tape.conv2d(h, self.layers["head"]))

    def _forward_unetpp(self, tape: Tape, xin: Var, zin: Var) -> Var:
        cfg = self.config
        nodes: dict[tuple[int, int], Var] = {}
        h = xin
        for i in range(cfg.depth + 1):
            if i > 0:
                h = tape.maxpool2x2(h)
            h = self._conv_block(tape, h, f"x{i}_0")
            nodes[(i, 0)] = h
        for j in range(1, cfg.depth + 1):
            for i in range(cfg.depth + 1 - j):
                up = tape.relu(
                    tape.conv2d(
                        tape.upsample2x(nodes[(i + 1, j - 1)]),
                        self.layers[f"x{i}_{j}_up"],
                    )
                )
                cat = tape.concat([nodes[(i, k)] for k in range(j)] + [up])
                nodes[(i, j)] = self._conv_block(tape, cat, f"x{i}_{j}")
        h = tape.concat([nodes[(0, cfg.depth)], self._corrected_logits(tape, zin)])
        return tape.sigmoid(tape.conv2d(h, self.layers["head"]))

    def predict(self, x: np.ndarray) -> np.ndarray:
        _, out, _ = self.forward(x)
        return out.value

    # -- parameters -----------------------------------------------------------

    def params(self) -> list[Param]:
        out = []
        for layer in self.layers.values():
            out.extend(layer.params())
        return out

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers.values():
            out.update(layer.arrays())
        return out

    def save(self, path) -> None:
        save_checkpoint(path, asdict(self.config), self.arrays())

    @classmethod
    def load(cls, path) -> "Model":
        config, arrays = load_checkpoint(path)
        model = cls(ModelConfig(**config))
        own = model.arrays()
        if set(own) != set(arrays):
            raise CheckpointError("checkpoint layer set does not match config")
        for name, value in arrays.items():
            if own[name].shape != value.shape:
                raise CheckpointError(f"shape mismatch for {name!r}")
            own[name][...] = value
        return model


# ---------------------------------------------------------------------------
# Loss composition
# ---------------------------------------------------------------------------

def compose_loss(
    output: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray | None,
    config: ModelConfig,
) -> tuple[LossReport, np.ndarray]:
    """Loss report and gradient seed for one (3, h, w) sample.

    Training objective: mse + physics_weight * physical for the PI flavor,
    mse alone otherwise (physical loss is still reported for comparison).
    """
    mse, gmse = mse_loss(output, target)
    if config.physics_informed and mask is None:
        raise ValueError("physics-informed loss requires an interior mask")
    if mask is not None:
        phys = physical_loss(output, mask)
        physical = phys.normalized
        physical_sum = phys.total_sum
        masked = phys.masked_count
    else:
        physical = physical_sum = 0.0
        masked = 0
    if config.physics_informed:
        total = mse + config.physics_weight * physical
        seed = gmse + config.physics_weight * physical_loss_grad(output, mask)
    else:
        total = mse
        seed = gmse
    report = LossReport(
        total=total,
        mse=mse,
        physical=physical,
        pixel_count=int(np.asarray(output).size),
        masked_count=masked,
        physical_sum=physical_sum,
    )
    report.validate()
    return report, seed


def batch_loss(
    outputs: np.ndarray,
    targets: np.ndarray,
    masks: np.ndarray | None,
    config: ModelConfig,
) -> tuple[LossReport, np.ndarray]:
    """Average of per-sample losses over a (n, 3, h, w) batch, with seed."""
    n = outputs.shape[0]
    seeds = np.zeros_like(outputs)
    reports = []
    for k in range(n):
        mask = masks[k] if masks is not None else None
        rep, seed = compose_loss(outputs[k], targets[k], mask, config)
        reports.append(rep)
        seeds[k] = seed / n
    report = LossReport(
        total=float(np.mean([r.total for r in reports])),
        mse=float(np.mean([r.mse for r in reports])),
        physical=float(np.mean([r.physical for r in reports])),
        pixel_count=int(outputs.size),
        masked_count=int(sum(r.masked_count for r in reports)),
        physical_sum=float(np.sum([r.physical_sum for r in reports])),
    )
    return report, seeds
