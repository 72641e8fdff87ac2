"""Run configuration: one flat key-value file (JSON or TOML) per run.

Schema (all keys optional, defaults below):

==================  =========  ==========================================
key                 type       meaning
==================  =========  ==========================================
run_dir             str        output directory for checkpoints/tables
data_dir            str        dataset directory (default: run_dir/data)
seed                int        master seed for generation and training
canvas_height       int        raster canvas height in pixels
canvas_width        int        raster canvas width in pixels
epsilon             float      background threshold for the interior mask
depth               int        U-Net depth (number of poolings)
base_channels       int        channels at the top level
variant             str        "unet" | "unetpp"
physics_informed    bool       train with the equilibrium-residual penalty
physics_weight      float      weight of the physics term in the objective
epochs              int        training epochs
batch_size          int        minibatch size
learning_rate       float      Adam step size
lr_decay_epoch      int        epoch at which the step size is multiplied
lr_decay_factor     float      ...by this factor (1.0 disables decay)
weight_averaging    bool       average weights over the post-decay epochs
threads             int        worker cap for dataset generation
==================  =========  ==========================================

Unknown keys are rejected so typos fail loudly instead of silently using
defaults. ``PISTRESS_THREADS`` overrides ``threads`` from the environment.
"""
from __future__ import annotations

import dataclasses
import json
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path

__all__ = ["RunConfig", "ConfigError", "load_config"]


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    run_dir: str = "runs/default"
    data_dir: str | None = None
    seed: int = 0
    canvas_height: int = 192
    canvas_width: int = 256
    epsilon: float = 0.02
    depth: int = 3
    base_channels: int = 8
    variant: str = "unet"
    physics_informed: bool = False
    physics_weight: float = 1.0
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_decay_epoch: int = 150
    lr_decay_factor: float = 0.1
    weight_averaging: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        for key in ("canvas_height", "canvas_width", "depth", "base_channels",
                    "epochs", "batch_size", "threads"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5)")
        if self.variant not in ("unet", "unetpp"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.physics_weight < 0:
            raise ConfigError("physics_weight must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError("lr_decay_factor must lie in (0, 1]")

    @property
    def resolved_data_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.run_dir) / "data"

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(raw: dict) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = RunConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Read a JSON or TOML config file; ``overrides`` take precedence."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        else:
            raw = json.loads(path.read_text())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a flat key-value table")
    raw.update(overrides or {})
    env_threads = os.environ.get("PISTRESS_THREADS")
    if env_threads:
        try:
            raw["threads"] = int(env_threads)
        except ValueError as exc:
            raise ConfigError(f"PISTRESS_THREADS must be an integer: {env_threads!r}") from exc
    return _coerce(raw)
