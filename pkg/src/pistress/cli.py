"""Command-line interface.

Subcommands::

    pistress gen-data      --config run.json [--seed N]
    pistress train         --config run.json [--seed N]
    pistress eval          --config run.json [--checkpoint PATH] [--split NAME]
    pistress super-resolve --config run.json [--checkpoint PATH] inputs...
    pistress selftest

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure. Each command prints one machine-readable ``pistress-result {...}``
JSON line on success; diagnostics go to stderr. A lock file in the run
directory prevents concurrent writers.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .models import Model
from .nn.checkpoint import CheckpointError
from .pipeline import DataError, NumericalError

__all__ = ["main"]

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class LockError(RuntimeError):
    pass


@contextmanager
def _run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".pistress.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"run directory is locked by another process: {lock} "
            "(remove the file if no pistress process is running)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _emit(payload: dict) -> None:
    print("pistress-result " + json.dumps(payload, sort_keys=True))


def _load_run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _load_manifest(config: RunConfig) -> pipeline.DatasetManifest:
    return pipeline.DatasetManifest.load(
        config.resolved_data_dir / pipeline.MANIFEST_NAME
    )


def _checkpoint_path(config: RunConfig, args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    return Path(config.run_dir) / "checkpoints" / "last.ckpt"


def cmd_gen_data(args) -> None:
    config = _load_run_config(args)
    with _run_lock(Path(config.run_dir)):
        manifest = pipeline.generate_dataset(config)
    _emit({
        "command": "gen-data",
        "data_dir": str(config.resolved_data_dir),
        "base_cases": manifest.header["base_cases"],
        "samples": manifest.header["samples"],
    })


def cmd_train(args) -> None:
    config = _load_run_config(args)
    manifest = _load_manifest(config)
    with _run_lock(Path(config.run_dir)):
        model, run = pipeline.train(
            manifest, config, log=lambda msg: print(msg, file=sys.stderr)
        )
    _emit({
        "command": "train",
        "checkpoint": run.best_checkpoint,
        "best_epoch": run.best_epoch,
        "final_train_total": run.train_history[-1].total,
        "final_test_total": run.test_history[-1].total,
    })


def cmd_eval(args) -> None:
    config = _load_run_config(args)
    manifest = _load_manifest(config)
    ckpt = _checkpoint_path(config, args)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    model = Model.load(ckpt)
    table = pipeline.evaluate(model, manifest, args.split, config)
    out_dir = Path(config.run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"eval_{args.split}.json").write_text(table.to_json())
    (out_dir / f"eval_{args.split}.txt").write_text(table.to_text() + "\n")
    print(table.to_text(), file=sys.stderr)
    _emit({
        "command": "eval",
        "split": args.split,
        "rows": {k: {"total": v.total, "mse": v.mse, "physical": v.physical}
                 for k, v in table.rows.items()},
    })


def cmd_super_resolve(args) -> None:
    config = _load_run_config(args)
    ckpt = _checkpoint_path(config, args)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    if not args.inputs:
        raise ConfigError("super-resolve requires at least one input image")
    for p in args.inputs:
        if not Path(p).exists():
            raise DataError(f"input image not found: {p}")
    model = Model.load(ckpt)
    out_dir = Path(config.run_dir) / "super_resolved"
    summaries = pipeline.super_resolve(model, args.inputs, out_dir, config)
    _emit({"command": "super-resolve", "outputs": summaries})


def cmd_selftest(args) -> None:
    failures = _selftest(print_fn=lambda msg: print(msg, file=sys.stderr))
    if failures:
        raise NumericalError("; ".join(failures))
    _emit({"command": "selftest", "status": "ok"})


def _selftest(print_fn) -> list:
    """Patch test, codec round trip, kernel + model gradient checks."""
    failures = []

    def check(name, fn):
        try:
            fn()
            print_fn(f"selftest: {name}: ok")
        except Exception as exc:
            print_fn(f"selftest: {name}: FAIL: {exc}")
            failures.append(f"{name}: {exc}")

    def patch_test():
        from .fem import LoadCase, Material, build_mesh_cantilever, solve

        mesh = build_mesh_cantilever(1.0, 0.25)
        load = LoadCase(constraint_kind="sliding", load_kind="distributed",
                        direction="x")
        field = solve(mesh, Material(), load)
        sx = field.sigma_x
        ref = 1000.0 / (1.0 * 0.01)    # total load / (height * thickness)
        if not np.allclose(sx, ref, rtol=1e-8):
            raise AssertionError(f"patch test stress spread {np.ptp(sx):.3e}")

    def codec_round_trip():
        from .codec import decode, fit_contour_map, rasterize
        from .fem import LoadCase, Material, build_mesh_cantilever, solve

        mesh = build_mesh_cantilever(1.0, 0.1)
        load = LoadCase(constraint_kind="fixed", load_kind="distributed",
                        direction="y")
        field = solve(mesh, Material(), load)
        cmap = fit_contour_map(field)
        img = rasterize(field, cmap, 256, 192)
        stresses, background = decode(img)
        if not np.all(np.isfinite(stresses)):
            raise AssertionError("decoded stresses not finite")
        quant = abs(cmap.c) / 255.0
        # round trip through 8-bit quantization stays within one step
        re_img = np.clip(cmap.intensity(stresses), 0.0, 1.0)
        if np.abs(re_img - img.channels).max() > quant:
            raise AssertionError("codec round trip exceeded quantization step")

    def kernel_gradients():
        from .nn import ops

        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 8, 12))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        y, cache = ops.conv2d_forward(x, w, b)
        dy = rng.standard_normal(y.shape)
        dx, dw, db = ops.conv2d_backward(dy, cache)
        eps = 1e-6

        def f(xx):
            yy, _ = ops.conv2d_forward(xx, w, b)
            return float((yy * dy).sum())

        idx = (1, 2, 3, 5)
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        fd = (f(xp) - f(xm)) / (2 * eps)
        if abs(fd - dx[idx]) > 1e-4 * max(1.0, abs(fd)):
            raise AssertionError(f"conv dx mismatch {fd} vs {dx[idx]}")

    def model_gradient():
        from .models import Model, ModelConfig, batch_loss

        cfg = ModelConfig(depth=2, base_channels=4, physics_informed=True)
        model = Model(cfg, seed=0, dtype=np.float64)
        rng = np.random.default_rng(1)
        x = rng.random((1, 3, 8, 16))
        t = rng.random((1, 3, 8, 16))
        m = np.ones((1, 8, 16), dtype=bool)

        def total():
            _, out, tape = model.forward(x)
            rep, seeds = batch_loss(out.value, t, m, cfg)
            return rep.total, out, tape, seeds

        val, out, tape, seeds = total()
        tape.backward(out, seeds)
        p = model.params()[0]
        g = p.grad.reshape(-1)[0]
        eps = 1e-6
        p.value.reshape(-1)[0] += eps
        vp, *_ = total()
        p.value.reshape(-1)[0] -= 2 * eps
        vm, *_ = total()
        p.value.reshape(-1)[0] += eps
        fd = (vp - vm) / (2 * eps)
        if abs(fd - g) > 1e-4 * max(1.0, abs(fd), abs(g)):
            raise AssertionError(f"model gradient mismatch {fd} vs {g}")

    check("fem-patch-test", patch_test)
    check("codec-round-trip", codec_round_trip)
    check("nn-kernel-gradients", kernel_gradients)
    check("model-gradient", model_gradient)
    return failures


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pistress",
        description="Stress-contour super-resolution toolkit "
                    "(FEM data generation + physics-informed U-Net).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_config=True, checkpoint=False, extra=None):
        p = sub.add_parser(name)
        if needs_config:
            p.add_argument("--config", required=True, help="run config file (JSON/TOML)")
            p.add_argument("--seed", type=int, default=None, help="override config seed")
        if checkpoint:
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path (default: <run_dir>/checkpoints/last.ckpt)")
        if extra:
            extra(p)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data)
    add("train", cmd_train)
    add("eval", cmd_eval, checkpoint=True,
        extra=lambda p: p.add_argument("--split", default="test",
                                       choices=("train", "test", "validation")))
    add("super-resolve", cmd_super_resolve, checkpoint=True,
        extra=lambda p: p.add_argument("inputs", nargs="*",
                                       help="coarse image triples (.npz)"))
    add("selftest", cmd_selftest, needs_config=False)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"pistress: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, LockError, FileNotFoundError) as exc:
        print(f"pistress: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"pistress: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
