#!/usr/bin/env python3
"""Three-seed comparison of UNet vs PI-UNet on the generated dataset.

Generates the dataset once, trains both flavors for each seed, and prints
per-seed and median loss tables for the test and validation splits —
the orderings of interest are physical(PI-UNet) < physical(UNet) and
model MSE < coarse-baseline MSE.

Usage:
    python scripts/run_experiment.py [--config configs/desk.json]
        [--out runs/experiment] [--seeds 0 1 2]
"""
import argparse
import json
import statistics
import sys
import time
from pathlib import Path

from pistress import pipeline
from pistress.config import load_config


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out", default="runs/experiment")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    base = load_config(args.config, {"run_dir": args.out})
    data_dir = base.resolved_data_dir
    if (data_dir / pipeline.MANIFEST_NAME).exists():
        manifest = pipeline.DatasetManifest.load(data_dir / pipeline.MANIFEST_NAME)
        print(f"reusing dataset in {data_dir}", flush=True)
    else:
        t0 = time.time()
        manifest = pipeline.generate_dataset(base)
        print(f"generated dataset in {time.time() - t0:.0f}s", flush=True)

    results = {}   # (flavor, seed) -> {split: EvalTable}
    for seed in args.seeds:
        for physics in (False, True):
            flavor = "pi-unet" if physics else "unet"
            cfg = base.replace(
                run_dir=f"{args.out}/{flavor}_s{seed}",
                seed=seed,
                physics_informed=physics,
            )
            t0 = time.time()
            model, run = pipeline.train(
                manifest, cfg,
                log=lambda m: print(f"  [{flavor} s{seed}] {m}", flush=True),
            )
            tables = {}
            for split in ("test", "validation"):
                table = pipeline.evaluate(model, manifest, split, cfg)
                tables[split] = table
                Path(cfg.run_dir, f"eval_{split}.json").write_text(table.to_json())
                print(f"[{flavor} s{seed}] {table.to_text()}", flush=True)
            results[(flavor, seed)] = tables
            print(f"[{flavor} s{seed}] trained+evaluated in {time.time() - t0:.0f}s",
                  flush=True)

    summary = {}
    for split in ("test", "validation"):
        summary[split] = {}
        for flavor in ("unet", "pi-unet"):
            rows = [next(v for k, v in results[(flavor, s)][split].rows.items()
                         if k != "Coarse")
                    for s in args.seeds]
            summary[split][flavor] = {
                "median_total": statistics.median(r.total for r in rows),
                "median_mse": statistics.median(r.mse for r in rows),
                "median_physical": statistics.median(r.physical for r in rows),
            }
        coarse = results[("unet", args.seeds[0])][split].rows["Coarse"]
        summary[split]["coarse"] = {
            "total": coarse.total, "mse": coarse.mse, "physical": coarse.physical,
        }
    Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
