import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from pistress import pipeline
from pistress.config import RunConfig

# one shared dataset for pipeline/CLI/acceptance tests (generation ~40 s)
_DESK = json.loads(
    (Path(__file__).resolve().parent.parent / "configs" / "desk.json").read_text()
)


def desk_config(**overrides) -> RunConfig:
    raw = dict(_DESK)
    raw.update(overrides)
    return RunConfig(**raw)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    """Full generated dataset (63 base cases + truss validation)."""
    run_dir = tmp_path_factory.mktemp("dataset_run")
    cfg = desk_config(run_dir=str(run_dir))
    manifest = pipeline.generate_dataset(cfg)
    return cfg, manifest


@pytest.fixture()
def small_dataset(dataset, tmp_path):
    """Manifest restricted to a few base cases, sharing the session images."""
    cfg, manifest = dataset
    data_dir = cfg.resolved_data_dir
    small_dir = tmp_path / "data"
    (small_dir / "images").mkdir(parents=True)
    keep_train = sorted({r.case_id for r in manifest.records if r.split == "train"})[:2]
    keep_test = sorted({r.case_id for r in manifest.records if r.split == "test"})[:1]
    keep_val = ["truss_fixed_dy"]
    keep = set(keep_train + keep_test + keep_val)
    records = [r for r in manifest.records if r.case_id in keep]
    for rec in {r.coarse_path for r in records} | {r.fine_path for r in records}:
        shutil.copy(data_dir / rec, small_dir / rec)
    small = pipeline.DatasetManifest(header=dict(manifest.header), records=records)
    small.header["samples"] = len(records)
    small.save(small_dir / pipeline.MANIFEST_NAME)
    small_cfg = desk_config(
        run_dir=str(tmp_path / "run"), data_dir=str(small_dir),
        epochs=1, batch_size=4,
    )
    return small_cfg, small
