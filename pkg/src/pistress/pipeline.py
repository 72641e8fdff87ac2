"""End-to-end orchestration: dataset generation, training, evaluation.

Dataset layout under the data directory::

    manifest.jsonl          one JSON record per line; first line is the header
    images/<case>_coarse.npz / <case>_fine.npz   float rasters (base cases)
    pgm/<case>_<ch>_<res>.pgm                    8-bit exports per channel

The 63 base cases (x8 flip/inversion augmentations = 504 samples):

* cantilever (28): {fixed, sliding} x {x, y} x (concentrated at i*H/5 for
  i = 0..5, or distributed) on the tip edge x = 2H;
* L-bracket, arm tip edge x = 3d (28): same pattern, ordinates i*d/5;
* L-bracket, top edge y = 3d (7): fixed support, x-direction loads —
  6 concentrated ordinates plus 1 distributed.

Truss-like tri3 cases are generated separately as a validation-only split
and never appear in training batches.
"""
from __future__ import annotations

import dataclasses
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .codec import (
    ImageTriple,
    apply_augmentation,
    fit_contour_map,
    interior_mask,
    load_image_triple,
    node_load_pixels,
    rasterize,
    save_image_triple,
    transform_pixels,
    write_pgm,
)
from .config import RunConfig
from .fem import (
    LoadCase,
    Material,
    build_mesh_cantilever,
    build_mesh_lshape,
    build_mesh_truss_like,
    load_nodes,
    solve,
)
from .models import Model, ModelConfig, batch_loss
from .nn import ops
from .nn.optim import Adam
from .physloss import LossReport, loss_table, mse_loss, physical_loss

__all__ = [
    "DataError",
    "NumericalError",
    "SampleRecord",
    "DatasetManifest",
    "TrainRun",
    "EvalTable",
    "SampleLoader",
    "enumerate_base_cases",
    "generate_dataset",
    "train",
    "evaluate",
    "predict_ensemble",
    "super_resolve",
    "model_row_name",
    "footprint_mismatch",
]

MANIFEST_NAME = "manifest.jsonl"
_MANIFEST_VERSION = 1
_TRUSS_TEMPLATE = "truss_cantilever_v1"

# geometry scale and mesh sizes: cantilever H x 2H at H/10 and H/40,
# L-bracket arm width d at d/5 and d/20, truss base cell refined 1x and 4x
_CANT_H = 1.0
_LSHAPE_D = 1.0
_MESH_SIZES = {
    "cantilever": (_CANT_H / 10.0, _CANT_H / 40.0),
    "lshape": (_LSHAPE_D / 5.0, _LSHAPE_D / 20.0),
    "truss": (1.0 / 16.0, 1.0 / 64.0),
}


class DataError(RuntimeError):
    """Missing or inconsistent dataset artifacts."""


class NumericalError(RuntimeError):
    """Non-finite values encountered during training or evaluation."""


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    sample_id: str
    case_id: str
    family: str                      # "cantilever" | "lshape" | "truss"
    split: str                       # "train" | "test" | "validation"
    load_case: dict
    contour_map: dict                # {"c": ..., "s": ...} of the base images
    coarse_path: str
    fine_path: str
    load_pixels: list                # [[row, col], ...] on the base images
    lineage: dict                    # {"flip_h": b, "flip_v": b, "invert": b}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SampleRecord":
        return cls(**raw)

    @property
    def is_base(self) -> bool:
        return not any(self.lineage.values())


@dataclass
class DatasetManifest:
    header: dict
    records: list = field(default_factory=list)

    def base_records(self) -> list:
        return [r for r in self.records if r.is_base]

    def split_records(self, split: str) -> list:
        if split not in ("train", "test", "validation"):
            raise DataError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def validate(self, data_dir: str | Path) -> None:
        data_dir = Path(data_dir)
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise DataError(f"duplicate sample id {rec.sample_id!r}")
            seen.add(rec.sample_id)
            if rec.family == "truss" and rec.split != "validation":
                raise DataError(f"truss case {rec.case_id!r} outside validation split")
            for p in (rec.coarse_path, rec.fine_path):
                if not (data_dir / p).exists():
                    raise DataError(f"missing image file {p!r} for {rec.sample_id!r}")

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", **self.header}, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        lines = path.read_text().splitlines()
        if not lines:
            raise DataError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.pop("kind", None) != "header":
            raise DataError(f"{path}: first line is not a manifest header")
        if header.get("version") != _MANIFEST_VERSION:
            raise DataError(f"{path}: unsupported manifest version")
        records = [SampleRecord.from_dict(json.loads(ln)) for ln in lines[1:]]
        return cls(header=header, records=records)


# ---------------------------------------------------------------------------
# Case enumeration
# ---------------------------------------------------------------------------

def _family_cases(family: str, prefix: str, edge: str, edge_len: float,
                  constraints: tuple, directions: tuple) -> list:
    cases = []
    for con in constraints:
        for dirn in directions:
            for i in range(6):
                cases.append((
                    family,
                    f"{prefix}_{con}_c{dirn}_i{i}",
                    LoadCase(constraint_kind=con, load_kind="concentrated",
                             direction=dirn, location_parameter=i * edge_len / 5.0,
                             edge=edge),
                ))
            cases.append((
                family,
                f"{prefix}_{con}_d{dirn}",
                LoadCase(constraint_kind=con, load_kind="distributed",
                         direction=dirn, edge=edge),
            ))
    return cases


def enumerate_base_cases() -> list:
    """The documented 63 (family, case_id, LoadCase) base cases."""
    cases = _family_cases("cantilever", "cant", "load_edge", _CANT_H,
                          ("fixed", "sliding"), ("x", "y"))
    cases += _family_cases("lshape", "lsh", "load_edge", _LSHAPE_D,
                           ("fixed", "sliding"), ("x", "y"))
    cases += _family_cases("lshape", "lsh2", "load_edge2", _LSHAPE_D,
                           ("fixed",), ("x",))
    assert len(cases) == 63
    return cases


def enumerate_truss_cases() -> list:
    """Validation-only load cases on the truss-like cantilever."""
    mesh = build_mesh_truss_like(_TRUSS_TEMPLATE, _MESH_SIZES["truss"][0])
    tip = mesh.boundary_sets["load_edge"]
    ys = mesh.nodes[tip, 1]
    lo, hi = float(ys.min()), float(ys.max())
    cases = []
    for i, rel in enumerate((0.0, 0.5, 1.0)):
        cases.append((
            "truss", f"truss_fixed_cy_r{i}",
            LoadCase(constraint_kind="fixed", load_kind="concentrated",
                     direction="y", location_parameter=lo + rel * (hi - lo)),
        ))
    cases.append((
        "truss", "truss_fixed_cx_r1",
        LoadCase(constraint_kind="fixed", load_kind="concentrated",
                 direction="x", location_parameter=lo + 0.5 * (hi - lo)),
    ))
    cases.append(("truss", "truss_fixed_dy",
                  LoadCase(constraint_kind="fixed", load_kind="distributed",
                           direction="y")))
    cases.append(("truss", "truss_fixed_dx",
                  LoadCase(constraint_kind="fixed", load_kind="distributed",
                           direction="x")))
    return cases


def _build_meshes(family: str):
    coarse_h, fine_h = _MESH_SIZES[family]
    if family == "cantilever":
        return build_mesh_cantilever(_CANT_H, coarse_h), build_mesh_cantilever(_CANT_H, fine_h)
    if family == "lshape":
        return build_mesh_lshape(_LSHAPE_D, coarse_h), build_mesh_lshape(_LSHAPE_D, fine_h)
    if family == "truss":
        return (build_mesh_truss_like(_TRUSS_TEMPLATE, coarse_h),
                build_mesh_truss_like(_TRUSS_TEMPLATE, fine_h))
    raise DataError(f"unknown geometry family {family!r}")


_AUGMENTATIONS = [
    {"flip_h": fh, "flip_v": fv, "invert": inv}
    for fh in (False, True) for fv in (False, True) for inv in (False, True)
]


def _aug_suffix(lineage: dict) -> str:
    if not any(lineage.values()):
        return ""
    return ".h{:d}v{:d}i{:d}".format(
        lineage["flip_h"], lineage["flip_v"], lineage["invert"]
    )


def _generate_case(family, case_id, load, meshes, config, material):
    """Solve one base case on both meshes and rasterize. Returns record data."""
    coarse_mesh, fine_mesh = meshes
    h, w = config.canvas_height, config.canvas_width
    try:
        fine_field = solve(fine_mesh, material, load)
        coarse_field = solve(coarse_mesh, material, load)
    except Exception as exc:
        raise DataError(f"FEM solve failed for case {case_id!r}: {exc}") from exc
    cmap = fit_contour_map(fine_field)
    fine_img = rasterize(fine_field, cmap, w, h, case_id=case_id)
    coarse_img = rasterize(coarse_field, cmap, w, h, case_id=case_id)
    if not np.array_equal(fine_img.footprint, coarse_img.footprint):
        raise DataError(f"case {case_id!r}: coarse/fine footprints differ")
    pixels = node_load_pixels(fine_mesh, load_nodes(fine_mesh, load), w, h)
    return coarse_img, fine_img, cmap, pixels


def generate_dataset(config: RunConfig, *, pgm_exports: bool = True) -> DatasetManifest:
    """Generate all base cases, write images + manifest, return the manifest."""
    data_dir = config.resolved_data_dir
    (data_dir / "images").mkdir(parents=True, exist_ok=True)
    if pgm_exports:
        (data_dir / "pgm").mkdir(exist_ok=True)
    material = Material()

    base_cases = enumerate_base_cases()
    truss_cases = enumerate_truss_cases()
    meshes = {fam: _build_meshes(fam) for fam in ("cantilever", "lshape", "truss")}

    # 3:1 train:test split over the 63 cantilever + L-bracket base cases
    rng = np.random.default_rng(config.seed)
    case_ids = [cid for _, cid, _ in base_cases]
    order = rng.permutation(len(case_ids))
    n_test = round(len(case_ids) / 4)
    test_ids = {case_ids[i] for i in order[:n_test]}

    def run_case(args):
        family, case_id, load = args
        return _generate_case(family, case_id, load, meshes[family], config, material)

    all_cases = base_cases + truss_cases
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run_case, all_cases))
    else:
        results = [run_case(c) for c in all_cases]

    records = []
    phys_coarse, phys_fine = [], []
    for (family, case_id, load), (coarse_img, fine_img, cmap, pixels) in zip(
        all_cases, results
    ):
        coarse_rel = f"images/{case_id}_coarse.npz"
        fine_rel = f"images/{case_id}_fine.npz"
        save_image_triple(data_dir / coarse_rel, coarse_img)
        save_image_triple(data_dir / fine_rel, fine_img)
        if pgm_exports:
            for name, img in (("coarse", coarse_img), ("fine", fine_img)):
                for ch, chname in enumerate(codec.CHANNEL_NAMES):
                    write_pgm(data_dir / "pgm" / f"{case_id}_{chname}_{name}.pgm",
                              img.channels[ch])
        mask = interior_mask(fine_img, config.epsilon, pixels).mask
        phys_coarse.append(physical_loss(coarse_img.channels, mask).normalized)
        phys_fine.append(physical_loss(fine_img.channels, mask).normalized)
        if family == "truss":
            split = "validation"
            lineages = [_AUGMENTATIONS[0]]
        else:
            split = "test" if case_id in test_ids else "train"
            lineages = _AUGMENTATIONS
        for lineage in lineages:
            records.append(SampleRecord(
                sample_id=case_id + _aug_suffix(lineage),
                case_id=case_id,
                family=family,
                split=split,
                load_case=dataclasses.asdict(load),
                contour_map={"c": cmap.c, "s": cmap.s},
                coarse_path=coarse_rel,
                fine_path=fine_rel,
                load_pixels=[list(p) for p in pixels],
                lineage=dict(lineage),
            ))

    header = {
        "version": _MANIFEST_VERSION,
        "seed": config.seed,
        "canvas_height": config.canvas_height,
        "canvas_width": config.canvas_width,
        "epsilon": config.epsilon,
        "base_cases": len(base_cases),
        "augmentations": len(_AUGMENTATIONS),
        "samples": len(records),
        "case_selection": (
            "concentrated loads at six equispaced edge ordinates plus one "
            "distributed load, per direction and constraint kind; "
            "cantilever tip edge (28) + L-bracket arm tip edge (28) + "
            "L-bracket top edge, fixed support, x loads (7)"
        ),
        "mean_coarse_physical": float(np.mean(phys_coarse)),
        "mean_fine_physical": float(np.mean(phys_fine)),
    }
    manifest = DatasetManifest(header=header, records=records)
    manifest.save(data_dir / MANIFEST_NAME)
    return manifest


# ---------------------------------------------------------------------------
# Sample loading
# ---------------------------------------------------------------------------

class SampleLoader:
    """Materializes (input, target, mask) arrays from manifest records.

    Base images are cached; flips/inversions are applied on the fly so the
    504-sample augmented set costs only the 63 base images in memory.
    """

    def __init__(self, manifest: DatasetManifest, data_dir: str | Path,
                 epsilon: float):
        self.manifest = manifest
        self.data_dir = Path(data_dir)
        self.epsilon = epsilon
        self._cache: dict[str, ImageTriple] = {}

    def _image(self, rel_path: str) -> ImageTriple:
        img = self._cache.get(rel_path)
        if img is None:
            full = self.data_dir / rel_path
            if not full.exists():
                raise DataError(f"missing image file: {full}")
            img = load_image_triple(full)
            img.channels = img.channels.astype(np.float32)
            self._cache[rel_path] = img
        return img

    def load(self, rec: SampleRecord):
        """Returns (coarse (3,h,w) f32, fine (3,h,w) f32, mask (h,w) bool)."""
        lin = rec.lineage
        coarse = self._image(rec.coarse_path)
        fine = self._image(rec.fine_path)
        pixels = [tuple(p) for p in rec.load_pixels]
        if any(lin.values()):
            coarse = apply_augmentation(coarse, lin["flip_h"], lin["flip_v"], lin["invert"])
            fine = apply_augmentation(fine, lin["flip_h"], lin["flip_v"], lin["invert"])
            pixels = transform_pixels(pixels, lin["flip_h"], lin["flip_v"],
                                      fine.height, fine.width)
        mask = interior_mask(fine, self.epsilon, pixels).mask
        return (coarse.channels.astype(np.float32),
                fine.channels.astype(np.float32),
                mask.astype(bool))

    def batch(self, records: list):
        arrays = [self.load(r) for r in records]
        x = np.stack([a[0] for a in arrays])
        t = np.stack([a[1] for a in arrays])
        m = np.stack([a[2] for a in arrays])
        return x, t, m

    def footprint(self, rec: SampleRecord) -> np.ndarray:
        """Domain footprint of one record, with the lineage flips applied."""
        fp = self._image(rec.fine_path).footprint
        if fp is None:
            raise DataError(f"image for {rec.case_id!r} has no footprint")
        if rec.lineage["flip_h"]:
            fp = fp[:, ::-1]
        if rec.lineage["flip_v"]:
            fp = fp[::-1, :]
        return np.ascontiguousarray(fp)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainRun:
    seed: int
    epochs: int
    batch_size: int
    learning_rate: float
    model_config: dict
    train_history: list = field(default_factory=list)   # LossReport per epoch
    test_history: list = field(default_factory=list)
    best_epoch: int = -1
    best_checkpoint: str = ""

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["train_history"] = [dataclasses.asdict(r) for r in self.train_history]
        out["test_history"] = [dataclasses.asdict(r) for r in self.test_history]
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def model_config_from_run(config: RunConfig) -> ModelConfig:
    return ModelConfig(
        depth=config.depth,
        base_channels=config.base_channels,
        variant=config.variant,
        physics_informed=config.physics_informed,
        physics_weight=config.physics_weight,
    )


def _mean_report(reports: list) -> LossReport:
    return LossReport(
        total=float(np.mean([r.total for r in reports])),
        mse=float(np.mean([r.mse for r in reports])),
        physical=float(np.mean([r.physical for r in reports])),
        pixel_count=int(sum(r.pixel_count for r in reports)),
        masked_count=int(sum(r.masked_count for r in reports)),
        physical_sum=float(np.sum([r.physical_sum for r in reports])),
    )


def _split_report(model: Model, loader: SampleLoader, records: list,
                  batch_size: int) -> LossReport:
    """Evaluation-style LossReport: total = mse + physical for every model."""
    reports = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        x, t, m = loader.batch(chunk)
        out = model.predict(x)
        for k in range(len(chunk)):
            mse, _ = mse_loss(out[k], t[k])
            phys = physical_loss(out[k], m[k])
            reports.append(LossReport(
                total=mse + phys.normalized,
                mse=mse,
                physical=phys.normalized,
                pixel_count=out[k].size,
                masked_count=phys.masked_count,
                physical_sum=phys.total_sum,
            ))
    return _mean_report(reports)


def train(manifest: DatasetManifest, config: RunConfig,
          seed: int | None = None, *, log=None) -> tuple[Model, TrainRun]:
    """Mini-batch Adam training on the train split.

    Per epoch the run records the average training-batch LossReport and a
    full test-split report; the checkpoint with the best test total is kept
    alongside the final model. With ``weight_averaging`` the final model is
    the average of all post-decay iterates (tail averaging).
    """
    ops.tune_allocator()
    seed = config.seed if seed is None else seed
    mcfg = model_config_from_run(config)
    mcfg.check_canvas(config.canvas_height, config.canvas_width)

    data_dir = config.resolved_data_dir
    loader = SampleLoader(manifest, data_dir, config.epsilon)
    train_recs = manifest.split_records("train")
    test_recs = manifest.split_records("test")
    if not train_recs:
        raise DataError("manifest has no training records")

    run_dir = Path(config.run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    model = Model(mcfg, seed=seed)
    opt = Adam(model.params(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng([seed, 0xD5])

    run = TrainRun(seed=seed, epochs=config.epochs, batch_size=config.batch_size,
                   learning_rate=config.learning_rate,
                   model_config=dataclasses.asdict(mcfg))
    best_total = np.inf
    best_path = ckpt_dir / "best.ckpt"
    # tail weight averaging: SGD noise dominates the loss landscape near the
    # identity-initialized optimum, so the average of the post-decay iterates
    # is a lower-variance estimate of the walk's center than the last iterate
    params = model.params()
    avg_sums: list | None = None
    avg_count = 0

    for epoch in range(config.epochs):
        opt.lr = config.learning_rate * (
            config.lr_decay_factor if epoch >= config.lr_decay_epoch else 1.0
        )
        perm = shuffle_rng.permutation(len(train_recs))
        epoch_reports = []
        for start in range(0, len(perm), config.batch_size):
            chunk = [train_recs[i] for i in perm[start : start + config.batch_size]]
            x, t, m = loader.batch(chunk)
            xin, out, tape = model.forward(x)
            if not (np.all(np.isfinite(out.value)) and np.all(np.isfinite(t))):
                raise NumericalError(
                    f"training diverged at epoch {epoch}: non-finite batch"
                )
            report, seeds = batch_loss(out.value, t, m, mcfg)
            if not np.isfinite(report.total):
                raise NumericalError(
                    f"training diverged at epoch {epoch}: loss {report.total}"
                )
            tape.backward(out, seeds)
            opt.step()
            if config.weight_averaging and epoch >= config.lr_decay_epoch:
                if avg_sums is None:
                    avg_sums = [p.value.astype(np.float64) for p in params]
                else:
                    for acc, p in zip(avg_sums, params):
                        acc += p.value
                avg_count += 1
            epoch_reports.append(report)
        run.train_history.append(_mean_report(epoch_reports))
        if test_recs:
            test_report = _split_report(model, loader, test_recs, config.batch_size)
        else:
            test_report = run.train_history[-1]
        run.test_history.append(test_report)
        if test_report.total < best_total:
            best_total = test_report.total
            run.best_epoch = epoch
            model.save(best_path)
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} "
                f"train total {run.train_history[-1].total:.6f} "
                f"test total {test_report.total:.6f} "
                f"test physical {test_report.physical:.6f}")

    if avg_count:
        for acc, p in zip(avg_sums, params):
            p.value[...] = (acc / avg_count).astype(p.value.dtype)

    model.save(ckpt_dir / "last.ckpt")
    run.best_checkpoint = str(best_path)
    run.save(run_dir / "train_run.json")
    return model, run


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def model_row_name(mcfg: ModelConfig) -> str:
    base = "UNet++" if mcfg.variant == "unetpp" else "UNet"
    return f"PI-{base}" if mcfg.physics_informed else base


@dataclass
class EvalTable:
    split: str
    rows: dict                        # name -> LossReport

    def to_text(self) -> str:
        return f"split: {self.split}\n" + loss_table(self.rows)

    def to_json(self) -> str:
        return json.dumps(
            {
                "split": self.split,
                "rows": {k: dataclasses.asdict(v) for k, v in self.rows.items()},
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalTable":
        raw = json.loads(text)
        return cls(
            split=raw["split"],
            rows={k: LossReport(**v) for k, v in raw["rows"].items()},
        )


def predict_ensemble(model: Model, channels: np.ndarray,
                     footprint: np.ndarray | None) -> np.ndarray:
    """Geometric self-ensemble prediction for one (3, h, w) image.

    Averages the model's outputs over the eight flip/inversion variants of
    the input, mapping each output back through the inverse transform.
    Flips and inversion are exact symmetries of the data (augmentation uses
    the same group), so the consistent part of the prediction survives while
    orientation-dependent noise averages out. Without a footprint the
    inversion variants are skipped (inversion touches only domain pixels).
    """
    acc = np.zeros(channels.shape, dtype=np.float64)
    count = 0
    for flip_h, flip_v, invert in itertools.product((False, True), repeat=3):
        if invert and footprint is None:
            continue
        ch = channels
        fp = footprint
        if flip_h:
            ch = ch[:, :, ::-1]
            fp = fp[:, ::-1] if fp is not None else None
        if flip_v:
            ch = ch[:, ::-1, :]
            fp = fp[::-1, :] if fp is not None else None
        ch = np.ascontiguousarray(ch, dtype=np.float32)
        if invert:
            ch = ch.copy()
            ch[:, fp] = 1.0 - ch[:, fp]
        out = model.predict(ch[None])[0].astype(np.float64)
        if invert:
            out[:, fp] = 1.0 - out[:, fp]
        if flip_v:
            out = out[:, ::-1, :]
        if flip_h:
            out = out[:, :, ::-1]
        acc += out
        count += 1
    return acc / count


def evaluate(model: Model, manifest: DatasetManifest, split: str,
             config: RunConfig) -> EvalTable:
    """Mean Total/MSE/physical over a split, plus the coarse-input baseline.

    Model outputs use the geometric self-ensemble (`predict_ensemble`), the
    same inference path as `super_resolve`. Every row uses
    total = mse + physical so rows are comparable across models trained
    with different objectives.
    """
    ops.tune_allocator()
    records = manifest.split_records(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    loader = SampleLoader(manifest, config.resolved_data_dir, config.epsilon)
    model.config.check_canvas(config.canvas_height, config.canvas_width)

    model_reports, coarse_reports = [], []
    for start in range(0, len(records), config.batch_size):
        chunk = records[start : start + config.batch_size]
        x, t, m = loader.batch(chunk)
        out = np.stack([
            predict_ensemble(model, x[k], loader.footprint(rec))
            for k, rec in enumerate(chunk)
        ])
        if not np.all(np.isfinite(out)):
            raise NumericalError("model produced non-finite outputs")
        for k in range(len(chunk)):
            for src, bucket in ((out[k], model_reports), (x[k], coarse_reports)):
                mse, _ = mse_loss(src, t[k])
                phys = physical_loss(src, m[k])
                bucket.append(LossReport(
                    total=mse + phys.normalized,
                    mse=mse,
                    physical=phys.normalized,
                    pixel_count=src.size,
                    masked_count=phys.masked_count,
                    physical_sum=phys.total_sum,
                ))
    return EvalTable(
        split=split,
        rows={
            model_row_name(model.config): _mean_report(model_reports),
            "Coarse": _mean_report(coarse_reports),
        },
    )


# ---------------------------------------------------------------------------
# Super-resolution inference
# ---------------------------------------------------------------------------

def footprint_mismatch(output_channels: np.ndarray, footprint: np.ndarray,
                       epsilon: float) -> float:
    """Fraction of footprint pixels where the output's implied footprint
    disagrees with the input's (background = all channels near white)."""
    pred = np.any(output_channels < 1.0 - epsilon, axis=0)
    n_fp = int(footprint.sum())
    if n_fp == 0:
        raise DataError("input footprint is empty")
    return float(np.logical_xor(pred, footprint).sum()) / n_fp


def super_resolve(model: Model, inputs: list, out_dir: str | Path,
                  config: RunConfig) -> list:
    """Super-resolve coarse image triples (self-ensemble inference); write
    the output triples, decoded stress rasters, and PGM previews. Returns
    per-input summaries."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    for item in inputs:
        if isinstance(item, ImageTriple):
            triple = item
        else:
            try:
                triple = load_image_triple(item)
            except codec.CodecError as exc:
                raise DataError(str(exc)) from exc
        model.config.check_canvas(triple.height, triple.width)
        out = predict_ensemble(
            model, triple.channels.astype(np.float32), triple.footprint
        )
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"non-finite output for {triple.case_id!r}")
        name = triple.case_id or "input"
        result = ImageTriple(
            channels=np.clip(out, 0.0, 1.0),
            contour_map=triple.contour_map,
            case_id=f"{name}_sr",
            footprint=triple.footprint,
        )
        sr_path = out_dir / f"{name}_sr.npz"
        save_image_triple(sr_path, result)
        stresses = triple.contour_map.stress(result.channels)
        np.savez_compressed(out_dir / f"{name}_sr_stress.npz",
                            sigma_x=stresses[0], sigma_y=stresses[1],
                            tau_xy=stresses[2])
        for ch, chname in enumerate(codec.CHANNEL_NAMES):
            write_pgm(out_dir / f"{name}_sr_{chname}.pgm", result.channels[ch])
        summary = {"case_id": name, "output": str(sr_path)}
        if triple.footprint is not None:
            summary["footprint_mismatch"] = footprint_mismatch(
                out, triple.footprint, config.epsilon
            )
        summaries.append(summary)
    (out_dir / "super_resolve.json").write_text(
        json.dumps(summaries, indent=2, sort_keys=True)
    )
    return summaries
