import dataclasses
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from pistress import pipeline
from pistress.codec import load_image_triple
from pistress.models import Model
from pistress.physloss import mse_loss, physical_loss
from tests.conftest import desk_config


class TestEnumeration:
    def test_63_base_cases(self):
        cases = pipeline.enumerate_base_cases()
        assert len(cases) == 63
        ids = [cid for _, cid, _ in cases]
        assert len(set(ids)) == 63

    def test_family_breakdown(self):
        cases = pipeline.enumerate_base_cases()
        fams = Counter(f for f, _, _ in cases)
        assert fams == {"cantilever": 28, "lshape": 35}

    def test_truss_cases_valid(self):
        cases = pipeline.enumerate_truss_cases()
        assert len(cases) >= 4
        assert all(f == "truss" for f, _, _ in cases)


class TestManifest:
    def test_counts_and_splits(self, dataset):
        _, manifest = dataset
        assert manifest.header["base_cases"] == 63
        base = [r for r in manifest.base_records() if r.family != "truss"]
        assert len(base) == 63
        non_truss = [r for r in manifest.records if r.family != "truss"]
        assert len(non_truss) == 63 * 8
        splits = Counter(r.split for r in non_truss)
        # 3:1 by base case: 47 train / 16 test cases
        assert splits["train"] == 47 * 8
        assert splits["test"] == 16 * 8

    def test_truss_isolated_to_validation(self, dataset):
        _, manifest = dataset
        for rec in manifest.records:
            if rec.family == "truss":
                assert rec.split == "validation"
        assert len(manifest.split_records("validation")) >= 4

    def test_split_hygiene_by_base_case(self, dataset):
        _, manifest = dataset
        by_case = {}
        for rec in manifest.records:
            by_case.setdefault(rec.case_id, set()).add(rec.split)
        for case_id, splits in by_case.items():
            assert len(splits) == 1, f"{case_id} straddles splits {splits}"

    def test_lineages_unique_per_case(self, dataset):
        _, manifest = dataset
        by_case = {}
        for rec in manifest.records:
            if rec.family == "truss":
                continue
            key = tuple(sorted(rec.lineage.items()))
            by_case.setdefault(rec.case_id, []).append(key)
        for case_id, lineages in by_case.items():
            assert len(lineages) == 8
            assert len(set(lineages)) == 8

    def test_files_exist_and_decode(self, dataset):
        cfg, manifest = dataset
        manifest.validate(cfg.resolved_data_dir)
        rec = manifest.base_records()[0]
        img = load_image_triple(cfg.resolved_data_dir / rec.fine_path)
        assert img.footprint is not None

    def test_footprints_identical_coarse_fine(self, dataset):
        cfg, manifest = dataset
        for rec in manifest.base_records()[::7]:
            c = load_image_triple(cfg.resolved_data_dir / rec.coarse_path)
            f = load_image_triple(cfg.resolved_data_dir / rec.fine_path)
            assert np.array_equal(c.footprint, f.footprint), rec.case_id

    def test_save_load_round_trip(self, dataset, tmp_path):
        _, manifest = dataset
        path = tmp_path / "m.jsonl"
        manifest.save(path)
        back = pipeline.DatasetManifest.load(path)
        assert back.header == manifest.header
        assert back.records == manifest.records

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(pipeline.DataError):
            pipeline.DatasetManifest.load(tmp_path / "nope.jsonl")

    def test_pgm_exports_present(self, dataset):
        cfg, manifest = dataset
        pgm = cfg.resolved_data_dir / "pgm"
        rec = manifest.base_records()[0]
        for ch in ("sx", "sy", "txy"):
            for res in ("coarse", "fine"):
                assert (pgm / f"{rec.case_id}_{ch}_{res}.pgm").exists()


class TestSampleLoader:
    def test_shapes_and_types(self, dataset):
        cfg, manifest = dataset
        loader = pipeline.SampleLoader(manifest, cfg.resolved_data_dir, cfg.epsilon)
        rec = next(r for r in manifest.records if not r.is_base)
        x, t, m = loader.load(rec)
        assert x.shape == t.shape == (3, cfg.canvas_height, cfg.canvas_width)
        assert m.shape == (cfg.canvas_height, cfg.canvas_width)
        assert x.dtype == np.float32 and m.dtype == bool

    def test_augmented_sample_is_transformed_base(self, dataset):
        cfg, manifest = dataset
        loader = pipeline.SampleLoader(manifest, cfg.resolved_data_dir, cfg.epsilon)
        base = next(r for r in manifest.records
                    if r.is_base and r.family == "cantilever")
        flipped = next(
            r for r in manifest.records
            if r.case_id == base.case_id
            and r.lineage == {"flip_h": True, "flip_v": False, "invert": False}
        )
        xb, tb, mb = loader.load(base)
        xf, tf, mf = loader.load(flipped)
        assert np.allclose(xf, xb[:, :, ::-1])
        assert np.array_equal(mf, mb[:, ::-1])


class TestTraining:
    def test_one_epoch_deterministic(self, small_dataset):
        cfg, manifest = small_dataset
        m1, r1 = pipeline.train(manifest, cfg)
        m2, r2 = pipeline.train(manifest, cfg)
        for k, v in m1.arrays().items():
            assert np.array_equal(v, m2.arrays()[k])
        assert r1.train_history[-1] == r2.train_history[-1]

    def test_history_lengths_and_artifacts(self, small_dataset):
        cfg, manifest = small_dataset
        cfg = cfg.replace(epochs=2, run_dir=cfg.run_dir + "_hist")
        model, run = pipeline.train(manifest, cfg)
        assert len(run.train_history) == 2
        assert len(run.test_history) == 2
        assert Path(run.best_checkpoint).exists()
        assert (Path(cfg.run_dir) / "train_run.json").exists()
        back = Model.load(run.best_checkpoint)
        assert back.config.variant == cfg.variant

    def test_identity_task_converges(self, small_dataset, tmp_path):
        # target = input: MSE falls below 1e-3 well within 50 epochs
        cfg, manifest = small_dataset
        records = []
        for rec in manifest.records[:]:
            if rec.split != "train":
                continue
            records.append(dataclasses.replace(rec, fine_path=rec.coarse_path))
        ident = pipeline.DatasetManifest(header=dict(manifest.header),
                                         records=records[:8])
        cfg = cfg.replace(epochs=25, run_dir=str(tmp_path / "ident"),
                          learning_rate=2e-3, physics_informed=False)
        model, run = pipeline.train(ident, cfg)
        assert min(r.mse for r in run.train_history) < 1e-3

    def test_nan_divergence_aborts(self, small_dataset, tmp_path):
        cfg, manifest = small_dataset
        # corrupt one training image with NaNs
        rec = next(r for r in manifest.records if r.split == "train")
        src = Path(cfg.resolved_data_dir) / rec.coarse_path
        data = dict(np.load(src))
        data["channels"] = np.full_like(data["channels"], np.nan)
        np.savez_compressed(src, **data)
        cfg = cfg.replace(run_dir=str(tmp_path / "nanrun"))
        with pytest.raises(pipeline.NumericalError):
            pipeline.train(manifest, cfg)

    def test_empty_train_split_rejected(self, small_dataset, tmp_path):
        cfg, manifest = small_dataset
        bad = pipeline.DatasetManifest(
            header=dict(manifest.header),
            records=[r for r in manifest.records if r.split != "train"],
        )
        cfg = cfg.replace(run_dir=str(tmp_path / "norun"))
        with pytest.raises(pipeline.DataError):
            pipeline.train(bad, cfg)


class TestEvaluate:
    def test_rows_and_consistency(self, small_dataset):
        cfg, manifest = small_dataset
        model, _ = pipeline.train(manifest, cfg)
        table = pipeline.evaluate(model, manifest, "test", cfg)
        name = pipeline.model_row_name(model.config)
        assert set(table.rows) == {name, "Coarse"}
        for rep in table.rows.values():
            assert rep.total == pytest.approx(rep.mse + rep.physical, rel=1e-9)

    def test_mean_matches_per_sample_recompute(self, small_dataset):
        cfg, manifest = small_dataset
        model, _ = pipeline.train(manifest, cfg)
        table = pipeline.evaluate(model, manifest, "test", cfg)
        loader = pipeline.SampleLoader(manifest, cfg.resolved_data_dir, cfg.epsilon)
        recs = manifest.split_records("test")
        mses, physs = [], []
        for r in recs:
            x, t, m = loader.load(r)
            out = pipeline.predict_ensemble(model, x, loader.footprint(r))
            mses.append(mse_loss(out, t)[0])
            physs.append(physical_loss(out, m).normalized)
        name = pipeline.model_row_name(model.config)
        assert table.rows[name].mse == pytest.approx(np.mean(mses), rel=1e-6)
        assert table.rows[name].physical == pytest.approx(np.mean(physs), rel=1e-6)

    def test_empty_split_rejected(self, small_dataset):
        cfg, manifest = small_dataset
        model, _ = pipeline.train(manifest, cfg)
        empty = pipeline.DatasetManifest(header=dict(manifest.header), records=[])
        with pytest.raises(pipeline.DataError):
            pipeline.evaluate(model, empty, "test", cfg)

    def test_json_round_trip(self, small_dataset):
        cfg, manifest = small_dataset
        model, _ = pipeline.train(manifest, cfg)
        table = pipeline.evaluate(model, manifest, "validation", cfg)
        back = pipeline.EvalTable.from_json(table.to_json())
        assert back.split == table.split
        assert back.rows == table.rows


class TestSuperResolve:
    def test_outputs_written(self, small_dataset, tmp_path):
        cfg, manifest = small_dataset
        model, _ = pipeline.train(manifest, cfg)
        rec = manifest.split_records("validation")[0]
        src = Path(cfg.resolved_data_dir) / rec.coarse_path
        out_dir = tmp_path / "sr"
        summaries = pipeline.super_resolve(model, [src], out_dir, cfg)
        assert len(summaries) == 1
        s = summaries[0]
        assert Path(s["output"]).exists()
        assert 0.0 <= s["footprint_mismatch"]
        assert (out_dir / "super_resolve.json").exists()
        out = load_image_triple(s["output"])
        assert out.channels.min() >= 0.0 and out.channels.max() <= 1.0

    def test_constant_input_finite(self, small_dataset, tmp_path):
        cfg, manifest = small_dataset
        model, _ = pipeline.train(manifest, cfg)
        from pistress.codec import ContourMap, ImageTriple

        ch = np.full((3, cfg.canvas_height, cfg.canvas_width), 0.5, np.float32)
        triple = ImageTriple(channels=ch, contour_map=ContourMap(1.0, 0.5),
                             case_id="const", footprint=np.ones(ch.shape[1:], bool))
        s = pipeline.super_resolve(model, [triple], tmp_path / "sr2", cfg)
        out = load_image_triple(s[0]["output"])
        assert np.all(out.channels > 0.0) and np.all(out.channels < 1.0)

    def test_corrupt_input_rejected(self, small_dataset, tmp_path):
        cfg, manifest = small_dataset
        model, _ = pipeline.train(manifest, cfg)
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"nope")
        with pytest.raises(pipeline.DataError):
            pipeline.super_resolve(model, [bad], tmp_path / "sr3", cfg)

    def test_flip_equivariance_logged_not_asserted(self, small_dataset, capsys):
        # measure (not assert) the flip-equivariance discrepancy
        cfg, manifest = small_dataset
        model, _ = pipeline.train(manifest, cfg)
        loader = pipeline.SampleLoader(manifest, cfg.resolved_data_dir, cfg.epsilon)
        rec = manifest.base_records()[0]
        x, _, _ = loader.load(rec)
        out = model.predict(x[None])[0]
        out_flipped = model.predict(x[None, :, :, ::-1].copy())[0][:, :, ::-1]
        disc = float(np.abs(out - out_flipped).mean())
        print(f"flip-equivariance discrepancy: {disc:.6f}")
        assert np.isfinite(disc)
