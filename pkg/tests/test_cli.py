import json
from pathlib import Path

import numpy as np
import pytest

from pistress import cli, pipeline


def run_cli(*argv):
    return cli.main(list(argv))


def write_config(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def result_line(capsys):
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("pistress-result ")]
    assert lines, f"no result line in output: {out!r}"
    return json.loads(lines[-1].removeprefix("pistress-result "))


class TestErrorCodes:
    def test_missing_config_is_config_error(self, capsys):
        assert run_cli("train", "--config", "/no/such/file.json") == cli.EXIT_CONFIG

    def test_unknown_key_is_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"no_such_key": 1}')
        assert run_cli("train", "--config", str(path)) == cli.EXIT_CONFIG

    def test_unparseable_config(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{oops")
        assert run_cli("train", "--config", str(path)) == cli.EXIT_CONFIG

    def test_missing_manifest_is_data_error(self, tmp_path, small_dataset):
        cfg, _ = small_dataset
        cfg = cfg.replace(data_dir=str(tmp_path / "empty"),
                          run_dir=str(tmp_path / "run"))
        path = write_config(tmp_path, cfg)
        assert run_cli("train", "--config", str(path)) == cli.EXIT_DATA

    def test_missing_checkpoint_is_data_error(self, tmp_path, small_dataset):
        cfg, _ = small_dataset
        cfg = cfg.replace(run_dir=str(tmp_path / "run"))
        path = write_config(tmp_path, cfg)
        assert run_cli("eval", "--config", str(path)) == cli.EXIT_DATA


class TestLock:
    def test_lock_prevents_concurrent_writers(self, tmp_path, small_dataset, capsys):
        cfg, _ = small_dataset
        cfg = cfg.replace(run_dir=str(tmp_path / "locked"))
        path = write_config(tmp_path, cfg)
        run_dir = Path(cfg.run_dir)
        run_dir.mkdir(parents=True)
        (run_dir / ".pistress.lock").write_text("12345")
        assert run_cli("train", "--config", str(path)) == cli.EXIT_DATA
        err = capsys.readouterr().err
        assert "locked" in err

    def test_lock_released_after_run(self, tmp_path, small_dataset):
        cfg, _ = small_dataset
        cfg = cfg.replace(run_dir=str(tmp_path / "ok"))
        path = write_config(tmp_path, cfg)
        assert run_cli("train", "--config", str(path)) == 0
        assert not (Path(cfg.run_dir) / ".pistress.lock").exists()


class TestSelftest:
    def test_clean_build_exits_zero(self, capsys):
        assert run_cli("selftest") == 0
        payload = result_line(capsys)
        assert payload["status"] == "ok"


class TestTrainEvalFlow:
    @pytest.fixture()
    def trained(self, tmp_path, small_dataset, capsys):
        cfg, _ = small_dataset
        cfg = cfg.replace(run_dir=str(tmp_path / "flow"))
        path = write_config(tmp_path, cfg)
        assert run_cli("train", "--config", str(path)) == 0
        payload = result_line(capsys)
        return cfg, path, payload

    def test_train_emits_summary_and_checkpoint(self, trained):
        cfg, _, payload = trained
        assert payload["command"] == "train"
        assert Path(payload["checkpoint"]).exists()
        assert np.isfinite(payload["final_test_total"])

    def test_eval_writes_documented_json(self, trained, capsys):
        cfg, path, _ = trained
        assert run_cli("eval", "--config", str(path), "--split", "test") == 0
        payload = result_line(capsys)
        assert payload["command"] == "eval"
        table_path = Path(cfg.run_dir) / "eval_test.json"
        table = pipeline.EvalTable.from_json(table_path.read_text())
        assert "Coarse" in table.rows
        for rep in table.rows.values():
            assert rep.total >= 0

    def test_super_resolve_flow(self, trained, small_dataset, capsys):
        cfg, path, _ = trained
        _, manifest = small_dataset
        rec = manifest.split_records("validation")[0]
        src = Path(cfg.resolved_data_dir) / rec.coarse_path
        assert run_cli("super-resolve", "--config", str(path), str(src)) == 0
        payload = result_line(capsys)
        outputs = payload["outputs"]
        assert outputs and Path(outputs[0]["output"]).exists()

    def test_super_resolve_missing_input(self, trained):
        cfg, path, _ = trained
        assert run_cli("super-resolve", "--config", str(path),
                       "/no/such/input.npz") == cli.EXIT_DATA

    def test_seed_override_changes_run(self, tmp_path, small_dataset, capsys):
        cfg, _ = small_dataset
        cfg = cfg.replace(run_dir=str(tmp_path / "s1"))
        path = write_config(tmp_path, cfg)
        assert run_cli("train", "--config", str(path), "--seed", "7") == 0
        run = json.loads((Path(cfg.run_dir) / "train_run.json").read_text())
        assert run["seed"] == 7

    def test_retrain_identical_checkpoint_bytes(self, tmp_path, small_dataset, capsys):
        cfg, _ = small_dataset
        cfg = cfg.replace(run_dir=str(tmp_path / "idem"))
        path = write_config(tmp_path, cfg)
        assert run_cli("train", "--config", str(path)) == 0
        first = (Path(cfg.run_dir) / "checkpoints" / "last.ckpt").read_bytes()
        assert run_cli("train", "--config", str(path)) == 0
        second = (Path(cfg.run_dir) / "checkpoints" / "last.ckpt").read_bytes()
        assert first == second
