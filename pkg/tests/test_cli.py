import json
import os

import numpy as np
import pytest

from promptlab import cli
from promptlab.cli import (ConfigError, GradcheckConfig, TheoryConfig,
                           TrainCmdConfig, load_config, parse_config, read_csv,
                           write_csv)
from promptlab.seeding import mix64


class TestConfigParsing:
    def test_unknown_key_is_hard_error_with_path(self):
        with pytest.raises(ConfigError, match="unknown config key 'learning_rte'"):
            parse_config(TrainCmdConfig, {"learning_rte": 0.1})

    def test_defaults_allow_empty_config(self):
        cfg = parse_config(TheoryConfig, {})
        assert cfg.P_list == [8, 16, 32]

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config(GradcheckConfig, "/nonexistent/cfg.json", {})

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(GradcheckConfig, str(p), {})

    def test_seed_override(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"base_seed": 5}))
        cfg = load_config(GradcheckConfig, str(p), {"base_seed": 11})
        assert cfg.base_seed == 11


class TestCsvRoundTrip:
    def test_floats_survive_exactly(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = [{"a": float(v), "b": i} for i, v in enumerate(rng.normal(size=20))]
        path = tmp_path / "t.csv"
        write_csv(str(path), rows, ["a", "b"])
        back = read_csv(str(path))
        for orig, rec in zip(rows, back):
            assert float(rec["a"]) == orig["a"]
            assert int(rec["b"]) == orig["b"]


class TestSeedMixing:
    def test_deterministic_and_sensitive(self):
        assert mix64(1, "x", 2) == mix64(1, "x", 2)
        assert mix64(1, "x", 2) != mix64(1, "x", 3)
        assert mix64(1, "x") != mix64(1, "y")

    def test_64bit_range(self):
        v = mix64(2 ** 63, "job", 7)
        assert 0 <= v < 2 ** 64


class TestGradcheckCommand:
    def test_passes_and_writes_report(self, tmp_path, capsys):
        code = cli.main(["gradcheck", "--out", str(tmp_path), "--seed", "0",
                         "--config", _write(tmp_path, {"trials": 3,
                                                       "composite_trials": 1})])
        assert code == 0
        out = capsys.readouterr().out
        assert "two_layer_vit_hinge" in out and "FAIL" not in out
        assert (tmp_path / "gradcheck_report.txt").exists()

    def test_corrupted_gradient_detected(self, tmp_path, capsys):
        code = cli.main(["gradcheck", "--out", str(tmp_path), "--seed", "0",
                         "--config", _write(tmp_path, {"trials": 2,
                                                       "composite_trials": 1,
                                                       "corrupt": True})])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out

    def test_report_deterministic(self, tmp_path, capsys):
        cfg = _write(tmp_path, {"trials": 2, "composite_trials": 1})
        cli.main(["gradcheck", "--out", str(tmp_path / "a"), "--seed", "3",
                  "--config", cfg])
        first = (tmp_path / "a" / "gradcheck_report.txt").read_text()
        cli.main(["gradcheck", "--out", str(tmp_path / "b"), "--seed", "3",
                  "--config", cfg])
        second = (tmp_path / "b" / "gradcheck_report.txt").read_text()
        assert first == second


def _write(tmp_path, doc, name=None):
    name = name or f"cfg{abs(hash(json.dumps(doc, sort_keys=True))) % 10 ** 6}.json"
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


class TestTrainCommand:
    CFG = {"arch": "vit", "method": "AP", "site": "site_1", "epochs": 2,
           "n_train": 48, "n_test": 48, "learning_rate": 0.01}

    def test_writes_record_and_curve(self, tmp_path, capsys):
        code = cli.main(["train", "--out", str(tmp_path), "--seed", "1",
                         "--config", _write(tmp_path, self.CFG)])
        assert code == 0
        doc = json.loads((tmp_path / "run_record.json").read_text())
        assert doc["param_count"] == 8 * 8 + 8 * 2 + 2
        curve = read_csv(str(tmp_path / "loss_curve.csv"))
        assert len(curve) == doc["steps"]

    def test_repeat_seed_byte_identical_except_walltime(self, tmp_path):
        cfg = _write(tmp_path, self.CFG)
        cli.main(["train", "--out", str(tmp_path / "r1"), "--seed", "2",
                  "--config", cfg])
        cli.main(["train", "--out", str(tmp_path / "r2"), "--seed", "2",
                  "--config", cfg])
        d1 = json.loads((tmp_path / "r1" / "run_record.json").read_text())
        d2 = json.loads((tmp_path / "r2" / "run_record.json").read_text())
        d1.pop("wall_time_s"), d2.pop("wall_time_s")
        assert json.dumps(d1, sort_keys=True) == json.dumps(d2, sort_keys=True)
        assert ((tmp_path / "r1" / "loss_curve.csv").read_bytes()
                == (tmp_path / "r2" / "loss_curve.csv").read_bytes())

    def test_zero_lr_reports_baseline(self, tmp_path):
        cfg = dict(self.CFG, learning_rate=0.0, method="LinearProbe", site=None)
        cli.main(["train", "--out", str(tmp_path), "--seed", "3",
                  "--config", _write(tmp_path, cfg)])
        doc = json.loads((tmp_path / "run_record.json").read_text())
        assert doc["config"]["learning_rate"] == 0.0

    def test_csv_dataset_ingestion(self, tmp_path):
        from promptlab import tasks
        ds = tasks.make_band_agreement_task(32, np.random.default_rng(5))
        dpath = tmp_path / "down.csv"
        tasks.save_dataset_csv(ds, str(dpath))
        cfg = {"arch": "cnn", "method": "AP", "site": "site_3", "epochs": 1,
               "dataset_path": str(dpath), "geometry": [1, 8, 8],
               "n_train": 32, "n_test": 32}
        code = cli.main(["train", "--out", str(tmp_path), "--seed", "4",
                         "--config", _write(tmp_path, cfg)])
        assert code == 0

    def test_missing_dataset_file_is_io_error(self, tmp_path):
        cfg = dict(self.CFG, dataset_path=str(tmp_path / "ghost.csv"),
                   geometry=[8, 8])
        with pytest.raises(FileNotFoundError):
            cli.main(["train", "--out", str(tmp_path), "--seed", "0",
                      "--config", _write(tmp_path, cfg)])


class TestEquivCommand:
    def test_both_cases_below_tolerance(self, tmp_path, capsys):
        code = cli.main(["equiv", "--out", str(tmp_path), "--seed", "0",
                         "--config", _write(tmp_path, {"draws": 10})])
        assert code == 0
        report = (tmp_path / "equiv_report.txt").read_text()
        assert "token/layer-norm" in report and "conv/batch-norm" in report


class TestAttnDistCommand:
    def test_matches_expected_columns(self, tmp_path):
        code = cli.main(["attn-dist", "--out", str(tmp_path), "--seed", "0",
                         "--config", _write(tmp_path, {"P_list": [8],
                                                       "dA_list": [1, 3]})])
        assert code == 0
        rows = read_csv(str(tmp_path / "attn_dist.csv"))
        for r in rows:
            assert float(r["layer1"]) == float(r["expected1"])
            assert float(r["layer2"]) == float(r["expected2"])


class TestTheoryCommand:
    def test_lemma_only_run(self, tmp_path, capsys):
        cfg = {"run_sweep": False, "lemma_P_list": [8, 16],
               "lemma_dA_list": [1, 2]}
        code = cli.main(["theory", "--out", str(tmp_path), "--seed", "0",
                         "--config", _write(tmp_path, cfg)])
        assert code == 0
        report = (tmp_path / "lemma1_report.txt").read_text()
        assert report.count("\n") == 2

    def test_tiny_sweep_serial_vs_parallel_identical(self, tmp_path):
        cfg = {"run_lemma": False, "P_list": [8], "h_list": [1], "seeds": 2,
               "max_steps": 1500, "n_test": 300}
        cli.main(["theory", "--out", str(tmp_path / "s"), "--seed", "1",
                  "--config", _write(tmp_path, cfg), "--jobs", "1"])
        cli.main(["theory", "--out", str(tmp_path / "p"), "--seed", "1",
                  "--config", _write(tmp_path, cfg), "--jobs", "2"])
        assert ((tmp_path / "s" / "theory_cells.csv").read_bytes()
                == (tmp_path / "p" / "theory_cells.csv").read_bytes())


class TestLayerSweepCommand:
    def test_emits_all_rows_serial_parallel_identical(self, tmp_path):
        cfg = {"arch": "vit", "seeds": 2, "lr_grid": [0.01], "epochs": 1,
               "n_train": 32, "n_test": 32}
        cli.main(["layer-sweep", "--out", str(tmp_path / "s"), "--seed", "0",
                  "--config", _write(tmp_path, cfg), "--jobs", "1"])
        cli.main(["layer-sweep", "--out", str(tmp_path / "p"), "--seed", "0",
                  "--config", _write(tmp_path, cfg), "--jobs", "2"])
        s = (tmp_path / "s" / "layer_sweep_vit_runs.csv").read_bytes()
        p = (tmp_path / "p" / "layer_sweep_vit_runs.csv").read_bytes()
        assert s == p
        summary = read_csv(str(tmp_path / "s" / "layer_sweep_vit_summary.csv"))
        per_seed = {}
        for r in summary:
            per_seed.setdefault(r["seed"], []).append(r)
        for seed, rows in per_seed.items():
            methods = [r["method"] for r in rows]
            assert methods.count("AP") == 5
            assert "VP_additive" in methods and "NormTune" in methods
