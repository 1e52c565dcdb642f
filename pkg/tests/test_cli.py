"""Command-line surface: subcommands, exit codes and configuration layering."""

from __future__ import annotations

import csv
import json

import pytest

from carmpose.cli.config import RunConfig, load_run_config
from carmpose.cli.main import main
from carmpose.errors import ConfigError


def _csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _report(path):
    """report.csv rows keyed by metric and threshold."""
    return {f"{r['metric']} {r['threshold']}".strip(): r for r in _csv(path)}


def _generate(out, *extra, n=12, seed=7):
    return main(["--out", str(out), "--seed", str(seed), "generate", "--n", str(n), *extra])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus noiseless oracle predictions, generated once."""
    out = tmp_path_factory.mktemp("run")
    assert _generate(out) == 0
    assert main(["--out", str(out), "predict-oracle", "--dataset", str(out / "dataset.jsonl")]) == 0
    return out


class TestGenerate:
    def test_outputs(self, workspace):
        lines = (workspace / "dataset.jsonl").read_text().splitlines()
        assert len(lines) == 12
        manifest = json.loads((workspace / "manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert manifest["n"] == 12 and manifest["draws"] >= 12
        assert manifest["config"]["seed"] == 7
        assert manifest["instrument"] == "cube"

    def test_byte_identical_reruns(self, tmp_path):
        assert _generate(tmp_path / "a") == 0
        assert main(["--out", str(tmp_path / "b"), "--seed", "7", "--threads", "3",
                     "generate", "--n", "12"]) == 0
        assert (tmp_path / "a" / "dataset.jsonl").read_bytes() == (tmp_path / "b" / "dataset.jsonl").read_bytes()

    def test_split(self, tmp_path):
        assert _generate(tmp_path, "--split", "0.75", n=8) == 0
        train = (tmp_path / "dataset_train.jsonl").read_text().splitlines()
        val = (tmp_path / "dataset_val.jsonl").read_text().splitlines()
        assert (len(train), len(val)) == (6, 2)

    def test_zero_samples(self, tmp_path):
        assert _generate(tmp_path, n=0) == 0
        assert (tmp_path / "dataset.jsonl").read_text() == ""

    def test_clinical_screw(self, tmp_path):
        assert _generate(tmp_path, "--instrument", "screw", "--clinical", n=5) == 0
        for line in (tmp_path / "dataset.jsonl").read_text().splitlines():
            record = json.loads(line)
            assert record["instrument"] == "screw"
            assert abs(record["r_deg"][0]) <= 45.0 and abs(record["r_deg"][1]) <= 45.0

    def test_invalid_split(self, tmp_path):
        assert _generate(tmp_path, "--split", "1.5") == 2

    def test_unknown_instrument(self, tmp_path):
        assert _generate(tmp_path, "--instrument", str(tmp_path / "missing.json")) == 2

    def test_infeasible_ranges(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"ranges": {"t_z": {"min": 20.0, "max": 25.0}}}))
        assert main(["--config", str(config), "--out", str(tmp_path), "generate", "--n", "1"]) == 4


class TestSolveAndEvaluate:
    def test_solve(self, workspace, tmp_path):
        assert main(["--out", str(tmp_path), "solve", "--dataset", str(workspace / "dataset.jsonl"),
                     "--predictions", str(workspace / "predictions.jsonl")]) == 0
        records = [json.loads(line) for line in (tmp_path / "poses.jsonl").read_text().splitlines()]
        assert [r["id"] for r in records] == list(range(12))
        assert all("R" in r for r in records)

    def test_evaluate_predictions(self, workspace, tmp_path, capsys):
        assert main(["--out", str(tmp_path), "evaluate", "--dataset", str(workspace / "dataset.jsonl"),
                     "--predictions", str(workspace / "predictions.jsonl")]) == 0
        rows = _report(tmp_path / "report.csv")
        for label in ("0.1d", "0.05d", "1mm", "0.02d"):
            assert rows[f"ADD(-S) {label}"]["pass_rate"] == "100.0"
        assert rows["2D 5px"]["pass_rate"] == "100.0"
        assert float(rows["ADD(-S) 0.1d"]["mean"]) < 1e-6
        assert "12 samples" in capsys.readouterr().out

    def test_evaluate_poses(self, workspace, tmp_path):
        assert main(["--out", str(tmp_path), "solve", "--dataset", str(workspace / "dataset.jsonl"),
                     "--predictions", str(workspace / "predictions.jsonl")]) == 0
        assert main(["--out", str(tmp_path), "evaluate", "--dataset", str(workspace / "dataset.jsonl"),
                     "--poses", str(tmp_path / "poses.jsonl"), "--thresholds", "0.1d", "2mm"]) == 0
        rows = _report(tmp_path / "report.csv")
        assert rows["ADD(-S) 0.1d"]["pass_rate"] == "100.0" and rows["ADD(-S) 2mm"]["pass_rate"] == "100.0"
        evaluations = (tmp_path / "evaluations.jsonl").read_text().splitlines()
        assert len(evaluations) == 12

    def test_missing_poses_rejected(self, workspace, tmp_path):
        poses = tmp_path / "poses.jsonl"
        poses.write_text('{"id": 0, "status": "no-detection"}\n')
        assert main(["--out", str(tmp_path), "evaluate", "--dataset", str(workspace / "dataset.jsonl"),
                     "--poses", str(poses)]) == 3

    def test_background_only_counts_as_missed(self, workspace, tmp_path):
        predictions = tmp_path / "predictions.jsonl"
        with open(predictions, "w", encoding="utf-8") as f:
            for line in (workspace / "predictions.jsonl").read_text().splitlines():
                record = json.loads(line)
                if record["id"] != 0:
                    f.write(line + "\n")
        assert main(["--out", str(tmp_path), "evaluate", "--dataset", str(workspace / "dataset.jsonl"),
                     "--predictions", str(predictions)]) == 0
        rows = _report(tmp_path / "report.csv")
        assert float(rows["ADD(-S) 0.1d"]["pass_rate"]) == pytest.approx(100.0 * 11 / 12)
        assert rows["no_pose"]["n"] == "1"

    def test_malformed_predictions(self, workspace, tmp_path, capsys):
        predictions = tmp_path / "predictions.jsonl"
        lines = (workspace / "predictions.jsonl").read_text().splitlines()
        predictions.write_text("\n".join(lines[:4] + ["{broken"] + lines[4:]) + "\n")
        code = main(["--out", str(tmp_path), "solve", "--dataset", str(workspace / "dataset.jsonl"),
                     "--predictions", str(predictions)])
        assert code == 3
        assert "L5" in capsys.readouterr().err

    def test_unknown_sample_id(self, workspace, tmp_path):
        predictions = tmp_path / "predictions.jsonl"
        line = (workspace / "predictions.jsonl").read_text().splitlines()[0]
        record = json.loads(line)
        record["id"] = 500
        predictions.write_text(json.dumps(record) + "\n")
        assert main(["--out", str(tmp_path), "solve", "--dataset", str(workspace / "dataset.jsonl"),
                     "--predictions", str(predictions)]) == 3

    def test_bad_threshold(self, workspace, tmp_path):
        assert main(["--out", str(tmp_path), "evaluate", "--dataset", str(workspace / "dataset.jsonl"),
                     "--predictions", str(workspace / "predictions.jsonl"), "--thresholds", "5cm"]) == 2


class TestBenchAndCalibrate:
    def test_bench(self, workspace, tmp_path):
        assert main(["--out", str(tmp_path), "bench", "--dataset", str(workspace / "dataset.jsonl"),
                     "--iterations", "3"]) == 0
        rows = _csv(tmp_path / "bench.csv")
        assert [(r["stage"], r["n"]) for r in rows] == [
            ("select_best", "45360"), ("epnp", "9"), ("epnp+gauss_newton", "9"), ("epnp", "27"), ("epnp", "81"),
        ]
        assert all(float(r["median_ms"]) > 0.0 for r in rows)

    def test_calibrate(self, tmp_path):
        assert main(["--out", str(tmp_path), "calibrate", "--trials", "10",
                     "--noise-levels", "0", "0.25", "1"]) == 0
        rows = _csv(tmp_path / "calibration.csv")
        assert [r["status"] for r in rows] == ["ok"] * 3
        translation = [float(r["median_translation_mm"]) for r in rows]
        rotation = [float(r["median_rotation_deg"]) for r in rows]
        assert translation[0] < 1e-9 and rotation[0] < 1e-9
        assert translation == sorted(translation) and rotation == sorted(rotation)

    def test_calibrate_collinear(self, tmp_path):
        assert main(["--out", str(tmp_path), "calibrate", "--trials", "3", "--noise-levels", "0",
                     "--collinear"]) == 0
        rows = _csv(tmp_path / "calibration.csv")
        assert rows[0]["status"] == "degenerate" and rows[0]["degenerate"] == "3"

    def test_too_few_points(self, tmp_path):
        assert main(["--out", str(tmp_path), "calibrate", "--points", "2"]) == 2


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.seed == 0 and cfg.n == 1000 and cfg.min_confidence == 0.5
        assert cfg.thresholds == ("0.1d", "0.05d", "1mm", "0.02d")
        assert len(cfg.parsed_thresholds()) == 4

    def test_round_trip(self):
        cfg = RunConfig(seed=3, thresholds=("0.1d", "2mm"), split=0.7).merged({"ranges": {"sid": [1000.0, 1100.0]}})
        assert RunConfig.from_dict(json.loads(cfg.canonical_json())) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig(jitter_px=1.5, collinear=True)
        cfg.to_json(tmp_path / "run.json")
        assert RunConfig.from_json(tmp_path / "run.json") == cfg

    def test_precedence(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 3, "n": 50, "codec": {"alpha": 3.0}}))
        cfg = load_run_config(str(path), {"seed": 5, "n": None})
        assert cfg.seed == 5 and cfg.n == 50
        assert cfg.codec.alpha == 3.0 and cfg.codec.beta == 0.2

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown configuration keys"):
            RunConfig().merged({"sed": 1})

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.from_json(tmp_path / "nope.json")
        assert main(["--config", str(tmp_path / "nope.json"), "calibrate"]) == 2

    @pytest.mark.parametrize("overrides", [
        {"threads": 0},
        {"min_confidence": 1.5},
        {"log_level": "LOUD"},
        {"constraint": "robotic"},
        {"noise_levels": []},
        {"assume_geometry_sid": -1.0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            RunConfig().merged(overrides)
