"""End-to-end acceptance runs over large seeded workloads (marked slow)."""

from __future__ import annotations

import csv
import time

import numpy as np
import pytest

from carmpose.cli.main import main
from carmpose.cli.pipeline import solve_sample
from carmpose.codec.grid import CodecConfig, PredictionGrid, confidence, layout_for, select_best
from carmpose.core.geometry import RigidTransform, compose, project_points
from carmpose.core.instruments import InstrumentModel
from carmpose.metrics.pose_metrics import Threshold, add, add_s, angular_error, evaluate_pose, translation_error
from carmpose.metrics.report import aggregate
from carmpose.simulation.capture import constraint_ok, draw_geometry
from carmpose.simulation.dataset import build_dataset, generate_dataset, write_dataset
from carmpose.simulation.fiducials import random_link
from carmpose.simulation.oracle import OracleConfig, oracle_predict
from carmpose.solver.pnp import CorrespondenceSet, solve_epnp
from carmpose.solver.registration import register_point_sets

from conftest import random_pose

pytestmark = pytest.mark.slow


def _median_ms(fn, iterations: int = 300, warmup: int = 20) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iterations):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1e3)
    return float(np.median(samples))


class TestSolverRecovery:
    def test_noiseless_pnp(self, cube, ranges):
        """Geometries drawn over the full SID and FOV ranges, rotations within 45 degrees."""
        rng = np.random.default_rng(2024)
        sids = []
        for _ in range(1000):
            _, geometry = draw_geometry(ranges, rng)
            pose = random_pose(rng, depth_mm=rng.uniform(600.0, 0.8 * geometry.focal_length_mm))
            points = project_points(cube.control_points, pose, geometry)
            solution = solve_epnp(CorrespondenceSet(cube.control_points, points, geometry))
            assert translation_error(pose, solution.pose) < 1e-6
            assert angular_error(pose, solution.pose) < 1e-6
            sids.append(geometry.focal_length_mm)
        assert min(sids) < 970.0 and max(sids) > 1210.0

    def test_registration(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            link = random_link(rng)
            source = rng.uniform(-100.0, 100.0, (10, 3))
            result = register_point_sets(source, link.apply(source))
            assert result.transform.is_close(link, tol=1e-9)
            assert np.linalg.det(result.transform.rotation) == pytest.approx(1.0, abs=1e-12)


class TestMetricOracles:
    @staticmethod
    def _add_reference(points, gt, pred):
        total = 0.0
        for p in points:
            total += np.linalg.norm(gt.rotation @ p + gt.translation - (pred.rotation @ p + pred.translation))
        return total / len(points)

    @staticmethod
    def _add_s_reference(points, gt, pred):
        moved_pred = [pred.rotation @ q + pred.translation for q in points]
        total = 0.0
        for p in points:
            target = gt.rotation @ p + gt.translation
            total += min(np.linalg.norm(target - q) for q in moved_pred)
        return total / len(points)

    def test_add_and_add_s(self, cube, screw):
        rng = np.random.default_rng(5)
        models = [cube, screw]
        for case in range(200):
            model = models[case % 2] if case % 4 else InstrumentModel("cloud", rng.normal(0.0, 15.0, (40, 3)))
            gt = random_pose(rng)
            pred = compose(gt, RigidTransform.from_euler(rng.normal(0.0, 8.0, 3), rng.normal(0.0, 3.0, 3)))
            a, s = add(model, gt, pred), add_s(model, gt, pred)
            assert a == pytest.approx(self._add_reference(model.vertices, gt, pred), abs=1e-12, rel=1e-12)
            assert s == pytest.approx(self._add_s_reference(model.vertices, gt, pred), abs=1e-12, rel=1e-12)
            assert s <= a + 1e-12

    def test_confidence_sweep(self):
        grid = (30, 24)
        d_t = 0.2 * np.hypot(*grid)
        sweep = np.linspace(0.0, 1.5 * d_t, 1000)
        values = confidence(sweep, grid, alpha=2.0, beta=0.2)
        assert values[0] == 1.0
        assert np.all(values[sweep >= d_t] == 0.0)
        assert np.all(np.diff(values) <= 0.0)


class TestEndToEnd:
    def test_noiseless_round_trip(self, tmp_path):
        out = str(tmp_path)
        dataset = str(tmp_path / "dataset.jsonl")
        assert main(["--out", out, "--seed", "11", "--threads", "4", "generate", "--n", "500"]) == 0
        assert main(["--out", out, "predict-oracle", "--dataset", dataset]) == 0
        assert main(["--out", out, "evaluate", "--dataset", dataset,
                     "--predictions", str(tmp_path / "predictions.jsonl")]) == 0
        with open(tmp_path / "report.csv", newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        rates = {r["threshold"]: r["pass_rate"] for r in rows if r["metric"] == "ADD(-S)"}
        assert rates == {"0.1d": "100.0", "0.05d": "100.0", "1mm": "100.0", "0.02d": "100.0"}
        assert "no_pose" not in {r["metric"] for r in rows}

    def test_byte_identical_generation(self, cube, ranges, tmp_path):
        write_dataset(tmp_path / "a.jsonl", generate_dataset(cube, ranges, 1000, seed=21))
        write_dataset(tmp_path / "b.jsonl", generate_dataset(cube, ranges, 1000, seed=21, threads=4))
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_clinical_screw(self, screw, ranges):
        samples = generate_dataset(screw, ranges, 1000, seed=13, constraint="clinical")
        assert len(samples) == 1000
        for sample in samples:
            assert constraint_ok(sample.rotation_deg, "clinical")
            assert np.all(sample.geometry.contains(sample.points_2d))


class TestNoisyOracle:
    @pytest.fixture(scope="class")
    def samples(self, cube, ranges):
        return build_dataset(cube, ranges, 200, seed=17).samples

    def _median_add(self, cube, samples, jitter, seed):
        config = OracleConfig(jitter_px=jitter, background_cells=0)
        errors = []
        for sample in samples:
            record = solve_sample(sample, [r.cell for r in oracle_predict(sample, config, seed)], cube)
            errors.append(add(cube, sample.pose, record.pose) if record.solved else np.inf)
        return float(np.median(errors))

    def test_median_add_grows_with_jitter(self, cube, samples):
        medians = []
        for jitter in (0.0, 0.5, 1.0, 2.0, 4.0):
            medians.append(float(np.median([self._median_add(cube, samples, jitter, s) for s in range(5)])))
        assert medians[0] < 1e-6
        assert all(b >= a for a, b in zip(medians, medians[1:]))

    def test_reprojection_pass_rate_at_two_pixels(self, cube, samples):
        config = OracleConfig(jitter_px=2.0)
        evals, missed = [], 0
        for sample in samples:
            record = solve_sample(sample, [r.cell for r in oracle_predict(sample, config, 3)], cube)
            if not record.solved:
                missed += 1
                continue
            evals.append(evaluate_pose(cube, sample.pose, record.pose, sample.geometry,
                                       gt_points_px=sample.points_2d))
        assert aggregate(evals, missed=missed).pass_rate_2d >= 95.0

    def test_add_pass_rate_against_jitter(self, cube, ranges):
        """
        ADD < 0.1 d over 500 cube samples. Image noise mostly turns into depth
        error along the viewing ray, which no estimator removes at these
        magnifications, so the 2 px rate is held to a measured bracket.
        """
        samples = build_dataset(cube, ranges, 500, seed=17).samples
        threshold = (Threshold.parse("0.1d"),)
        rates = []
        for jitter in (0.0, 0.5, 2.0):
            config = OracleConfig(jitter_px=jitter)
            evals, missed = [], 0
            for sample in samples:
                record = solve_sample(sample, [r.cell for r in oracle_predict(sample, config, 3)], cube)
                if not record.solved:
                    missed += 1
                    continue
                evals.append(evaluate_pose(cube, sample.pose, record.pose, sample.geometry, threshold))
            rates.append(aggregate(evals, threshold, missed=missed).pass_rates["0.1d"])
        assert rates[0] == 100.0
        assert rates[1] >= 80.0
        assert 30.0 <= rates[2] <= 70.0
        assert rates == sorted(rates, reverse=True)


class TestTiming:
    def test_epnp_under_a_millisecond(self, cube_samples, cube):
        sample = cube_samples[0]
        c = CorrespondenceSet(cube.control_points, sample.points_2d, sample.geometry)
        assert _median_ms(lambda: solve_epnp(c)) < 1.0

    def test_select_best_under_five_milliseconds(self, cube_samples):
        sample = cube_samples[0]
        layout = layout_for(sample.geometry.image_size_px, CodecConfig())
        assert layout.total_predictions == 45360
        grid = PredictionGrid.from_cells(layout, [r.cell for r in oracle_predict(sample)])
        assert _median_ms(lambda: select_best(grid)) < 5.0

    def test_bench_grows_with_point_count(self, tmp_path):
        out = str(tmp_path)
        assert main(["--out", out, "--seed", "3", "generate", "--n", "8"]) == 0
        assert main(["--out", out, "bench", "--dataset", str(tmp_path / "dataset.jsonl"),
                     "--iterations", "1000"]) == 0
        with open(tmp_path / "bench.csv", newline="", encoding="utf-8") as f:
            rows = [r for r in csv.DictReader(f) if r["stage"] == "epnp"]
        assert [int(r["n"]) for r in rows] == [9, 27, 81]
        medians = [float(r["median_ms"]) for r in rows]
        assert medians[-1] > medians[0]
        assert all(b >= 0.9 * a for a, b in zip(medians, medians[1:]))
