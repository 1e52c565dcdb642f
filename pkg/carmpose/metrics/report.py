"""
Aggregate accuracy reports and their CSV / record-file output.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from carmpose.codec.records import format_float, write_jsonl
from carmpose.errors import DataError, EmptyInputError
from carmpose.metrics.pose_metrics import (
    DEFAULT_PIXEL_THRESHOLD,
    DEFAULT_THRESHOLDS,
    PoseEvaluation,
    Threshold,
)


REPORT_COLUMNS = ("metric", "threshold", "pass_rate", "mean", "std", "n")


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Population mean and standard deviation with order-independent summation."""
    n = len(values)
    if n == 0:
        return math.nan, math.nan
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


@dataclass(frozen=True)
class AccuracyReport:
    n: int
    pass_rates: dict[str, float]            # threshold label -> percent
    translation_mean_mm: float
    translation_std_mm: float
    angle_mean_deg: float
    angle_std_deg: float
    pixel_threshold: float
    pass_rate_2d: float
    missed: int = 0                         # samples without a pose, counted as failures
    headline_mean_mm: float = math.nan      # ADD(-S) over solved samples
    headline_std_mm: float = math.nan
    reproj_mean_px: float = math.nan        # finite 2D errors only
    reproj_std_px: float = math.nan

    def rows(self) -> list[dict[str, object]]:
        """
        One row per ADD(-S) threshold and per error statistic, with numeric
        pass_rate (percent), mean and std; cells that do not apply stay empty.
        """
        rows: list[dict[str, object]] = [
            {"metric": "ADD(-S)", "threshold": label, "pass_rate": rate,
             "mean": self.headline_mean_mm, "std": self.headline_std_mm, "n": self.n}
            for label, rate in self.pass_rates.items()
        ]
        rows.append({"metric": "translation_mm", "threshold": "", "pass_rate": "",
                     "mean": self.translation_mean_mm, "std": self.translation_std_mm, "n": self.n})
        rows.append({"metric": "angle_deg", "threshold": "", "pass_rate": "",
                     "mean": self.angle_mean_deg, "std": self.angle_std_deg, "n": self.n})
        rows.append({"metric": "2D", "threshold": f"{self.pixel_threshold:g}px", "pass_rate": self.pass_rate_2d,
                     "mean": self.reproj_mean_px, "std": self.reproj_std_px, "n": self.n})
        if self.missed:
            rows.append({"metric": "no_pose", "threshold": "", "pass_rate": "",
                         "mean": "", "std": "", "n": self.missed})
        return rows


def aggregate(
    evals: Sequence[PoseEvaluation],
    thresholds: Sequence[Threshold] = DEFAULT_THRESHOLDS,
    pixel_threshold: float = DEFAULT_PIXEL_THRESHOLD,
    missed: int = 0,
) -> AccuracyReport:
    """
    Pass percentages per threshold plus mean ± std of ADD(-S), translation,
    angle and 2D errors. `missed` samples (no detection, failed solve) count
    against every pass rate but not toward the error statistics.
    """
    if not evals and not missed:
        raise EmptyInputError("cannot aggregate an empty evaluation list")
    n = len(evals) + missed
    rates = {
        t.label: 100.0 * sum(1 for e in evals if e.passes_threshold(t)) / n
        for t in thresholds
    }
    t_mean, t_std = _mean_std([e.translation_err_mm for e in evals])
    a_mean, a_std = _mean_std([e.angular_err_deg for e in evals])
    h_mean, h_std = _mean_std([e.headline_mm for e in evals])
    r_mean, r_std = _mean_std([e.reproj_err_px for e in evals if math.isfinite(e.reproj_err_px)])
    rate_2d = 100.0 * sum(1 for e in evals if e.passes_2d(pixel_threshold)) / n
    return AccuracyReport(n, rates, t_mean, t_std, a_mean, a_std, pixel_threshold, rate_2d, missed,
                          h_mean, h_std, r_mean, r_std)


def write_report_csv(path: str | Path, report: AccuracyReport) -> None:
    write_table_csv(path, REPORT_COLUMNS, report.rows())


def write_evaluations(path: str | Path, evals: Sequence[PoseEvaluation]) -> int:
    return write_jsonl(path, (e.to_dict() for e in evals))


def write_table_csv(path: str | Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    """Generic CSV; floats use the record-file formatting."""
    formatted = [
        {k: (format_float(v) if isinstance(v, (float, np.floating)) and math.isfinite(v) else v)
         for k, v in row.items()}
        for row in rows
    ]
    _write_csv(path, header, formatted)


def _write_csv(path: str | Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(header), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
