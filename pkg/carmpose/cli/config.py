"""
Effective run configuration.

Three layers, later ones winning: built-in defaults, an optional JSON file
(--config), and command-line flags. The merged configuration serializes to
canonical JSON and is echoed into every output manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from carmpose.codec.grid import CodecConfig
from carmpose.errors import ConfigError
from carmpose.metrics.pose_metrics import DEFAULT_PIXEL_THRESHOLD, DEFAULT_THRESHOLDS, Threshold
from carmpose.simulation.capture import CONSTRAINTS, DEFAULT_RANGES_PATH, CaptureRanges
from carmpose.simulation.fiducials import RigConfig

DATA_DIR = Path(__file__).resolve().parents[2] / "data"
DEFAULT_CODEC_PATH = DATA_DIR / "codec" / "default_codec.json"

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class RunConfig:
    # global
    seed: int = 0
    threads: int = 1
    out: str = "."
    log_level: str = "INFO"

    # generate
    instrument: str = "cube"
    n: int = 1000
    constraint: str = "full"
    fiducial_noise_px: float = 0.0
    split: Optional[float] = None

    # predict-oracle
    jitter_px: float = 0.0
    background: int = 16

    # solve / evaluate
    refine: bool = True
    assume_geometry_sid: Optional[float] = None
    min_confidence: float = 0.5
    thresholds: tuple[str, ...] = tuple(t.label for t in DEFAULT_THRESHOLDS)
    pixel_threshold: float = DEFAULT_PIXEL_THRESHOLD

    # bench
    bench_iterations: int = 1000

    # calibrate
    calib_points: int = 12
    noise_levels: tuple[float, ...] = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0)
    trials: int = 20
    collinear: bool = False

    # input paths
    dataset: Optional[str] = None
    predictions: Optional[str] = None
    poses: Optional[str] = None

    ranges: CaptureRanges = field(default_factory=lambda: CaptureRanges.from_json(DEFAULT_RANGES_PATH))
    codec: CodecConfig = field(default_factory=lambda: CodecConfig.from_json(DEFAULT_CODEC_PATH))
    rig: RigConfig = field(default_factory=RigConfig)

    def __post_init__(self) -> None:
        self.thresholds = tuple(str(t) for t in self.thresholds)
        self.noise_levels = tuple(float(v) for v in self.noise_levels)
        self.validate()

    def validate(self) -> None:
        """Reject invalid settings before any work starts."""
        if self.threads < 1:
            raise ConfigError(f"--threads must be at least 1, got {self.threads}")
        if self.n < 0:
            raise ConfigError(f"--n must be non-negative, got {self.n}")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"unknown log level '{self.log_level}'")
        if self.constraint not in CONSTRAINTS:
            raise ConfigError(f"unknown constraint '{self.constraint}'")
        if self.split is not None and not 0.0 < self.split < 1.0:
            raise ConfigError(f"--split must lie strictly between 0 and 1, got {self.split}")
        for name in ("fiducial_noise_px", "jitter_px", "pixel_threshold"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.background < 0:
            raise ConfigError("--background must be non-negative")
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ConfigError(f"--min-confidence must lie in [0, 1], got {self.min_confidence}")
        if self.assume_geometry_sid is not None and self.assume_geometry_sid <= 0:
            raise ConfigError("--assume-geometry needs a positive SID")
        if not self.thresholds:
            raise ConfigError("at least one threshold is required")
        self.parsed_thresholds()
        if self.bench_iterations < 1:
            raise ConfigError("--iterations must be at least 1")
        if self.calib_points < 3:
            raise ConfigError(f"--points must be at least 3, got {self.calib_points}")
        if self.trials < 1:
            raise ConfigError("--trials must be at least 1")
        if any(v < 0 for v in self.noise_levels) or not self.noise_levels:
            raise ConfigError("noise levels must be a non-empty list of non-negative values")

    def parsed_thresholds(self) -> tuple[Threshold, ...]:
        return tuple(Threshold.parse(t) for t in self.thresholds)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        data: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("ranges", "codec", "rig"):
                data[f.name] = value.to_dict()
            elif isinstance(value, tuple):
                data[f.name] = list(value)
            else:
                data[f.name] = value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls().merged(data)

    def merged(self, overrides: dict) -> "RunConfig":
        """Copy with the given keys replaced; nested sections merge key by key."""
        known = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        changes: dict[str, Any] = {}
        for key, value in overrides.items():
            if value is None and key not in ("split", "assume_geometry_sid", "dataset", "predictions", "poses"):
                continue
            if key == "ranges":
                changes[key] = CaptureRanges.from_dict({**self.ranges.to_dict(), **value})
            elif key == "codec":
                changes[key] = CodecConfig.from_dict({**self.codec.to_dict(), **value})
            elif key == "rig":
                changes[key] = RigConfig.from_dict({**self.rig.to_dict(), **value})
            elif key in ("thresholds", "noise_levels"):
                changes[key] = tuple(value)
            else:
                changes[key] = value
        try:
            return replace(self, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        """Explicitly named config file; a missing file is an error."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def to_json(self, path: str | Path) -> None:
        with open(Path(path), "w", encoding="utf-8", newline="\n") as f:
            f.write(self.canonical_json())
            f.write("\n")


def load_run_config(config_path: Optional[str], flags: dict) -> RunConfig:
    """defaults < config file < flags (flags left at None do not override)."""
    base = RunConfig.from_json(config_path) if config_path else RunConfig()
    return base.merged({k: v for k, v in flags.items() if v is not None})
