"""Shared fixtures for the carmpose test suite."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from carmpose.core.geometry import AcquisitionGeometry, RigidTransform  # noqa: E402
from carmpose.core.instruments import load_instrument  # noqa: E402
from carmpose.simulation.capture import CaptureRanges  # noqa: E402
from carmpose.simulation.dataset import build_dataset  # noqa: E402


def random_pose(rng: np.random.Generator, depth_mm: float = 700.0, spread_mm: float = 40.0) -> RigidTransform:
    """Random rotation, translation near the optical axis at the given depth."""
    angles = rng.uniform(-45.0, 45.0, 3)
    t = (rng.uniform(-spread_mm, spread_mm), rng.uniform(-spread_mm, spread_mm),
         depth_mm + rng.uniform(-spread_mm, spread_mm))
    return RigidTransform.from_euler(angles, t)


@pytest.fixture(scope="session")
def cube():
    return load_instrument("cube")


@pytest.fixture(scope="session")
def screw():
    return load_instrument("screw")


@pytest.fixture
def geometry() -> AcquisitionGeometry:
    return AcquisitionGeometry.from_fov(1100.0, 300.0, (960, 742))


@pytest.fixture
def pose() -> RigidTransform:
    return RigidTransform.from_euler((20.0, -15.0, 30.0), (10.0, -5.0, 700.0))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ranges() -> CaptureRanges:
    return CaptureRanges()


@pytest.fixture(scope="session")
def cube_samples(cube, ranges):
    return build_dataset(cube, ranges, 24, seed=7).samples
