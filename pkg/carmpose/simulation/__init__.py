from carmpose.simulation.capture import CaptureRanges, sample_geometry
from carmpose.simulation.dataset import generate_dataset
from carmpose.simulation.fiducials import simulate_dome_link, simulate_fiducial_board
from carmpose.simulation.oracle import oracle_predict

__all__ = [
    "CaptureRanges",
    "sample_geometry",
    "generate_dataset",
    "simulate_dome_link",
    "simulate_fiducial_board",
    "oracle_predict",
]
