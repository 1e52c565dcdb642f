from carmpose.core.geometry import AcquisitionGeometry, RigidTransform, back_project, project_points
from carmpose.core.frames import FrameChain, chain_resolve
from carmpose.core.instruments import InstrumentModel, load_instrument

__all__ = [
    "AcquisitionGeometry",
    "RigidTransform",
    "back_project",
    "project_points",
    "FrameChain",
    "chain_resolve",
    "InstrumentModel",
    "load_instrument",
]
