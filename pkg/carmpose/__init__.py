# carmpose - variable-geometry X-ray instrument pose toolkit
__version__ = "0.1.0"

from carmpose.core.geometry import AcquisitionGeometry, RigidTransform, project_points
from carmpose.solver.pnp import solve_epnp, solve_pnp
from carmpose.metrics.pose_metrics import add, add_s, evaluate_pose

__all__ = [
    "AcquisitionGeometry",
    "RigidTransform",
    "project_points",
    "solve_epnp",
    "solve_pnp",
    "add",
    "add_s",
    "evaluate_pose",
]
